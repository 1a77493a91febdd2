"""fmseg-extract: export model outputs into the exchange dataset layout.

    fmseg-extract export --images <dir> --classes <file> --out <root>
                         [--device cpu] [--gt-dir <dir>] [--split train]
                         [--tiny-random-models SEED]
    fmseg-extract verify-alignment --dataset <root> --image-id ID
                         --class-id K --box r0,c0,r1,c1

The classes file holds one class name per line. --tiny-random-models
swaps the pretrained checkpoints for small seeded random-weight models
of the same architectures (offline smoke-testing).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import writer
from .alignment_check import top_patches_in_box
from .dataset import export_directory
from .heatmap import mosaic
from .models import ExtractorConfig, load_pretrained, tiny_random_bundle


def _read_classes(path) -> list[str]:
    names = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
    if not names:
        raise ValueError(f"no class names in {path}")
    return names


def cmd_export(args) -> int:
    config = ExtractorConfig(
        oversample=args.oversample,
        crop_grid=tuple(int(x) for x in args.crop_grid.split("x")),
        vision_input=args.mask_space,
        device=args.device,
        points_per_side=args.points_per_side,
    )
    if args.tiny_random_models is not None:
        bundle = tiny_random_bundle(seed=args.tiny_random_models, device=args.device)
        config.oversample = 64
        config.crop_grid = (2, 2)
        config.vision_input = 64
        config.points_per_side = 4
    else:
        bundle = load_pretrained(config)
    labels = None
    if args.labels:
        labels = json.loads(Path(args.labels).read_text())
    count = export_directory(
        bundle, config, args.images, _read_classes(args.classes), args.out,
        gt_dir=args.gt_dir, labels=labels, split=args.split,
    )
    print(f"exported {count} images to {args.out}")
    return 0


def cmd_verify_alignment(args) -> int:
    root = Path(args.dataset)
    manifest = json.loads((root / "manifest.json").read_text())
    record = next(r for r in manifest["images"] if r["image_id"] == args.image_id)
    vocab = json.loads((root / "vocab.json").read_text())
    prototypes = writer.read_tensor(root / vocab["prototypes"]).astype(np.float64)
    crops = [
        (e["row"], e["col"], writer.read_tensor(root / e["path"]).astype(np.float64))
        for e in record["crop_features"]
    ]
    grid = mosaic(crops, tuple(record["crop_grid"]))
    heat = grid @ prototypes[args.class_id]
    box = tuple(float(x) for x in args.box.split(","))
    fraction, coords = top_patches_in_box(heat, box, top_fraction=args.top_fraction)
    print(f"top-{args.top_fraction:.0%} patches inside box: {fraction:.1%} "
          f"({len(coords)} patches)")
    return 0 if fraction == 1.0 else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="fmseg-extract", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    exp = sub.add_parser("export")
    exp.add_argument("--images", required=True)
    exp.add_argument("--classes", required=True)
    exp.add_argument("--out", required=True)
    exp.add_argument("--device", default="cpu")
    exp.add_argument("--gt-dir", default=None)
    exp.add_argument("--labels", default=None, help="JSON {image_id: [class ids]}")
    exp.add_argument("--split", default="train", choices=["train", "eval"])
    exp.add_argument("--oversample", type=int, default=1344)
    exp.add_argument("--crop-grid", default="4x4")
    exp.add_argument("--mask-space", type=int, default=518)
    exp.add_argument("--points-per-side", type=int, default=16)
    exp.add_argument("--tiny-random-models", type=int, default=None, metavar="SEED")
    exp.set_defaults(handler=cmd_export)

    ver = sub.add_parser("verify-alignment")
    ver.add_argument("--dataset", required=True)
    ver.add_argument("--image-id", required=True)
    ver.add_argument("--class-id", type=int, required=True)
    ver.add_argument("--box", required=True, help="r0,c0,r1,c1 in [0,1]")
    ver.add_argument("--top-fraction", type=float, default=0.01)
    ver.set_defaults(handler=cmd_verify_alignment)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
