"""Command-line entry point orchestrating the pipeline from a config file.

    fmseg <synth|stage1|train|infer|eval|pipeline> --config cfg.toml
          [--seed N] [--threads N] [--refined]

Exit codes: 1 invalid config, 2 missing/invalid inputs, 3 numeric failure.
All randomness flows from one root seed; every run writes a manifest with
the config hash and seed, and identical config+seed runs produce byte-
identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import align, events, exchange, infer, stage1, synthworld
from .align.training import NumericError
from .config import ConfigError, PipelineConfig, load_config
from .exchange import FormatError, MissingInputError, ValidationError
from .numerics import derive_seed, seeded_rng


def _write_run_manifest(cfg: PipelineConfig, command: str) -> None:
    doc = {"command": command, "config_sha256": cfg.config_hash, "seed": cfg.seed}
    path = cfg.output_dir / f"run_{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_records(cfg: PipelineConfig, split: str):
    manifest = exchange.load_manifest(cfg.dataset_root)
    vocab = exchange.load_vocabulary(cfg.dataset_root)
    ids = [rec.image_id for rec in manifest.values() if rec.split == split]
    if not ids:
        raise MissingInputError(f"dataset has no images with split={split!r}")
    return manifest, vocab, ids


def cmd_synth(cfg: PipelineConfig, threads: int = 1) -> None:
    if cfg.backend != "synthetic":
        raise ConfigError("synth requires backend.kind = 'synthetic'")
    syn = cfg.synthetic
    world = synthworld.generate_world(
        syn.classes, syn.text_dim, syn.vision_dim, syn.sigma, cfg.seed
    )
    scenes = []
    rng = seeded_rng(derive_seed(cfg.seed, "scene-layouts"))
    for split, count in (("train", syn.train_scenes), ("eval", syn.eval_scenes)):
        for i in range(count):
            scene = synthworld.random_halves_scene(
                f"{split}_{i:04d}", syn.classes, syn.canvas, rng
            )
            scenes.append((scene, split))
    synthworld.export_dataset(world, cfg.dataset_root, scenes,
                              syn.crop_grid, syn.patches_per_crop,
                              query_point_count=cfg.detection.query_point_count)
    _write_run_manifest(cfg, "synth")
    events.emit("info", "synth-complete", images=len(scenes))


def _stage1_one(cfg, manifest, vocab, image_id):
    bundle = exchange.load_image_record(cfg.dataset_root, manifest, image_id,
                                        num_classes=vocab.num_classes)
    return stage1.process_image(bundle, vocab, cfg.detection)


def cmd_stage1(cfg: PipelineConfig, threads: int = 1) -> None:
    manifest, vocab, ids = _load_records(cfg, "train")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda i: _stage1_one(cfg, manifest, vocab, i), ids))
    else:
        results = [_stage1_one(cfg, manifest, vocab, i) for i in ids]
    set11 = [ann for r in results for ann in r[0]]
    set12 = [ann for r in results for ann in r[1]]
    fused = stage1.fuse_and_balance(set11, set12, cfg.detection)

    ann_dir = cfg.output_dir / "annotations"
    exchange.write_annotation_set(ann_dir / "stage11.json", set11, vocab.num_classes)
    exchange.write_annotation_set(ann_dir / "stage12.json", set12, vocab.num_classes)
    exchange.write_annotation_set(ann_dir / "stage1.json", fused, vocab.num_classes)
    _write_run_manifest(cfg, "stage1")
    events.emit("info", "stage1-complete", stage11=len(set11), stage12=len(set12),
                fused=len(fused))


def cmd_train(cfg: PipelineConfig, threads: int = 1) -> None:
    manifest, vocab, ids = _load_records(cfg, "train")
    annotations, _ = exchange.read_annotation_set(
        cfg.output_dir / "annotations" / "stage1.json"
    )
    by_image: dict[str, list] = {}
    for ann in annotations:
        by_image.setdefault(ann.image_id, []).append(ann)

    dataset = []
    for image_id in ids:
        anns = by_image.get(image_id)
        if not anns:
            continue
        bundle = exchange.load_image_record(cfg.dataset_root, manifest, image_id,
                                            num_classes=vocab.num_classes)
        if bundle.vision_features is None:
            raise ValidationError(f"{image_id}: record has no vision features to train on")
        grid = bundle.vision_features
        labels = align.assign_patch_labels(anns, grid.shape[:2], bundle.pixel_size)
        dataset.append((grid, labels))
    head, log = align.train(dataset, vocab.prototypes, cfg.head, cfg.train)

    ckpt = cfg.output_dir / "checkpoint"
    align.save_head(ckpt, head, step_count=len(log))
    with open(ckpt / "train_log.jsonl", "w", encoding="utf-8") as f:
        for entry in log:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    _write_run_manifest(cfg, "train")
    events.emit("info", "train-complete", steps=len(log),
                final_loss=log[-1]["loss"] if log else None)


def cmd_infer(cfg: PipelineConfig, threads: int = 1, refined: bool | None = None) -> None:
    manifest, vocab, ids = _load_records(cfg, "eval")
    head = align.load_head(cfg.output_dir / "checkpoint")
    use_refined = cfg.eval.refined if refined is None else refined
    pred_dir = cfg.output_dir / "predictions"

    def run_one(image_id):
        bundle = exchange.load_image_record(cfg.dataset_root, manifest, image_id,
                                            num_classes=vocab.num_classes)
        if bundle.vision_features is None:
            raise ValidationError(f"{image_id}: record has no vision features")
        sims, patch_argmax = infer.classify_patches(head, bundle.vision_features,
                                                    vocab.prototypes)
        h, w = bundle.pixel_size
        pred = infer.base_segmentation(sims, h, w)
        if use_refined:
            pred = infer.refined_segmentation(pred, bundle.auto_masks, patch_argmax)
        return image_id, pred.astype(np.int32)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(run_one, ids))
    else:
        outputs = [run_one(i) for i in ids]
    for image_id, pred in outputs:
        exchange.write_tensor(pred_dir / f"{image_id}.fmsg", pred)
    _write_run_manifest(cfg, "infer")
    events.emit("info", "infer-complete", images=len(outputs), refined=use_refined)


def cmd_eval(cfg: PipelineConfig, threads: int = 1) -> None:
    manifest, vocab, ids = _load_records(cfg, "eval")
    protocol = infer.EvalProtocol(
        num_classes=vocab.num_classes,
        background_remap=frozenset(cfg.eval.background_remap),
        background_id=cfg.eval.background_id,
    )
    acc = infer.ConfusionAccumulator(protocol)
    for image_id in ids:
        bundle = exchange.load_image_record(cfg.dataset_root, manifest, image_id,
                                            num_classes=vocab.num_classes)
        if bundle.ground_truth is None:
            raise MissingInputError(f"{image_id}: record has no ground truth")
        pred_path = cfg.output_dir / "predictions" / f"{image_id}.fmsg"
        if not pred_path.exists():
            raise MissingInputError(f"missing prediction map: {pred_path}")
        code, _, pred = exchange.read_tensor(pred_path)
        pred = infer.remap_background(pred.astype(np.int64), protocol)
        acc.add(pred, bundle.ground_truth)
    iou, mean_iou = acc.result()
    report = {
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        "miou": mean_iou,
        "pixel_count": acc.pixel_count,
    }
    path = cfg.output_dir / "report.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_run_manifest(cfg, "eval")
    events.emit("info", "eval-complete", miou=mean_iou)


def cmd_pipeline(cfg: PipelineConfig, threads: int = 1, refined: bool | None = None) -> None:
    if cfg.backend == "synthetic":
        cmd_synth(cfg, threads)
    cmd_stage1(cfg, threads)
    cmd_train(cfg, threads)
    cmd_infer(cfg, threads, refined)
    cmd_eval(cfg, threads)
    _write_run_manifest(cfg, "pipeline")


_COMMANDS = {
    "synth": cmd_synth,
    "stage1": cmd_stage1,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML pipeline config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1)
        if name in ("infer", "pipeline"):
            p.add_argument("--refined", action="store_true", default=None,
                           help="overlay automatic masks on the base segmentation")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        handler = _COMMANDS[args.command]
        kwargs = {"threads": args.threads}
        if args.command in ("infer", "pipeline"):
            kwargs["refined"] = args.refined
        handler(cfg, **kwargs)
    except ConfigError as exc:
        events.emit("error", "invalid-config", message=str(exc))
        return 1
    except (MissingInputError, FileNotFoundError, ValidationError, FormatError) as exc:
        events.emit("error", "bad-input", message=str(exc))
        return 2
    except NumericError as exc:
        events.emit("error", "numeric-failure", message=str(exc))
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
