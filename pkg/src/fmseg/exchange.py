"""Bit-exact interchange between feature/mask backends and the pipeline.

A dataset lives under one root directory:

    root/
      manifest.json   per-image records (paths relative to root)
      vocab.json      class names + prototype tensor + template
      tensors/        feature tensors (f32)
      masks/          pixel masks (u8), ground truth (i32)
      annotations/    pseudo-annotation sets produced by stage 1

Tensor container: magic "FMSG", version u16, dtype u8 (0=f32, 1=i32,
2=u8), rank u8, dims rank*u32, then the row-major little-endian payload.
Float payloads are stored as f32 and widened to f64 on load. Loaders
reject rather than repair: any shape or value violation raises.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import l2_normalize_rows

MAGIC = b"FMSG"
VERSION = 1
DTYPE_F32, DTYPE_I32, DTYPE_U8 = 0, 1, 2

_DTYPE_TO_NP = {DTYPE_F32: np.dtype("<f4"), DTYPE_I32: np.dtype("<i4"), DTYPE_U8: np.dtype("u1")}


class FormatError(ValueError):
    """Malformed binary tensor file; message carries the byte offset."""


class ValidationError(ValueError):
    """Well-formed file whose contents violate a schema invariant."""


class MissingInputError(FileNotFoundError):
    """A manifest references a file that does not exist."""


def _storage_dtype(arr: np.ndarray) -> int:
    kind = arr.dtype.kind
    if kind == "f":
        return DTYPE_F32
    if kind == "u" and arr.dtype.itemsize == 1:
        return DTYPE_U8
    if kind in "iu":
        return DTYPE_I32
    if kind == "b":
        return DTYPE_U8
    raise ValueError(f"unsupported tensor dtype {arr.dtype}")


def write_tensor(path, arr: np.ndarray) -> None:
    """Write ``arr`` as an FMSG container (floats stored as f32)."""
    arr = np.ascontiguousarray(arr)
    if arr.size == 0 or 0 in arr.shape:
        raise ValueError("refusing to write tensor with a zero dimension")
    code = _storage_dtype(arr)
    payload = arr.astype(_DTYPE_TO_NP[code]).tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HBB", VERSION, code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(payload)


def read_tensor(path):
    """Read an FMSG container; returns (dtype_code, dims, array).

    The array is returned in the storage dtype; use :func:`read_tensor_f64`
    for the widened float view.
    """
    data = Path(path).read_bytes()

    def need(n: int, offset: int, what: str):
        if len(data) < offset + n:
            raise FormatError(
                f"{path}: truncated {what} at byte offset {offset}"
                f" (need {n} bytes, file has {len(data) - offset})"
            )

    need(4, 0, "magic")
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0")
    need(4, 4, "header")
    version, code, rank = struct.unpack_from("<HBB", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    if code not in _DTYPE_TO_NP:
        raise FormatError(f"{path}: unknown dtype code {code} at byte offset 6")
    need(4 * rank, 8, "dims")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    if any(d == 0 for d in dims):
        raise FormatError(f"{path}: zero dimension at byte offset 8")
    payload_off = 8 + 4 * rank
    np_dtype = _DTYPE_TO_NP[code]
    expected = int(np.prod(dims)) * np_dtype.itemsize
    need(expected, payload_off, "payload")
    if len(data) != payload_off + expected:
        raise FormatError(
            f"{path}: {len(data) - payload_off - expected} trailing bytes"
            f" at byte offset {payload_off + expected}"
        )
    arr = np.frombuffer(data, dtype=np_dtype, offset=payload_off).reshape(dims)
    return code, dims, arr


def read_tensor_f64(path) -> np.ndarray:
    """Read a float tensor, widened to f64."""
    code, _, arr = read_tensor(path)
    if code != DTYPE_F32:
        raise ValidationError(f"{path}: expected f32 tensor, found dtype code {code}")
    return arr.astype(np.float64)


# ---------------------------------------------------------------------------
# Vocabulary

@dataclass
class TextPrototypeSet:
    """Frozen text prototypes: one unit-norm anchor vector per class."""

    class_names: list[str]
    prototypes: np.ndarray  # K x D, f64, unit rows
    template: str

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def write_vocabulary(root, vocab: TextPrototypeSet, tensor_relpath="tensors/prototypes.fmsg"):
    root = Path(root)
    write_tensor(root / tensor_relpath, vocab.prototypes)
    doc = {
        "class_names": list(vocab.class_names),
        "prototypes": tensor_relpath,
        "template": vocab.template,
    }
    _write_json(root / "vocab.json", doc)


def load_vocabulary(root) -> TextPrototypeSet:
    root = Path(root)
    doc = _read_json(root / "vocab.json")
    names = doc["class_names"]
    if len(set(names)) != len(names):
        raise ValidationError("vocab.json: class names are not unique")
    protos = read_tensor_f64(root / doc["prototypes"])
    if protos.ndim != 2 or protos.shape[0] != len(names):
        raise ValidationError(
            f"vocab.json: prototype tensor is {protos.shape}, expected {len(names)} rows"
        )
    return TextPrototypeSet(list(names), _renormalized(protos, "prototypes"), str(doc["template"]))


# ---------------------------------------------------------------------------
# Masks and annotations

@dataclass
class MaskProposal:
    """Binary pixel mask with a confidence score (predicted or true IoU)."""

    mask: np.ndarray  # H x W, u8 in {0, 1}
    confidence: float
    class_id: int | None = None


@dataclass
class PseudoAnnotation:
    """One (mask, class) training record generated by stage 1."""

    image_id: str
    class_id: int
    mask: np.ndarray  # H x W, u8 in {0, 1}
    confidence: float
    stage: str  # "1.1" or "1.2"


def write_annotation_set(json_path, annotations: list[PseudoAnnotation], num_classes: int):
    """Write an annotation set: a JSON index plus one u8 mask file each."""
    json_path = Path(json_path)
    mask_dir = json_path.parent / (json_path.stem + "_masks")
    entries = []
    for i, ann in enumerate(annotations):
        if not 0 <= ann.class_id < num_classes:
            raise ValidationError(f"annotation {i}: class_id {ann.class_id} >= {num_classes}")
        rel = f"{json_path.stem}_masks/ann_{i:05d}.fmsg"
        write_tensor(json_path.parent / rel, np.asarray(ann.mask, dtype=np.uint8))
        entries.append(
            {
                "image_id": ann.image_id,
                "class_id": int(ann.class_id),
                "mask": rel,
                "confidence": float(ann.confidence),
                "stage": ann.stage,
            }
        )
    mask_dir.mkdir(parents=True, exist_ok=True)
    _write_json(json_path, {"num_classes": int(num_classes), "annotations": entries})


def read_annotation_set(json_path) -> tuple[list[PseudoAnnotation], int]:
    json_path = Path(json_path)
    doc = _read_json(json_path)
    num_classes = int(doc["num_classes"])
    out = []
    for i, entry in enumerate(doc["annotations"]):
        class_id = int(entry["class_id"])
        conf = float(entry["confidence"])
        stage = entry["stage"]
        if not 0 <= class_id < num_classes:
            raise ValidationError(f"{json_path}: annotation {i} class_id {class_id} >= {num_classes}")
        if not 0.0 <= conf <= 1.0:
            raise ValidationError(f"{json_path}: annotation {i} confidence {conf} outside [0, 1]")
        if stage not in ("1.1", "1.2"):
            raise ValidationError(f"{json_path}: annotation {i} unknown stage {stage!r}")
        mask = _load_binary_mask(json_path.parent / entry["mask"])
        out.append(PseudoAnnotation(str(entry["image_id"]), class_id, mask, conf, stage))
    return out, num_classes


def _load_binary_mask(path) -> np.ndarray:
    code, dims, arr = read_tensor(path)
    if code != DTYPE_U8 or len(dims) != 2:
        raise ValidationError(f"{path}: masks must be 2D u8 tensors")
    if not np.isin(arr, (0, 1)).all():
        bad = arr[~np.isin(arr, (0, 1))][0]
        raise ValidationError(f"{path}: mask contains value {bad}, expected 0/1")
    return arr


# ---------------------------------------------------------------------------
# Image records

@dataclass
class ImageRecord:
    """Manifest entry: geometry plus paths (relative to the dataset root)."""

    image_id: str
    pixel_size: tuple[int, int]
    crop_grid: tuple[int, int]
    patch_grid: tuple[int, int]
    crop_features: list[dict]  # {"row", "col", "path"}
    cls_tokens: str
    split: str = "train"
    feature_grid: str | None = None
    vision_features: str | None = None
    point_mask_sets: list[dict] | None = None  # {"class_id", "points", "masks", "confidences"}
    auto_masks: list[dict] | None = None  # {"path", "confidence"}
    ground_truth: str | None = None
    image_level_labels: list[int] | None = None


@dataclass
class PointMaskSet:
    """Recorded mask-oracle response for one class's query points."""

    class_id: int
    points: np.ndarray  # k x 2 (row, col)
    masks: list[np.ndarray]
    confidences: list[float]


@dataclass
class ImageBundle:
    """An ImageRecord with every referenced tensor loaded and validated."""

    image_id: str
    pixel_size: tuple[int, int]
    crop_grid: tuple[int, int]
    patch_grid: tuple[int, int]
    split: str
    crop_features: list[tuple[int, int, np.ndarray]]
    cls_tokens: np.ndarray
    feature_grid: np.ndarray | None = None
    vision_features: np.ndarray | None = None
    point_mask_sets: list[PointMaskSet] = field(default_factory=list)
    auto_masks: list[MaskProposal] = field(default_factory=list)
    ground_truth: np.ndarray | None = None
    image_level_labels: list[int] | None = None


_RECORD_KEYS = {
    "image_id", "split", "pixel_size", "crop_grid", "patch_grid", "crop_features",
    "cls_tokens", "feature_grid", "vision_features", "point_mask_sets", "auto_masks",
    "ground_truth", "image_level_labels",
}


def write_manifest(root, records: list[ImageRecord]) -> None:
    images = []
    for rec in records:
        entry = {
            "image_id": rec.image_id,
            "split": rec.split,
            "pixel_size": list(rec.pixel_size),
            "crop_grid": list(rec.crop_grid),
            "patch_grid": list(rec.patch_grid),
            "crop_features": rec.crop_features,
            "cls_tokens": rec.cls_tokens,
            "feature_grid": rec.feature_grid,
            "vision_features": rec.vision_features,
            "point_mask_sets": rec.point_mask_sets,
            "auto_masks": rec.auto_masks,
            "ground_truth": rec.ground_truth,
            "image_level_labels": rec.image_level_labels,
        }
        images.append(entry)
    _write_json(Path(root) / "manifest.json", {"images": images})


def load_manifest(root) -> dict[str, ImageRecord]:
    """Parse manifest.json into records, keyed by image id (insertion order)."""
    doc = _read_json(Path(root) / "manifest.json")
    records: dict[str, ImageRecord] = {}
    for i, entry in enumerate(doc["images"]):
        unknown = set(entry) - _RECORD_KEYS
        if unknown:
            raise ValidationError(f"manifest image {i}: unknown keys {sorted(unknown)}")
        rec = ImageRecord(
            image_id=str(entry["image_id"]),
            pixel_size=tuple(entry["pixel_size"]),
            crop_grid=tuple(entry["crop_grid"]),
            patch_grid=tuple(entry["patch_grid"]),
            crop_features=entry["crop_features"],
            cls_tokens=entry["cls_tokens"],
            split=entry.get("split", "train"),
            feature_grid=entry.get("feature_grid"),
            vision_features=entry.get("vision_features"),
            point_mask_sets=entry.get("point_mask_sets"),
            auto_masks=entry.get("auto_masks"),
            ground_truth=entry.get("ground_truth"),
            image_level_labels=entry.get("image_level_labels"),
        )
        if rec.image_id in records:
            raise ValidationError(f"manifest: duplicate image_id {rec.image_id!r}")
        records[rec.image_id] = rec
    return records


def _renormalized(rows: np.ndarray, what: str, tol: float = 1e-3) -> np.ndarray:
    # f32 storage perturbs unit norms by ~1e-6; verify the file is sane,
    # then restore exact unit norm in f64 so downstream invariants hold.
    norms = np.linalg.norm(rows, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= tol):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValidationError(f"{what}: rows are not unit norm (worst deviation {worst:.2e})")
    return l2_normalize_rows(rows)


def load_image_record(root, manifest: dict[str, ImageRecord], image_id: str,
                      num_classes: int | None = None) -> ImageBundle:
    """Load one record's tensors, checking every declared shape invariant.

    All violations are collected and reported together, field by field.
    """
    root = Path(root)
    if image_id not in manifest:
        raise MissingInputError(f"image_id {image_id!r} not in manifest")
    rec = manifest[image_id]
    errors: list[str] = []

    def load(relpath, loader):
        p = root / relpath
        if not p.exists():
            raise MissingInputError(f"{image_id}: referenced file missing: {relpath}")
        return loader(p)

    rows, cols = rec.crop_grid
    hp, wp = rec.patch_grid
    crops: list[tuple[int, int, np.ndarray]] = []
    seen = set()
    for spec in rec.crop_features:
        r, c, arr = int(spec["row"]), int(spec["col"]), load(spec["path"], read_tensor_f64)
        if arr.ndim != 3:
            errors.append(f"crop_features[{r},{c}]: expected 3D tensor, got {arr.shape}")
            continue
        crops.append((r, c, arr))
        seen.add((r, c))
    if seen != {(r, c) for r in range(rows) for c in range(cols)}:
        errors.append(f"crop_features: incomplete {rows}x{cols} grid (have {sorted(seen)})")
    if crops:
        shapes = {arr.shape for _, _, arr in crops}
        if len(shapes) > 1:
            errors.append(f"crop_features: inconsistent crop shapes {sorted(shapes)}")
        else:
            ch, cw, _ = crops[0][2].shape
            if (hp, wp) != (rows * ch, cols * cw):
                errors.append(
                    f"patch_grid: declared {hp}x{wp}, crops imply {rows * ch}x{cols * cw}"
                )

    cls_tokens = load(rec.cls_tokens, read_tensor_f64)
    if cls_tokens.ndim != 2 or cls_tokens.shape[0] != rows * cols:
        errors.append(f"cls_tokens: expected {rows * cols} rows, got shape {cls_tokens.shape}")

    feature_grid = None
    if rec.feature_grid is not None:
        feature_grid = load(rec.feature_grid, read_tensor_f64)
        if feature_grid.shape[:2] != (hp, wp):
            errors.append(f"feature_grid: expected {hp}x{wp} grid, got {feature_grid.shape}")

    vision = None
    if rec.vision_features is not None:
        vision = load(rec.vision_features, read_tensor_f64)
        if vision.ndim != 3:
            errors.append(f"vision_features: expected 3D tensor, got {vision.shape}")

    h, w = rec.pixel_size
    point_sets: list[PointMaskSet] = []
    for spec in rec.point_mask_sets or []:
        cid = int(spec["class_id"])
        if num_classes is not None and not 0 <= cid < num_classes:
            errors.append(f"point_mask_sets: unknown class id {cid}")
        masks = [load(p, _load_binary_mask) for p in spec["masks"]]
        for m in masks:
            if m.shape != (h, w):
                errors.append(f"point_mask_sets[class {cid}]: mask shape {m.shape} != {(h, w)}")
        point_sets.append(
            PointMaskSet(cid, np.asarray(spec["points"], dtype=np.int64),
                         masks, [float(x) for x in spec["confidences"]])
        )

    autos: list[MaskProposal] = []
    for spec in rec.auto_masks or []:
        m = load(spec["path"], _load_binary_mask)
        if m.shape != (h, w):
            errors.append(f"auto_masks: mask shape {m.shape} != {(h, w)}")
        autos.append(MaskProposal(m, float(spec["confidence"])))

    gt = None
    if rec.ground_truth is not None:
        code, dims, arr = load(rec.ground_truth, read_tensor)
        if code != DTYPE_I32 or tuple(dims) != (h, w):
            errors.append(f"ground_truth: expected i32 {h}x{w}, got code {code} dims {dims}")
        else:
            gt = arr.astype(np.int64)

    labels = None
    if rec.image_level_labels is not None:
        labels = [int(x) for x in rec.image_level_labels]
        if num_classes is not None:
            for x in labels:
                if not 0 <= x < num_classes:
                    errors.append(f"image_level_labels: unknown class id {x}")

    if errors:
        raise ValidationError(f"{image_id}: " + "; ".join(errors))

    # Feature rows sane-check then exact renormalization (f32 widening).
    crops = [(r, c, _renormalized(arr, f"{image_id} crop ({r},{c})")) for r, c, arr in crops]
    cls_tokens = _renormalized(cls_tokens, f"{image_id} cls_tokens")
    if feature_grid is not None:
        feature_grid = _renormalized(feature_grid, f"{image_id} feature_grid")
    if vision is not None:
        vision = _renormalized(vision, f"{image_id} vision_features")

    return ImageBundle(
        image_id=image_id,
        pixel_size=(h, w),
        crop_grid=(rows, cols),
        patch_grid=(hp, wp),
        split=rec.split,
        crop_features=crops,
        cls_tokens=cls_tokens,
        feature_grid=feature_grid,
        vision_features=vision,
        point_mask_sets=point_sets,
        auto_masks=autos,
        ground_truth=gt,
        image_level_labels=labels,
    )


# ---------------------------------------------------------------------------
# JSON helpers (deterministic bytes: sorted keys, no whitespace drift)

def _write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"missing file: {path}")
    with open(path, encoding="utf-8") as f:
        return json.load(f)
