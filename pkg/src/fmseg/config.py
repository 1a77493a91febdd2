"""Pipeline configuration: TOML file, schema-validated, unknown keys rejected."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .align.heads import HeadConfig
from .align.training import TrainConfig
from .stage1 import DetectionConfig


class ConfigError(ValueError):
    """The config file is missing, malformed, or violates the schema."""


@dataclass
class SyntheticConfig:
    classes: int = 4
    text_dim: int = 16
    vision_dim: int = 16
    sigma: float = 0.0
    train_scenes: int = 20
    eval_scenes: int = 5
    canvas: int = 64
    crop_grid: tuple[int, int] = (2, 2)
    patches_per_crop: int = 8

    @property
    def patch_grid(self) -> tuple[int, int]:
        return (self.crop_grid[0] * self.patches_per_crop,
                self.crop_grid[1] * self.patches_per_crop)


@dataclass
class EvalConfig:
    refined: bool = True
    background_remap: list[int] = field(default_factory=list)
    background_id: int = 0


@dataclass
class PipelineConfig:
    dataset_root: Path
    output_dir: Path
    backend: str  # "synthetic" | "files"
    seed: int = 0
    synthetic: SyntheticConfig | None = None
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    config_hash: str = ""


def _take(table: dict, section: str, fields: dict):
    """Pop known keys with defaults; reject anything left over."""
    out = {}
    for key, default in fields.items():
        out[key] = table.pop(key, default)
    if table:
        raise ConfigError(f"[{section}]: unknown keys {sorted(table)}")
    return out


def load_config(path, seed_override: int | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw_bytes = path.read_bytes()
    try:
        doc = tomllib.loads(raw_bytes.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    try:
        return _parse(doc, raw_bytes, path.parent, seed_override)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse(doc: dict, raw_bytes: bytes, base_dir: Path,
           seed_override: int | None) -> PipelineConfig:
    top = _take(dict(doc), "top level", {
        "seed": 0, "paths": None, "backend": None, "detection": {},
        "train": {}, "head": {}, "eval": {},
    })
    if top["paths"] is None:
        raise ConfigError("missing [paths] section")
    paths = _take(dict(top["paths"]), "paths", {"dataset_root": None, "output_dir": None})
    if paths["dataset_root"] is None or paths["output_dir"] is None:
        raise ConfigError("[paths] requires dataset_root and output_dir")

    if top["backend"] is None:
        raise ConfigError("missing [backend] section")
    backend_table = dict(top["backend"])
    backend = _take(backend_table, "backend", {"kind": None, "synthetic": {}})
    kind = backend["kind"]
    if kind not in ("synthetic", "files"):
        raise ConfigError(f"backend.kind must be 'synthetic' or 'files', got {kind!r}")

    synthetic = None
    if kind == "synthetic":
        syn = _take(dict(backend["synthetic"]), "backend.synthetic", {
            "classes": 4, "text_dim": 16, "vision_dim": 16, "sigma": 0.0,
            "train_scenes": 20, "eval_scenes": 5, "canvas": 64,
            "crop_grid": [2, 2], "patches_per_crop": 8,
        })
        syn["crop_grid"] = tuple(int(x) for x in syn["crop_grid"])
        synthetic = SyntheticConfig(**syn)
        if synthetic.canvas % synthetic.patch_grid[0] or synthetic.canvas % synthetic.patch_grid[1]:
            raise ConfigError(
                f"canvas {synthetic.canvas} not divisible by patch grid {synthetic.patch_grid}"
            )
    elif backend["synthetic"]:
        raise ConfigError("[backend.synthetic] given but backend.kind is 'files'")

    det_table = dict(top["detection"])
    det_defaults = {
        "crop_vote_threshold": 1, "strict_vote_threshold": True,
        "semi_supervised": False, "query_point_count": 5,
        "patch_px": None, "mask_space": None,
        "auto_mask_confidence": 0.97, "auto_mask_min_area": 0.001,
        "balance_ratio": 0.75,
    }
    det = _take(det_table, "detection", det_defaults)
    if det["patch_px"] is None:
        # synthetic geometry implies the patch size; real exports use ViT-L/14
        det["patch_px"] = (synthetic.canvas // synthetic.patch_grid[0]) if synthetic else 14
    if det["mask_space"] is None:
        det["mask_space"] = synthetic.canvas if synthetic else 518

    seed = int(top["seed"]) if seed_override is None else int(seed_override)
    detection = DetectionConfig(seed=seed, **det)

    train_table = _take(dict(top["train"]), "train", {
        "epochs": 10, "batch_size": 5, "lr0": 0.1, "momentum": 0.0,
        "loss": "tsupcon", "temperature": 1.0,
    })
    train = TrainConfig(seed=seed, **train_table)

    head_table = _take(dict(top["head"]), "head", {
        "variant": "linear", "hidden": 64, "attention_heads": 4,
    })
    head = HeadConfig(**head_table)

    eval_table = _take(dict(top["eval"]), "eval", {
        "refined": True, "background_remap": [], "background_id": 0,
    })
    eval_cfg = EvalConfig(
        refined=bool(eval_table["refined"]),
        background_remap=[int(x) for x in eval_table["background_remap"]],
        background_id=int(eval_table["background_id"]),
    )

    digest = hashlib.sha256(raw_bytes).hexdigest()
    return PipelineConfig(
        dataset_root=(base_dir / paths["dataset_root"]).resolve(),
        output_dir=(base_dir / paths["output_dir"]).resolve(),
        backend=kind,
        seed=seed,
        synthetic=synthetic,
        detection=detection,
        train=train,
        head=head,
        eval=eval_cfg,
        config_hash=digest,
    )
