"""Minimal writer (and reader) for the exchange dataset layout.

Deliberately independent of the pipeline package: the file formats are
the contract. Container: magic "FMSG", version u16=1, dtype u8 (0=f32,
1=i32, 2=u8), rank u8, dims rank*u32, row-major little-endian payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FMSG"
VERSION = 1
_CODES = {"f": 0, "i": 1, "u": 2}
_NP_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("u1")}


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    kind = arr.dtype.kind
    if kind == "f":
        code = 0
    elif kind in "iu" and arr.dtype.itemsize == 1:
        code = 2
    elif kind in "iu":
        code = 1
    else:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HBB", VERSION, code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype(_NP_DTYPES[code]).tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an FMSG tensor")
    version, code, rank = struct.unpack_from("<HBB", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    return np.frombuffer(data, dtype=_NP_DTYPES[code], offset=8 + 4 * rank).reshape(dims)


def write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_vocabulary(root, class_names, prototypes: np.ndarray, template: str) -> None:
    root = Path(root)
    rel = "tensors/prototypes.fmsg"
    write_tensor(root / rel, prototypes.astype(np.float32))
    write_json(root / "vocab.json", {
        "class_names": list(class_names),
        "prototypes": rel,
        "template": template,
    })


def write_manifest(root, records: list[dict]) -> None:
    write_json(Path(root) / "manifest.json", {"images": records})
