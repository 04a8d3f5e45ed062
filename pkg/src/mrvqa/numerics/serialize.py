"""Tensor blob serialization: raw little-endian values + JSON sidecar.

Layout: ``<base>.bin`` holds each tensor's row-major bytes back to back;
``<base>.json`` lists ``{name, shape, offset, dtype}`` per tensor (offsets in
bytes) plus any caller-supplied metadata sections. Checkpoints and pretrained
image-embedding files share this format.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

_DTYPE_TAGS = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class SerializationError(Exception):
    pass


def save_tensors(base: str | Path, tensors: Mapping[str, np.ndarray], extra: dict | None = None) -> tuple[Path, Path]:
    """Write tensors and return (sidecar_path, blob_path)."""
    base = Path(base)
    entries = []
    offset = 0
    blob_parts = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float32:
            tag = "<f4"
        elif arr.dtype == np.float64:
            tag = "<f8"
        else:
            raise SerializationError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": tag})
        blob_parts.append(raw)
        offset += len(raw)

    manifest = dict(extra or {})
    manifest["tensors"] = entries
    json_path = base.with_suffix(".json")
    bin_path = base.with_suffix(".bin")
    json_path.write_text(json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")
    bin_path.write_bytes(b"".join(blob_parts))
    return json_path, bin_path


def load_tensors(base: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read tensors back; returns ({name: array}, manifest)."""
    base = Path(base)
    json_path = base.with_suffix(".json")
    bin_path = base.with_suffix(".bin")
    if not json_path.exists() or not bin_path.exists():
        raise SerializationError(f"missing tensor files {json_path} / {bin_path}")
    manifest = json.loads(json_path.read_text())
    blob = bin_path.read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        dtype = _DTYPE_TAGS.get(entry["dtype"])
        if dtype is None:
            raise SerializationError(f"unsupported dtype tag {entry['dtype']!r} for {entry['name']!r}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise SerializationError(f"tensor {entry['name']!r} overruns blob ({end} > {len(blob)})")
        arr = np.frombuffer(blob[start:end], dtype=dtype).reshape(shape).copy()
        tensors[entry["name"]] = arr
    return tensors, manifest
