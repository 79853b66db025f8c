"""JSON tensor checkpoints with bit-exact float round-tripping.

Every float is written with 17 significant digits, which uniquely identifies a
double, so save -> load -> save reproduces the file byte for byte (given the
same creation stamp) and load(save(x)) equals x bitwise.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import MissingArtifact, NumericalError, ShapeError

FORMAT_VERSION = 1


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_checkpoint(
    path,
    tensors: dict[str, np.ndarray],
    config_hash: str,
    metadata: dict | None = None,
    created: str = "1970-01-01T00:00:00Z",
) -> None:
    """Write the tensor envelope; `created` is caller-supplied so rewrites can reproduce it."""
    meta = dict(metadata or {})
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"tensor {name!r} contains non-finite values")
    parts = ["{"]
    parts.append(f'"format_version": {FORMAT_VERSION}, ')
    parts.append(f'"created": {json.dumps(created)}, ')
    parts.append(f'"config_hash": {json.dumps(config_hash)}, ')
    parts.append(f'"metadata": {json.dumps(meta, sort_keys=True)}, ')
    parts.append('"tensors": {')
    names = sorted(tensors.keys())
    for k, name in enumerate(names):
        a = np.asarray(tensors[name], dtype=np.float64)
        data = ", ".join(_fmt(v) for v in a.ravel())
        shape = json.dumps(list(a.shape))
        parts.append(f'{json.dumps(name)}: {{"shape": {shape}, "data": [{data}]}}')
        if k < len(names) - 1:
            parts.append(", ")
    parts.append("}}")
    text = "".join(parts) + "\n"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return (tensors, header) where header holds created/config_hash/metadata."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"checkpoint not found: {path}")
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ShapeError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    tensors = {}
    for name, entry in doc["tensors"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        tensors[name] = arr
    header = {
        "created": doc.get("created"),
        "config_hash": doc.get("config_hash"),
        "metadata": doc.get("metadata", {}),
    }
    return tensors, header


def checkpoint_exists(path) -> bool:
    return os.path.exists(path)
