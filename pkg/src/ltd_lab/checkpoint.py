"""Parameter checkpoints: one flat binary of raw array bytes plus a JSON
manifest recording name, shape, dtype, and byte offset for each entry.
Reload is bit-exact."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray]):
    """Write `arrays` to <path>.bin with the manifest at <path>.json."""
    path = Path(path)
    entries = {}
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as f:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr).tobytes()
            f.write(raw)
            entries[name] = {"shape": list(arr.shape),
                             "dtype": str(arr.dtype),
                             "offset": offset}
            offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION,
                "total_bytes": offset,
                "arrays": entries}
    with open(path.with_suffix(".json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read back a checkpoint written by save_arrays, bit-exactly."""
    path = Path(path)
    with open(path.with_suffix(".json")) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: "
                         f"{manifest.get('format_version')}")
    blob = Path(path.with_suffix(".bin")).read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise ValueError(f"checkpoint blob is {len(blob)} bytes, manifest "
                         f"says {manifest['total_bytes']}")
    out = {}
    for name, meta in manifest["arrays"].items():
        dtype = np.dtype(meta["dtype"])
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=dtype, count=count,
                            offset=meta["offset"]).reshape(shape)
        out[name] = arr.copy()
    return out
