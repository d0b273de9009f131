"""Run-directory plumbing: config hashes, manifests, CSV/JSON writers.

Every artifact-producing command writes one manifest.json next to its
outputs.  Data files are written with full-precision repr floats so a
re-run with the same config is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, is_dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import __version__


def jsonable(obj):
    """Best-effort conversion of configs to plain JSON values."""
    if is_dataclass(obj) and not isinstance(obj, type):
        return jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in sorted(obj.items(),
                                                       key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple, set, frozenset)):
        items = [jsonable(v) for v in obj]
        return sorted(items, key=repr) if isinstance(obj, (set, frozenset)) \
            else items
    if hasattr(obj, "value"):  # enums
        return obj.value
    if hasattr(obj, "tolist"):
        return obj.tolist()
    return obj


def config_hash(config) -> str:
    blob = json.dumps(jsonable(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def output_root(cli_override: str | None = None) -> Path:
    """--out-dir flag beats LTD_LAB_OUT beats ./runs."""
    if cli_override:
        return Path(cli_override)
    return Path(os.environ.get("LTD_LAB_OUT", "runs"))


def write_json(path: Path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(jsonable(payload), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def write_csv(path: Path, header: list[str], rows) -> Path:
    """Plain CSV with repr-formatted floats (lossless, reproducible)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(repr(v) if isinstance(v, float) else str(v)
                             for v in row) + "\n")
    return path


METRICS_HEADER = ["iter", "train_loss", "eval_loss", "ppl",
                  "layertokens", "b_t", "lr"]


def write_metrics_csv(path: Path, records) -> Path:
    rows = [(r.iteration, r.train_loss, r.eval_loss, r.ppl,
             r.layertokens, r.b_t, r.lr) for r in records]
    return write_csv(path, METRICS_HEADER, rows)


def write_manifest(run_dir: Path, command: str, config, outputs) -> Path:
    run_dir = Path(run_dir)
    manifest = {
        "command": command,
        "config_hash": config_hash(config),
        "created_at": datetime.now(timezone.utc).isoformat(),
        "outputs": sorted(str(Path(p).relative_to(run_dir))
                          for p in outputs),
        "version": __version__,
    }
    return write_json(run_dir / "manifest.json", manifest)
