import json

import numpy as np
import pytest

from ltd_lab.checkpoint import load_arrays, save_arrays


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "emb": rng.normal(0, 1, (7, 4)),
        "w32": rng.normal(0, 1, (3, 5)).astype(np.float32),
        "bias": np.zeros(4),
        "scalar": np.array(3.14),
    }
    save_arrays(tmp_path / "ckpt", arrays)
    back = load_arrays(tmp_path / "ckpt")
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()


def test_manifest_is_json_with_offsets(tmp_path):
    save_arrays(tmp_path / "c", {"a": np.ones(3), "b": np.zeros((2, 2))})
    manifest = json.loads((tmp_path / "c.json").read_text())
    assert manifest["arrays"]["a"]["offset"] == 0
    assert manifest["arrays"]["b"]["offset"] == 24
    assert manifest["total_bytes"] == 24 + 32
    assert (tmp_path / "c.bin").stat().st_size == 56


def test_rewrite_is_byte_identical(tmp_path):
    arrays = {"w": np.linspace(0, 1, 10)}
    save_arrays(tmp_path / "c", arrays)
    first = ((tmp_path / "c.bin").read_bytes(),
             (tmp_path / "c.json").read_bytes())
    save_arrays(tmp_path / "c", arrays)
    assert ((tmp_path / "c.bin").read_bytes(),
            (tmp_path / "c.json").read_bytes()) == first


def test_truncated_blob_detected(tmp_path):
    save_arrays(tmp_path / "c", {"a": np.ones(8)})
    blob = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "c.bin").write_bytes(blob[:-8])
    with pytest.raises(ValueError, match="bytes"):
        load_arrays(tmp_path / "c")
