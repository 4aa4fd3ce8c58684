import struct

import numpy as np
import pytest

from painvrl.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint


def sample_arrays():
    rng = np.random.default_rng(0)
    return {"W": rng.standard_normal((3, 4)), "m": rng.random(4), "empty": np.zeros((0, 2)), "c": np.array([1.5])}


def test_roundtrip_bitwise(tmp_path):
    arrays = sample_arrays()
    save_checkpoint(tmp_path / "a.ckpt", arrays, {"stage": "mask0", "sigma": 0.081})
    back, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert np.array_equal(back[k], arrays[k])
    assert meta == {"stage": "mask0", "sigma": 0.081}


def test_no_temp_file_left(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", sample_arrays())
    assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]


def test_missing(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_wrong_version(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(struct.pack("<8sHI", MAGIC, 99, 2) + b"{}")
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(p)


def test_truncated(tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, sample_arrays())
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="past end"):
        load_checkpoint(p)
    p.write_bytes(raw[:5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(p)


def test_trailing_bytes(tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, sample_arrays())
    p.write_bytes(p.read_bytes() + b"\x00" * 8)
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(p)


def test_corrupt_header(tmp_path):
    p = tmp_path / "a.ckpt"
    p.write_bytes(struct.pack("<8sHI", MAGIC, 1, 4) + b"{{{{")
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(p)
