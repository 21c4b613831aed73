"""Checkpoint container round-trips and corruption handling."""

import numpy as np
import pytest

from mosld import DataError, Rng
from mosld.checkpoint import MAGIC, load_tensors, save_tensors


def sample_tensors():
    rng = Rng(0)
    return {
        "a": rng.normal((4, 7), 1.0),
        "scalar": np.asarray(3.5),
        "vec": np.asarray([1e-300, -0.0, np.pi, 1e300]),
        "empty": np.zeros((0, 3)),
        "cube": rng.normal((2, 3, 4), 0.25),
    }


def test_round_trip_bit_exact(tmp_path):
    path = tmp_path / "model.bin"
    tensors = sample_tensors()
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert set(back) == set(tensors)
    for name, want in tensors.items():
        got = back[name]
        assert got.shape == want.shape
        assert got.dtype == np.float64
        assert got.tobytes() == np.asarray(want, np.float64).tobytes()


def test_save_is_deterministic(tmp_path):
    t = sample_tensors()
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_tensors(p1, t)
    save_tensors(p2, t)
    assert p1.read_bytes() == p2.read_bytes()


def test_preserves_insertion_order(tmp_path):
    path = tmp_path / "m.bin"
    save_tensors(path, {"z": np.zeros(1), "a": np.ones(1)})
    assert list(load_tensors(path)) == ["z", "a"]


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "m.bin"
    path.write_bytes(b"NOTRIGHT" + b"\x00" * 64)
    with pytest.raises(DataError):
        load_tensors(path)


def test_rejects_truncation(tmp_path):
    path = tmp_path / "m.bin"
    save_tensors(path, sample_tensors())
    blob = path.read_bytes()
    for cut in (len(MAGIC) + 3, len(blob) // 2, len(blob) - 1):
        path.write_bytes(blob[:cut])
        with pytest.raises(DataError):
            load_tensors(path)


def test_rejects_trailing_garbage(tmp_path):
    path = tmp_path / "m.bin"
    save_tensors(path, {"a": np.ones(2)})
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(DataError):
        load_tensors(path)


def test_rejects_duplicate_names(tmp_path):
    path = tmp_path / "m.bin"
    save_tensors(path, {"a": np.ones(1)})
    blob = path.read_bytes()
    # splice the single record in twice and bump the count to 2
    record = blob[len(MAGIC) + 8:]
    doctored = MAGIC + (2).to_bytes(8, "little") + record + record
    path.write_bytes(doctored)
    with pytest.raises(DataError):
        load_tensors(path)


def test_loaded_arrays_are_writable(tmp_path):
    path = tmp_path / "m.bin"
    save_tensors(path, {"a": np.ones(3)})
    back = load_tensors(path)
    back["a"][0] = 2.0  # must not raise: callers rebind and mutate
