import json

import numpy as np
import pytest

from dpaudit.container import read_container, write_container
from dpaudit.numerics import Rng


def test_round_trip_bit_exact(tmp_path):
    rng = Rng(0)
    tensors = {
        "images": rng.normal((5, 8, 8, 1)),
        "labels": np.array([0, 1, 1, 0, 1], dtype=np.int64),
        "scalar": np.array(3.25),
    }
    meta = {"kind": "demo", "seed": 0, "nested": {"a": [1, 2]}}
    path = tmp_path / "data.bin"
    write_container(path, tensors, meta)
    loaded, meta2 = read_container(path)
    assert meta2 == meta
    for name, arr in tensors.items():
        assert loaded[name].dtype == arr.dtype
        assert np.array_equal(loaded[name], arr)


def test_sidecar_written(tmp_path):
    path = tmp_path / "d.bin"
    write_container(path, {"x": np.zeros(3)}, {"k": 1})
    sidecar = json.loads((tmp_path / "d.bin.json").read_text())
    assert sidecar == {"k": 1}


def test_double_write_identical_bytes(tmp_path):
    tensors = {"x": Rng(1).normal((4, 4))}
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    write_container(a, tensors, {"v": 1})
    write_container(b, tensors, {"v": 1})
    assert a.read_bytes() == b.read_bytes()


def test_rejects_foreign_file(tmp_path):
    path = tmp_path / "bogus.bin"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(ValueError, match="not a dpaudit container"):
        read_container(path)
