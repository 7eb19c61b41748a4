"""Checkpoint container: round trips and offset-bearing rejections."""

import struct

import numpy as np
import pytest

from genspec.checkpoint import load_weights, save_weights
from genspec.errors import FormatError


def _sample():
    rng = np.random.default_rng(0)
    return {
        "enc.w": rng.normal(size=(4, 3, 3, 3)),
        "enc.b": rng.normal(size=(4,)),
        "meta/F": np.float64(4.0),
        "head.w": rng.normal(size=(8, 2)),
    }


def test_roundtrip_bitwise(tmp_path):
    p = str(tmp_path / "w.gmzw")
    tensors = _sample()
    save_weights(p, tensors)
    back = load_weights(p)
    assert set(back) == set(tensors)
    for k in tensors:
        assert np.array_equal(back[k], np.asarray(tensors[k], dtype=np.float64))
        assert back[k].shape == np.asarray(tensors[k]).shape


def test_scalar_rank_zero_roundtrip(tmp_path):
    p = str(tmp_path / "s.gmzw")
    save_weights(p, {"x": np.float64(7.25)})
    assert load_weights(p)["x"].shape == ()
    assert float(load_weights(p)["x"]) == 7.25


def test_bad_magic(tmp_path):
    p = str(tmp_path / "bad.gmzw")
    with open(p, "wb") as f:
        f.write(b"WXYZ" + struct.pack("<II", 1, 0))
    with pytest.raises(FormatError, match="offset 0"):
        load_weights(p)


def test_truncation_reports_offset(tmp_path):
    p = str(tmp_path / "w.gmzw")
    save_weights(p, _sample())
    blob = open(p, "rb").read()
    for cut in (len(blob) - 5, 13, 11):
        with open(p, "wb") as f:
            f.write(blob[:cut])
        with pytest.raises(FormatError, match="byte offset"):
            load_weights(p)


def test_trailing_garbage_rejected(tmp_path):
    p = str(tmp_path / "w.gmzw")
    save_weights(p, {"a": np.ones(2)})
    with open(p, "ab") as f:
        f.write(b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        load_weights(p)


def test_implausible_rank_rejected(tmp_path):
    p = str(tmp_path / "w.gmzw")
    body = struct.pack("<H", 1) + b"a" + struct.pack("<I", 99)
    with open(p, "wb") as f:
        f.write(b"GMZW" + struct.pack("<II", 1, 1) + body)
    with pytest.raises(FormatError, match="rank"):
        load_weights(p)
