"""Tensor blob format round-trips and corruption handling."""

import io
import struct

import numpy as np
import pytest

from any2i.blob import MAGIC, load_tensor, read_blob, save_tensor, write_blob


def test_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(3,), (2, 5), (12, 8, 8), (1, 1, 1, 4)]:
        arr = rng.standard_normal(shape).astype(np.float32)
        path = tmp_path / "t.bin"
        save_tensor(path, arr)
        back = load_tensor(path)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, arr)


def test_header_layout():
    buf = io.BytesIO()
    write_blob(buf, np.arange(6, dtype=np.float32).reshape(2, 3))
    raw = buf.getvalue()
    assert raw[:4] == MAGIC
    assert struct.unpack("<I", raw[4:8]) == (2,)
    assert struct.unpack("<II", raw[8:16]) == (2, 3)
    assert np.frombuffer(raw[16:], dtype="<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_bad_magic_rejected():
    with pytest.raises(ValueError, match="magic"):
        read_blob(io.BytesIO(b"NOPE" + b"\x00" * 16))


def test_truncated_payload_rejected():
    buf = io.BytesIO()
    write_blob(buf, np.zeros(4, dtype=np.float32))
    raw = buf.getvalue()[:-4]
    with pytest.raises(ValueError, match="truncated"):
        read_blob(io.BytesIO(raw))


def test_missing_file_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nothing.bin"):
        load_tensor(tmp_path / "nothing.bin")
