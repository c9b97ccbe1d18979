from __future__ import annotations

import struct

import numpy as np
import pytest

from probex.errors import FormatError
from probex.tensorio import decode_tensor, encode_tensor, load_tensor, save_tensor, to_f32


def test_header_layout():
    buf = encode_tensor(np.arange(6, dtype=float).reshape(2, 3))
    assert buf[:4] == b"WZT1"
    assert buf[4] == 2
    assert struct.unpack("<2I", buf[5:13]) == (2, 3)
    assert len(buf) == 13 + 6 * 4
    assert np.frombuffer(buf[13:], dtype="<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_round_trip_is_bit_exact_on_f32_values(tmp_path, rng):
    a = to_f32(rng.standard_normal((4, 3, 2)))
    save_tensor(tmp_path / "a.wzt", a)
    b = load_tensor(tmp_path / "a.wzt", (4, 3, 2))
    assert np.array_equal(a, b)
    assert np.array_equal(to_f32(b), b)


def test_bad_magic(tmp_path):
    buf = bytearray(encode_tensor(np.ones(3)))
    buf[0:4] = b"XXXX"
    (tmp_path / "bad.wzt").write_bytes(bytes(buf))
    with pytest.raises(FormatError, match="bad.wzt"):
        load_tensor(tmp_path / "bad.wzt")


def test_truncated_payload():
    buf = encode_tensor(np.ones((2, 2)))
    with pytest.raises(FormatError):
        decode_tensor(buf[:-1])
    with pytest.raises(FormatError):
        decode_tensor(buf[:3])


def test_shape_disagreement_names_both(tmp_path):
    save_tensor(tmp_path / "m.wzt", np.ones((2, 3)))
    with pytest.raises(FormatError, match=r"\(3, 2\).*\(2, 3\)"):
        load_tensor(tmp_path / "m.wzt", (3, 2))


def test_missing_file(tmp_path):
    with pytest.raises(FormatError):
        load_tensor(tmp_path / "nope.wzt")
