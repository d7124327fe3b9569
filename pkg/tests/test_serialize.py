import io
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from cal.tensor import (
    FormatError,
    Tensor,
    decode_array,
    encode_array,
    load_tensor,
    save_tensor,
)


def test_layout_by_hand():
    buf = encode_array(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"CALT"
    assert buf[4] == 1 and buf[5] == 2
    assert struct.unpack("<2Q", buf[6:22]) == (1, 3)
    assert struct.unpack("<3d", buf[22:]) == (1.0, 2.0, 3.0)


@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, min_side=1, max_side=5), elements=st.floats(allow_nan=False)))
def test_round_trip_bit_exact(a):
    f = io.BytesIO()
    save_tensor(Tensor(a), f)
    f.seek(0)
    back = load_tensor(f)
    assert back.shape == a.shape
    assert back.data.tobytes() == np.ascontiguousarray(a).tobytes()


def test_signed_zero_and_subnormal_survive():
    a = np.array([-0.0, 5e-324, np.finfo(float).max])
    back, _ = decode_array(encode_array(a))
    assert back.tobytes() == a.tobytes()


@pytest.mark.parametrize("cut", [0, 3, 5, 10, 21, 30])
def test_truncation_rejected_with_position(cut):
    buf = encode_array(np.arange(4.0).reshape(2, 2))[:cut]
    with pytest.raises(FormatError) as e:
        decode_array(buf)
    assert e.value.position <= cut


def test_bad_magic():
    buf = b"XALT" + encode_array(np.zeros(1))[4:]
    with pytest.raises(FormatError, match="magic") as e:
        decode_array(buf)
    assert e.value.position == 0


def test_bad_version():
    buf = bytearray(encode_array(np.zeros(1)))
    buf[4] = 9
    with pytest.raises(FormatError, match="version"):
        decode_array(bytes(buf))


def test_trailing_bytes_rejected():
    with pytest.raises(FormatError, match="trailing"):
        load_tensor(io.BytesIO(encode_array(np.zeros(2)) + b"\0"))


def test_consecutive_records():
    buf = encode_array(np.ones(2)) + encode_array(np.full((1, 1), 7.0))
    a, pos = decode_array(buf)
    b, end = decode_array(buf, pos)
    assert a.tolist() == [1.0, 1.0] and b.tolist() == [[7.0]] and end == len(buf)
