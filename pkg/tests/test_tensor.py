import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from texseg.errors import FormatError, NumericError, ParameterError, ShapeError
from texseg.tensor import (
    alloc,
    elementwise,
    read_tensor_file,
    tensor_from_bytes,
    tensor_to_bytes,
    write_tensor_file,
)


def test_alloc_basic():
    t = alloc([2, 3], 0.0)
    assert t.shape == (2, 3)
    assert t.dtype == np.float32
    assert np.all(t == 0.0)


def test_alloc_scalar_fill():
    assert np.array_equal(alloc([1], 7.5), np.array([7.5], dtype=np.float32))


def test_alloc_rejects_zero_dim():
    with pytest.raises(ShapeError):
        alloc([3, 0], 0.0)
    with pytest.raises(ShapeError):
        alloc([-1], 0.0)
    with pytest.raises(ShapeError):
        alloc([], 0.0)


def test_alloc_rejects_nonfinite_fill():
    with pytest.raises(NumericError):
        alloc([2], float("nan"))


def test_elementwise_add():
    a = np.array([1.0, 2.0], dtype=np.float32)
    b = np.array([3.0, 4.0], dtype=np.float32)
    assert np.array_equal(elementwise(a, b, "add"), np.array([4.0, 6.0], dtype=np.float32))


def test_elementwise_identities():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4)).astype(np.float32)
    assert np.array_equal(elementwise(x, alloc(x.shape, 1.0), "mul"), x)
    assert np.all(elementwise(x, x, "sub") == 0.0)


def test_elementwise_add_mul_commutative_and_shape_preserving():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((2, 3, 4)).astype(np.float32)
    b = rng.standard_normal((2, 3, 4)).astype(np.float32)
    for kind in ("add", "mul"):
        ab = elementwise(a, b, kind)
        assert ab.shape == a.shape
        assert np.array_equal(ab, elementwise(b, a, kind))


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        elementwise(alloc([2]), alloc([3]), "add")


def test_elementwise_bad_kind():
    with pytest.raises(ParameterError):
        elementwise(alloc([2]), alloc([2]), "div")


def test_elementwise_overflow_reported():
    big = alloc([2], 3e38)
    with pytest.raises(NumericError):
        elementwise(big, big, "mul")


@st.composite
def small_tensors(draw):
    rank = draw(st.integers(1, 4))
    shape = tuple(draw(st.integers(1, 5)) for _ in range(rank))
    if draw(st.booleans()):
        values = draw(
            st.lists(
                st.floats(width=32, allow_nan=False, allow_infinity=False),
                min_size=int(np.prod(shape)),
                max_size=int(np.prod(shape)),
            )
        )
        return np.array(values, dtype=np.float32).reshape(shape)
    values = draw(
        st.lists(st.integers(0, 255), min_size=int(np.prod(shape)), max_size=int(np.prod(shape)))
    )
    return np.array(values, dtype=np.uint8).reshape(shape)


@given(small_tensors())
@settings(max_examples=60, deadline=None)
def test_roundtrip_is_bitwise_identity(t):
    back = tensor_from_bytes(tensor_to_bytes(t))
    assert back.dtype == t.dtype
    assert back.shape == t.shape
    assert np.array_equal(back.view(np.uint8), t.view(np.uint8))


def test_file_roundtrip(tmp_path):
    t = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    path = tmp_path / "t.tsr"
    write_tensor_file(t, path)
    back = read_tensor_file(path)
    assert np.array_equal(back, t) and back.dtype == t.dtype


def test_bad_magic():
    blob = tensor_to_bytes(alloc([2]))
    with pytest.raises(FormatError, match="bad magic"):
        tensor_from_bytes(b"XXXX" + blob[4:])


def test_truncated_payload():
    blob = tensor_to_bytes(np.arange(10, dtype=np.float32))
    with pytest.raises(FormatError, match="truncated payload"):
        tensor_from_bytes(blob[:-4])  # declares 10 elements, contains 9


def test_trailing_data_rejected():
    blob = tensor_to_bytes(alloc([2]))
    with pytest.raises(FormatError, match="trailing data"):
        tensor_from_bytes(blob + b"\x00")


def test_bad_dtype_code():
    blob = bytearray(tensor_to_bytes(alloc([2])))
    blob[4] = 9
    with pytest.raises(FormatError, match="dtype code"):
        tensor_from_bytes(bytes(blob))


def test_bad_rank():
    blob = bytearray(tensor_to_bytes(alloc([2])))
    blob[5] = 7
    with pytest.raises(FormatError, match="rank"):
        tensor_from_bytes(bytes(blob))


def test_write_rejects_nonfinite():
    t = alloc([3])
    t[1] = np.inf
    with pytest.raises(NumericError):
        tensor_to_bytes(t)


def test_write_rejects_float64():
    with pytest.raises(ParameterError):
        tensor_to_bytes(np.zeros(3, dtype=np.float64))
