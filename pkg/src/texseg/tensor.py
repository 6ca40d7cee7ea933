"""Dense tensors and the TSR1 on-disk tensor format.

Tensors are plain numpy arrays. By convention feature maps are C x H x W,
convolution weights OC x IC x KH x KW, biases length-OC vectors; all are
row-major float32. Label maps are H x W uint8 where values 0..C-1 are
class codes and 255 (`UNLABELED`) marks pixels without annotation.

File format (little-endian):

    bytes 0-3   magic "TSR1"
    byte  4     dtype code: 1 = float32, 2 = uint8
    byte  5     rank R, 1..4
    next  4*R   u32 dimension sizes, each >= 1
    rest        payload, row-major, exactly prod(dims) elements

Round-trips are bit-exact. Tensors returned by public operations are
treated as immutable; training code mutates parameter arrays it owns.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError, NumericError, ParameterError, ShapeError

UNLABELED = 255

_MAGIC = b"TSR1"
_MAX_RANK = 4
_DTYPE_OF_CODE = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODE_OF_KIND = {"f": 1, "u": 2}


def alloc(shape, fill: float = 0.0) -> np.ndarray:
    """Float32 tensor of the given shape with every element set to `fill`."""
    dims = tuple(int(d) for d in shape)
    if len(dims) == 0 or any(d < 1 for d in dims):
        raise ShapeError(f"invalid shape {list(shape)}: all dimensions must be >= 1")
    if not np.isfinite(fill):
        raise NumericError(f"non-finite fill value {fill!r}")
    return np.full(dims, fill, dtype=np.float32)


def elementwise(a: np.ndarray, b: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise add, sub, or mul of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {kind}: shapes {a.shape} and {b.shape} differ")
    with np.errstate(over="ignore"):  # overflow is reported via ensure_finite below
        if kind == "add":
            out = a + b
        elif kind == "sub":
            out = a - b
        elif kind == "mul":
            out = a * b
        else:
            raise ParameterError(f"unknown elementwise kind {kind!r}")
    ensure_finite(out, f"elementwise {kind} result")
    return out


def ensure_finite(t: np.ndarray, context: str = "tensor") -> np.ndarray:
    """Raise NumericError if `t` holds NaN or Inf; returns `t` unchanged."""
    if t.dtype.kind == "f" and not np.isfinite(t).all():
        raise NumericError(f"non-finite values in {context}")
    return t


def tensor_to_bytes(t: np.ndarray) -> bytes:
    """Serialize a float32 or uint8 tensor to a TSR1 blob."""
    if t.dtype == np.float32:
        code = 1
    elif t.dtype == np.uint8:
        code = 2
    else:
        raise ParameterError(f"unsupported dtype {t.dtype}; use float32 or uint8")
    if t.ndim < 1 or t.ndim > _MAX_RANK:
        raise ParameterError(f"rank {t.ndim} outside supported range 1..{_MAX_RANK}")
    if any(d < 1 for d in t.shape):
        raise ShapeError(f"invalid shape {t.shape}: all dimensions must be >= 1")
    ensure_finite(t, "tensor payload")
    header = _MAGIC + struct.pack("<BB", code, t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    payload = np.ascontiguousarray(t, dtype=_DTYPE_OF_CODE[code]).tobytes()
    return header + payload


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    """Parse a TSR1 blob; errors name the offending field."""
    if len(buf) < 4 or buf[:4] != _MAGIC:
        raise FormatError("bad magic")
    if len(buf) < 6:
        raise FormatError("truncated header")
    code, rank = buf[4], buf[5]
    if code not in _DTYPE_OF_CODE:
        raise FormatError(f"dtype code {code} is not 1 (f32) or 2 (u8)")
    if rank < 1 or rank > _MAX_RANK:
        raise FormatError(f"rank {rank} outside supported range 1..{_MAX_RANK}")
    dims_end = 6 + 4 * rank
    if len(buf) < dims_end:
        raise FormatError("truncated dims")
    dims = struct.unpack(f"<{rank}I", buf[6:dims_end])
    if any(d < 1 for d in dims):
        raise FormatError(f"dims {list(dims)} contain a zero size")
    dtype = _DTYPE_OF_CODE[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(buf) - dims_end < expected:
        raise FormatError("truncated payload")
    if len(buf) - dims_end > expected:
        raise FormatError("trailing data after payload")
    data = np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=dims_end)
    out = data.reshape(dims).copy()
    ensure_finite(out, "tensor payload")
    return out


def write_tensor_file(t: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def read_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
