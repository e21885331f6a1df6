"""Dense float64 tensors.

A tensor is a C-contiguous ``numpy.ndarray`` of dtype float64 laid out
row-major (N x C x H x W for images).  The helpers here enforce the shape
rules the rest of the package relies on and provide the ``HMT1`` binary
serialization used by checkpoints.
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import BroadcastError, ShapeError

DTYPE = np.float64
MAGIC = b"HMT1"

ELEMENTWISE_KINDS = ("add", "sub", "mul", "sigmoid", "relu", "scale")
REDUCE_KINDS = ("sum", "mean", "max")


def check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not dims:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in dims):
        raise ShapeError(f"invalid shape {dims}: every extent must be >= 1")
    return dims


def as_tensor(data) -> np.ndarray:
    return np.ascontiguousarray(data, dtype=DTYPE)


def new(shape: Sequence[int], fill: float = 0.0) -> np.ndarray:
    """Tensor of ``shape`` with every element equal to ``fill``."""
    return np.full(check_shape(shape), fill, dtype=DTYPE)


def broadcast_shape(a: Sequence[int], b: Sequence[int]) -> tuple[int, ...]:
    """Result shape of a binary op; extents of 1 stretch, missing leading axes count as 1."""
    a, b = tuple(a), tuple(b)
    rank = max(len(a), len(b))
    a = (1,) * (rank - len(a)) + a
    b = (1,) * (rank - len(b)) + b
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise BroadcastError(f"cannot broadcast shapes {a} and {b}")
    return tuple(out)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def elementwise(kind: str, a, b=None) -> np.ndarray:
    a = as_tensor(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "scale":
        if b is None or np.ndim(b) != 0:
            raise ValueError("scale needs a scalar factor")
        return a * float(b)
    if kind not in ("add", "sub", "mul"):
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if b is None:
        raise ValueError(f"{kind} is binary")
    b = as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    if kind == "add":
        return a + b
    if kind == "sub":
        return a - b
    return a * b


def _norm_axes(axes: Iterable[int], ndim: int) -> tuple[int, ...]:
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axes {tuple(axes)}")
    return tuple(out)


def reduce(kind: str, x, axes: Iterable[int] | None = None, keep: bool = False) -> np.ndarray:
    """Sum, mean or max over ``axes`` (all axes when None)."""
    x = as_tensor(x)
    axes = tuple(range(x.ndim)) if axes is None else _norm_axes(axes, x.ndim)
    if kind == "sum":
        out = x.sum(axis=axes, keepdims=keep)
    elif kind == "mean":
        out = x.mean(axis=axes, keepdims=keep)
    elif kind == "max":
        out = x.max(axis=axes, keepdims=keep)
    else:
        raise ValueError(f"unknown reduce kind {kind!r}")
    return np.asarray(out, dtype=DTYPE)


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def write_tensor(f: BinaryIO, x: np.ndarray) -> None:
    x = as_tensor(x)
    f.write(MAGIC)
    f.write(struct.pack("<I", x.ndim))
    f.write(struct.pack(f"<{x.ndim}I", *x.shape))
    f.write(x.astype("<f8").tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise ShapeError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    shape = check_shape(dims)
    count = int(np.prod(shape))
    payload = _read_exact(f, 8 * count)
    return np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(shape)


def to_bytes(x: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    write_tensor(buf, x)
    return buf.getvalue()


def from_bytes(data: bytes) -> np.ndarray:
    import io

    return read_tensor(io.BytesIO(data))


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ShapeError(f"truncated tensor data: wanted {n} bytes, got {len(data)}")
    return data
