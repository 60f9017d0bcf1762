"""Dense 4-D tensor values, shape algebra, reductions and seeded RNG.

Everything downstream (operators, blocks, the model) works on `Tensor`,
a thin immutable wrapper around a contiguous NCHW float array. Compute
precision is float32; float64 is supported so gradient checks can run in
high precision.
"""

from __future__ import annotations

from typing import Iterable, NamedTuple

import numpy as np

AXES = ("n", "c", "h", "w")
_AXIS_INDEX = {"n": 0, "c": 1, "h": 2, "w": 3}


class ShapeError(ValueError):
    """Raised for invalid extents, mismatched shapes or axis sets."""


class Shape4(NamedTuple):
    """Extents of a batch/channel/height/width tensor."""

    n: int
    c: int
    h: int
    w: int

    def validate(self) -> "Shape4":
        for name, extent in zip(AXES, self):
            if not isinstance(extent, (int, np.integer)) or extent < 1:
                raise ShapeError(f"extent {name}={extent!r} must be an integer >= 1")
        if self.size > np.iinfo(np.intp).max:
            raise ShapeError(f"element count {self.size} overflows addressable size")
        return self

    @property
    def size(self) -> int:
        return int(self.n) * int(self.c) * int(self.h) * int(self.w)


class Tensor:
    """Immutable dense 4-D array of 32- or 64-bit floats in NCHW order.

    The backing buffer is row-major and marked read-only; operators build
    new tensors instead of mutating. All public constructors verify every
    element is finite.
    """

    __slots__ = ("data", "shape")

    def __init__(self, array, dtype=None, _checked: bool = False):
        arr = np.asarray(array)
        if dtype is not None:
            if np.dtype(dtype) not in (np.float32, np.float64):
                raise TypeError(f"tensor dtype must be float32 or float64, got {dtype}")
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (n,c,h,w), got ndim={arr.ndim}")
        shape = Shape4(*arr.shape).validate()
        arr = np.ascontiguousarray(arr)
        if not _checked and not np.isfinite(arr).all():
            raise FloatingPointError("tensor contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.shape = shape

    # -- constructors -------------------------------------------------

    @staticmethod
    def zeros(shape: Shape4 | tuple, dtype=np.float32) -> "Tensor":
        return Tensor(np.zeros(tuple(shape), dtype=dtype), _checked=True)

    @staticmethod
    def full(shape: Shape4 | tuple, value: float, dtype=np.float32) -> "Tensor":
        return Tensor(np.full(tuple(shape), value, dtype=dtype))

    @staticmethod
    def scalar(value: float, dtype=np.float32) -> "Tensor":
        return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))

    # -- views / conversions ------------------------------------------

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.shape.size

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, shape {self.shape}")
        return float(self.data.reshape(()))

    def ravel(self) -> np.ndarray:
        """Flattened copy in n->c->h->w order."""
        return self.data.reshape(-1).copy()

    @staticmethod
    def from_flat(flat, shape: Shape4 | tuple, dtype=None) -> "Tensor":
        shape = Shape4(*shape).validate()
        arr = np.asarray(flat, dtype=dtype)
        if arr.size != shape.size:
            raise ShapeError(f"flat buffer has {arr.size} elements, shape needs {shape.size}")
        return Tensor(arr.reshape(tuple(shape)), dtype=dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name})"


def _promote(a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"mixed tensor dtypes {a.dtype} and {b.dtype}")


def elementwise_binary(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Elementwise add/sub/mul of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    _promote(a, b)
    if kind == "add":
        out = a.data + b.data
    elif kind == "sub":
        out = a.data - b.data
    elif kind == "mul":
        out = a.data * b.data
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return Tensor(out, _checked=True)


def reduce(a: Tensor, axes: Iterable[str], kind: str) -> Tensor:
    """Reduce over a subset of {n,c,h,w}; reduced extents become 1.

    Variance uses the population convention (divide by the element count),
    which is what the normalization layers rely on.
    """
    if a.size == 0:
        raise ShapeError("cannot reduce an empty tensor")
    axes = tuple(sorted({ax for ax in axes}))
    for ax in axes:
        if ax not in _AXIS_INDEX:
            raise ShapeError(f"unknown axis {ax!r}, expected subset of {AXES}")
    idx = tuple(_AXIS_INDEX[ax] for ax in axes)
    if kind == "sum":
        out = a.data.sum(axis=idx, keepdims=True)
    elif kind == "mean":
        out = a.data.mean(axis=idx, keepdims=True)
    elif kind == "var":
        out = a.data.var(axis=idx, keepdims=True, ddof=0)
    else:
        raise ValueError(f"unknown reduce kind {kind!r}")
    return Tensor(out.astype(a.dtype, copy=False), _checked=True)


class RngState:
    """Counter-based (Philox) random stream.

    The same seed and call sequence always reproduce the same values.
    Derived streams come from `child(tag)`, so independent consumers
    (init, per-step batches, validation data) never share a counter.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def child(self, tag: int) -> "RngState":
        """Independent stream derived from (seed, tag)."""
        return RngState(self.seed, tag)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        if std < 0:
            raise ValueError(f"std must be >= 0, got {std}")
        if std == 0:
            return np.full(tuple(shape), mean, dtype=dtype)
        return self._gen.normal(mean, std, size=tuple(shape)).astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=np.float32) -> np.ndarray:
        return self._gen.uniform(low, high, size=tuple(shape)).astype(dtype)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def state(self) -> dict:
        return {"seed": self.seed, "stream": self.stream}


def randn(shape: Shape4 | tuple, rng: RngState, mean: float = 0.0, std: float = 1.0,
          dtype=np.float32) -> Tensor:
    """I.i.d. Gaussian tensor, deterministic for a fixed rng."""
    shape = Shape4(*shape).validate()
    return Tensor(rng.normal(tuple(shape), mean, std, dtype=dtype), _checked=True)
