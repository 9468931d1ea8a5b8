"""Dense 5-D feature maps with a fixed (batch, frames, channels, height, width) layout.

All data is stored row-major and contiguous so byte sizes and slicing
arithmetic are unambiguous. Two scalar types are supported: float32 is the
default; float64 exists to tighten equivalence tolerances in tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ShapeMismatch

AXES = ("b", "t", "c", "h", "w")

DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
}


def resolve_dtype(dtype) -> np.dtype:
    """Accept a dtype name or numpy dtype and return the numpy dtype."""
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ShapeMismatch(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}")
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeMismatch(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


class Shape5(NamedTuple):
    """Extents along (batch, frames, channels, height, width)."""

    b: int
    t: int
    c: int
    h: int
    w: int

    def count(self) -> int:
        return self.b * self.t * self.c * self.h * self.w

    def nbytes(self, itemsize: int) -> int:
        return self.count() * itemsize

    def validate(self) -> "Shape5":
        if any(int(e) < 1 for e in self):
            raise ShapeMismatch(f"all extents must be >= 1, got {tuple(self)}")
        # element count must fit the platform index type
        if self.count() > np.iinfo(np.intp).max:
            raise ShapeMismatch(f"element count {self.count()} exceeds addressable size")
        return self

    def replace(self, **kw) -> "Shape5":
        return self._replace(**kw)


@dataclass(frozen=True)
class Tensor5D:
    """A contiguous 5-D array in (b, t, c, h, w) order.

    Kernels treat tensors as immutable values: they never mutate inputs and
    always return freshly allocated outputs.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = self.data
        if arr.ndim != 5:
            raise ShapeMismatch(f"expected 5-D array, got {arr.ndim}-D")
        resolve_dtype(arr.dtype)
        Shape5(*arr.shape).validate()
        if not arr.flags.c_contiguous:
            object.__setattr__(self, "data", np.ascontiguousarray(arr))

    @property
    def shape(self) -> Shape5:
        return Shape5(*self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def astype(self, dtype) -> "Tensor5D":
        dt = resolve_dtype(dtype)
        if self.data.dtype == dt:
            return self
        return Tensor5D(self.data.astype(dt))

    def copy(self) -> "Tensor5D":
        return Tensor5D(self.data.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    @classmethod
    def zeros(cls, shape: Shape5, dtype="float32") -> "Tensor5D":
        return cls(np.zeros(tuple(shape), dtype=resolve_dtype(dtype)))

    @classmethod
    def from_array(cls, arr) -> "Tensor5D":
        return cls(np.asarray(arr))


def max_rel_error(a: Tensor5D, b: Tensor5D) -> float:
    """Max absolute difference normalized by the reference's max magnitude.

    ``max|a - b| / max|b|`` is the equivalence metric used throughout: it is
    robust to individual near-zero elements while still scaling with the
    data. Returns 0.0 for two identical tensors.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = float(np.max(np.abs(a.data.astype(np.float64) - b.data.astype(np.float64))))
    if diff == 0.0:
        return 0.0
    scale = float(np.max(np.abs(b.data.astype(np.float64))))
    if scale == 0.0:
        return float("inf")
    return diff / scale


def max_abs_error(a: Tensor5D, b: Tensor5D) -> float:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(np.max(np.abs(a.data.astype(np.float64) - b.data.astype(np.float64))))
