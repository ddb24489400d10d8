"""Ring arithmetic over Z_{2^64} and fixed-point tensors.

Every value in the package is carried as a :class:`RingTensor`: a numpy
``uint64`` array plus the number of fractional bits in effect.  numpy's
unsigned arithmetic wraps modulo 2^64, which is exactly the ring we want, so
add/sub/mul/matmul need no explicit reduction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ScaleError, ShapeError

RING_BITS = 64
DEFAULT_FRAC_BITS = 12

_U64 = np.uint64


def as_ring(values) -> np.ndarray:
    """Coerce python/numpy integers (possibly negative) into ring elements."""
    arr = np.asarray(values)
    if arr.dtype == np.uint64:
        return arr.copy()
    if arr.dtype.kind in "iu":
        return arr.astype(np.int64).view(np.uint64)
    if arr.dtype == object:
        return np.array([int(v) % (1 << 64) for v in arr.ravel()], dtype=np.uint64).reshape(arr.shape)
    raise TypeError(f"cannot interpret dtype {arr.dtype} as ring elements")


def to_signed(data: np.ndarray) -> np.ndarray:
    """Two's-complement view of ring elements."""
    return np.asarray(data, dtype=np.uint64).view(np.int64)


@dataclass(frozen=True)
class FixedPointCodec:
    frac_bits: int = DEFAULT_FRAC_BITS

    @property
    def limit(self) -> float:
        return float(2 ** (RING_BITS - 1 - self.frac_bits))

    def encode(self, values) -> np.ndarray:
        real = np.asarray(values, dtype=np.float64)
        if real.size and not np.all(np.abs(real) < self.limit):
            raise OverflowError(
                f"value magnitude exceeds 2^{RING_BITS - 1 - self.frac_bits} at f={self.frac_bits}"
            )
        return np.round(real * float(2 ** self.frac_bits)).astype(np.int64).view(np.uint64)

    def decode(self, data) -> np.ndarray:
        return to_signed(data).astype(np.float64) / float(2 ** self.frac_bits)


@dataclass(frozen=True, eq=False)
class RingTensor:
    """Row-major tensor of Z_{2^64} elements at a fixed-point scale."""

    data: np.ndarray
    scale: int = DEFAULT_FRAC_BITS

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.uint64:
            data = as_ring(data)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def _check(self, other: "RingTensor"):
        if self.shape != other.shape:
            raise ShapeError(f"shape mismatch {self.shape} vs {other.shape}")
        if self.scale != other.scale:
            raise ScaleError(f"scale mismatch {self.scale} vs {other.scale}")

    def __add__(self, other: "RingTensor") -> "RingTensor":
        self._check(other)
        return RingTensor(self.data + other.data, self.scale)

    def __sub__(self, other: "RingTensor") -> "RingTensor":
        self._check(other)
        return RingTensor(self.data - other.data, self.scale)

    def __neg__(self) -> "RingTensor":
        return RingTensor(np.uint64(0) - self.data, self.scale)

    def __mul__(self, other: "RingTensor") -> "RingTensor":
        """Elementwise ring product; scales add."""
        if self.shape != other.shape:
            raise ShapeError(f"shape mismatch {self.shape} vs {other.shape}")
        return RingTensor(self.data * other.data, self.scale + other.scale)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RingTensor):
            return NotImplemented
        return self.scale == other.scale and self.shape == other.shape and bool(np.all(self.data == other.data))

    def reshape(self, *shape) -> "RingTensor":
        return RingTensor(self.data.reshape(*shape), self.scale)

    @property
    def T(self) -> "RingTensor":
        return RingTensor(np.ascontiguousarray(self.data.T), self.scale)

    def signed(self) -> np.ndarray:
        return to_signed(self.data)

    def decode(self) -> np.ndarray:
        return FixedPointCodec(self.scale).decode(self.data)

    def __repr__(self):
        return f"RingTensor(shape={self.shape}, scale={self.scale})"


def encode_tensor(values, f: int = DEFAULT_FRAC_BITS) -> RingTensor:
    """Encode a real array at ``f`` fractional bits.

    Raises OverflowError if any magnitude is not below 2^(63-f).
    """
    return RingTensor(FixedPointCodec(f).encode(values), f)


def encode_int(values) -> RingTensor:
    """Integers at scale 0 (indices, masks)."""
    return RingTensor(as_ring(np.asarray(values, dtype=np.int64)), 0)


def ring_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """uint64 matrix product modulo 2^64.

    numpy has no BLAS path for integer matmul; splitting into 32-bit halves
    and using float64 would lose bits, so we use the native (exact) loop.
    """
    return np.matmul(np.asarray(a, dtype=np.uint64), np.asarray(b, dtype=np.uint64))


def plain_matmul(a: RingTensor, b: RingTensor) -> RingTensor:
    """Exact ring product; the result scale is the sum of operand scales."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return RingTensor(ring_matmul(a.data, b.data), a.scale + b.scale)


def truncate(t: RingTensor, bits: int | None = None) -> RingTensor:
    """Arithmetic right shift by ``bits`` (default: half the current scale)."""
    if bits is None:
        if t.scale % 2:
            raise ScaleError(f"cannot infer truncation width for odd scale {t.scale}")
        bits = t.scale // 2
    if bits > t.scale:
        raise ScaleError(f"cannot shift {bits} bits off scale {t.scale}")
    shifted = np.right_shift(t.signed(), bits).view(np.uint64)
    return RingTensor(shifted, t.scale - bits)
