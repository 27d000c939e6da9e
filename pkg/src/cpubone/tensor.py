"""NCHW float32 tensors with deterministic fills and raw serialization.

All kernel and model code in this package moves data through the Tensor
container defined here: a dense C-contiguous float32 buffer in
batch/channel/height/width order. Random fills use a counter-based
xorshift-style generator seeded through a splitmix64 mix so that the same
seed produces bit-identical buffers on every platform, independent of
process state or library RNG versions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

_U64_MAX = 2**64 - 1

# Floor for the relative-error denominator so comparisons near zero stay finite.
REL_ERR_FLOOR = 1e-6

_SPLITMIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SPLITMIX_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SPLITMIX_M2 = np.uint64(0x94D049BB133111EB)
_XORSHIFT_M = np.uint64(0x2545F4914F6CDD1D)


@dataclass(frozen=True)
class Shape4:
    """Extents of a rank-4 tensor in N, C, H, W order."""

    n: int
    c: int
    h: int
    w: int

    def __post_init__(self) -> None:
        for name in ("n", "c", "h", "w"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ValueError(f"extent {name} must be an int, got {value!r}")
            if value < 1:
                raise ValueError(f"extent {name} must be >= 1, got {value}")
        if self.num_elements > _U64_MAX:
            raise ValueError(
                f"element count {self.n}*{self.c}*{self.h}*{self.w} exceeds u64"
            )

    @property
    def num_elements(self) -> int:
        return self.n * self.c * self.h * self.w

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n, self.c, self.h, self.w)


def _as_shape4(shape: "Shape4 | tuple[int, int, int, int]") -> Shape4:
    if isinstance(shape, Shape4):
        return shape
    return Shape4(*shape)


class Tensor:
    """Dense float32 buffer with NCHW extents.

    The flat element order is the C layout of (n, c, h, w): index
    ((n*C + c)*H + h)*W + w. Construction rejects anything that is not
    float32 and contiguous so downstream kernels never reinterpret or
    silently copy.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        if data.ndim != 4:
            raise ValueError(f"tensor data must be rank 4, got rank {data.ndim}")
        if data.dtype != np.float32:
            raise ValueError(f"tensor data must be float32, got {data.dtype}")
        if not data.flags["C_CONTIGUOUS"]:
            raise ValueError("tensor data must be C-contiguous")
        Shape4(*(int(e) for e in data.shape))
        self.data = data

    @property
    def shape(self) -> Shape4:
        return Shape4(*(int(e) for e in self.data.shape))

    @property
    def num_elements(self) -> int:
        return int(self.data.size)

    def at(self, n: int, c: int, h: int, w: int) -> float:
        return float(self.data[n, c, h, w])

    def flat_index(self, n: int, c: int, h: int, w: int) -> int:
        _, cc, hh, ww = self.data.shape
        return ((n * cc + c) * hh + h) * ww + w

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        s = self.shape
        return f"Tensor(n={s.n}, c={s.c}, h={s.h}, w={s.w})"


def zeros(shape: Shape4 | tuple[int, int, int, int]) -> Tensor:
    s = _as_shape4(shape)
    return Tensor(np.zeros(s.as_tuple(), dtype=np.float32))


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = (x + _SPLITMIX_GAMMA).astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _SPLITMIX_M1
    z = (z ^ (z >> np.uint64(27))) * _SPLITMIX_M2
    return z ^ (z >> np.uint64(31))


def _xorshift_star(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(12))
    z = z ^ (z << np.uint64(25))
    z = z ^ (z >> np.uint64(27))
    return z * _XORSHIFT_M


def _uniform_unit(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """count doubles in [0, 1), element i depending only on (seed, offset+i)."""
    idx = np.arange(offset, offset + count, dtype=np.uint64)
    state = _splitmix64(np.uint64(seed & _U64_MAX) + idx * _SPLITMIX_GAMMA)
    bits = _xorshift_star(state)
    # Top 24 bits give floats exactly representable in f32, strictly below 1.
    return (bits >> np.uint64(40)).astype(np.float64) * 2.0**-24


def derive_seed(seed: int, stream: int) -> int:
    """Decorrelated child seed for substream `stream` of `seed`.

    Pure-int mirror of the array mixer above; wraparound at 2**64 is the
    point, so the arithmetic stays in Python ints to keep it silent.
    """
    gamma = int(_SPLITMIX_GAMMA)
    z = (seed + (stream & _U64_MAX) * gamma + gamma) & _U64_MAX
    z = ((z ^ (z >> 30)) * int(_SPLITMIX_M1)) & _U64_MAX
    z = ((z ^ (z >> 27)) * int(_SPLITMIX_M2)) & _U64_MAX
    z = z ^ (z >> 31)
    z ^= z >> 12
    z = (z ^ (z << 25)) & _U64_MAX
    z ^= z >> 27
    return (z * int(_XORSHIFT_M)) & _U64_MAX


def random_uniform(
    shape: Shape4 | tuple[int, int, int, int],
    seed: int,
    lo: float = -1.0,
    hi: float = 1.0,
) -> Tensor:
    """Deterministic uniform fill over [lo, hi)."""
    s = _as_shape4(shape)
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValueError("bounds must be finite")
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi})")
    unit = _uniform_unit(seed, s.num_elements)
    vals = (lo + unit * (float(hi) - float(lo))).astype(np.float32)
    # f32 rounding of values just below hi can land on hi; pin the open end.
    top = np.float32(np.nextafter(np.float32(hi), np.float32(lo)))
    np.minimum(vals, top, out=vals)
    return Tensor(vals.reshape(s.as_tuple()))


def max_rel_err(a: Tensor, b: Tensor) -> float:
    """max over elements of |a - b| / max(|a|, |b|, 1e-6)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), REL_ERR_FLOOR)
    return float(np.max(np.abs(x - y) / denom))


def write_raw(t: Tensor, dest: "str | BinaryIO") -> None:
    """Little-endian dump: four u64 extents then the f32 payload."""
    header = struct.pack("<4Q", *t.shape.as_tuple())
    payload = t.data.astype("<f4", copy=False).tobytes()
    if isinstance(dest, str):
        with open(dest, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    else:
        dest.write(header)
        dest.write(payload)


def read_raw(src: "str | BinaryIO") -> Tensor:
    if isinstance(src, str):
        with open(src, "rb") as fh:
            blob = fh.read()
    else:
        blob = src.read()
    if len(blob) < 32:
        raise ValueError("raw tensor stream shorter than its 32-byte header")
    shape = Shape4(*(int(v) for v in struct.unpack("<4Q", blob[:32])))
    expect = 32 + 4 * shape.num_elements
    if len(blob) != expect:
        raise ValueError(
            f"raw tensor stream has {len(blob)} bytes, expected {expect}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=32).astype(np.float32)
    return Tensor(data.reshape(shape.as_tuple()))
