"""Dense float64 tensors, seeded random fills and the raw tensor file format.

Tensors are plain ``numpy.ndarray`` objects with ``dtype=float64`` in C
(row-major) order. The helpers here pin the conventions the rest of the
package relies on.

Random streams come from ``numpy.random.Generator`` backed by PCG64. A
given seed reproduces the same stream on every platform numpy supports.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

DTYPE = np.float64
RNG_ALGORITHM = "PCG64"

MAGIC = b"WCTENSOR"


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64) for ``seed``."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("shape must have at least one extent")
    if any(s < 1 for s in shape):
        raise ValueError(f"all extents must be >= 1, got {shape}")
    return shape


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=DTYPE)


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def strides_of(shape: Sequence[int]) -> tuple[int, ...]:
    """Row-major element strides for ``shape``."""
    out = []
    acc = 1
    for extent in reversed(tuple(shape)):
        out.append(acc)
        acc *= int(extent)
    return tuple(reversed(out))


def offset_of(index: Sequence[int], shape: Sequence[int]) -> int:
    if len(index) != len(shape):
        raise ValueError("index rank does not match shape rank")
    for i, s in zip(index, shape):
        if not 0 <= i < s:
            raise IndexError(f"index {tuple(index)} out of bounds for shape {tuple(shape)}")
    return sum(i * s for i, s in zip(index, strides_of(shape)))


def index_of(offset: int, shape: Sequence[int]) -> tuple[int, ...]:
    size = int(np.prod(shape))
    if not 0 <= offset < size:
        raise IndexError(f"offset {offset} out of bounds for size {size}")
    out = []
    for stride in strides_of(shape):
        q, offset = divmod(offset, stride)
        out.append(q)
    return tuple(out)


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def hadamard(a, b) -> np.ndarray:
    """Elementwise product of two equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "hadamard")
    return a * b


def frobenius_inner(a, b) -> float:
    """Sum of elementwise products, accumulated in row-major order."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "frobenius_inner")
    # a*b == b*a bitwise, so the sum is commutative in the arguments.
    return float(np.sum(a * b))


def fill_normal(shape, mean: float, std: float, rng: np.random.Generator) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    shape = _check_shape(shape)
    if std == 0:
        return np.full(shape, mean, dtype=DTYPE)
    return rng.normal(mean, std, size=shape).astype(DTYPE, copy=False)


def fill_uniform(shape, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    if lo > hi:
        raise ValueError(f"lo must be <= hi, got lo={lo}, hi={hi}")
    return rng.uniform(lo, hi, size=_check_shape(shape)).astype(DTYPE, copy=False)


# -- raw tensor files -------------------------------------------------------
#
# layout: b"WCTENSOR" | u32 rank | rank x u64 extents | f64 payload, all LE


def save_tensor(path, x) -> None:
    x = as_tensor(x)
    if x.ndim == 0:
        x = x.reshape(1)
    header = MAGIC + struct.pack("<I", x.ndim) + struct.pack(f"<{x.ndim}Q", *x.shape)
    Path(path).write_bytes(header + x.astype("<f8").tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic, expected {MAGIC!r}")
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 8)
    end = 12 + 8 * rank
    if rank == 0 or len(raw) < end:
        raise ValueError(f"{path}: truncated or empty shape header")
    shape = struct.unpack_from(f"<{rank}Q", raw, 12)
    count = int(np.prod(shape))
    if len(raw) - end != 8 * count:
        raise ValueError(
            f"{path}: payload has {len(raw) - end} bytes, shape {shape} needs {8 * count}"
        )
    data = np.frombuffer(raw, dtype="<f8", offset=end, count=count)
    return data.astype(DTYPE).reshape(shape)


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *keys)``; used to split one seed per purpose."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))
