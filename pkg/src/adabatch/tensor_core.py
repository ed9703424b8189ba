"""Dense float64 vector helpers and reproducible random streams.

Parameter vectors, gradients and optimizer moments are plain 1-D
``numpy.ndarray`` objects of dtype float64. The helpers here add the
dimension and domain checks the rest of the package relies on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

ParamVector = np.ndarray

_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


class DimensionError(ValueError):
    """Raised when vectors that must share a dimension do not."""


def as_vector(x, *, copy: bool = False) -> ParamVector:
    """Coerce ``x`` to a 1-D float64 array, rejecting NaN/Inf."""
    arr = np.array(x, dtype=np.float64, copy=True if copy else None, ndmin=1)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector has non-finite coordinates")
    return arr


def check_same_dim(a: ParamVector, b: ParamVector) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")


def elementwise(a, b, op: str) -> ParamVector:
    """Coordinate-wise ``add``, ``sub``, ``mul`` or ``div``."""
    if op not in _OPS:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_OPS)}")
    a = as_vector(a)
    b = as_vector(b)
    check_same_dim(a, b)
    if op == "div":
        zero = np.flatnonzero(b == 0.0)
        if zero.size:
            raise ZeroDivisionError(f"division by zero at coordinate(s) {zero.tolist()}")
    return _OPS[op](a, b)


def l2_norm_squared(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.dot(a, a))


def l1_norm(a) -> float:
    return float(np.sum(np.abs(np.asarray(a, dtype=np.float64))))


def coordinatewise_variance(vectors: Sequence[ParamVector] | np.ndarray,
                            divisor: str = "count") -> ParamVector:
    """Per-coordinate variance of a collection of equal-length vectors.

    ``divisor="count"`` divides the summed squared deviations by the
    collection size J, ``"count_minus_one"`` by J - 1.
    """
    stack = np.asarray(vectors, dtype=np.float64)
    if stack.ndim != 2 or stack.shape[0] == 0:
        raise ValueError("need a non-empty collection of 1-D vectors")
    count = stack.shape[0]
    if divisor == "count":
        denom = count
    elif divisor == "count_minus_one":
        if count < 2:
            raise ValueError("count_minus_one needs at least two vectors")
        denom = count - 1
    else:
        raise ValueError(f"unknown divisor {divisor!r}")
    dev = stack - stack.mean(axis=0)
    return np.sum(dev * dev, axis=0) / denom


@dataclass(frozen=True)
class RngStream:
    """Independent random stream keyed by ``(seed, stream_id)``.

    The stream is derived with ``SeedSequence(seed, spawn_key=(stream_id,))``
    so it does not depend on how many other streams exist.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if self.stream_id < 0:
            raise ValueError("stream_id must be non-negative")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))


def stack_vectors(vectors: Iterable[ParamVector]) -> np.ndarray:
    return np.vstack([as_vector(v) for v in vectors])
