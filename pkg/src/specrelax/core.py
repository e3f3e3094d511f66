"""Foundational value types and exact probability utilities.

Everything in this module is either a small immutable value (probability
vectors, feature vectors, grid positions, a counter-based random stream)
or a pure function over those values. All heavier machinery builds on top.
"""

from __future__ import annotations

from bisect import bisect_right
from typing import Iterator, NamedTuple, Sequence

import numpy as np

TokenId = int

# Absolute tolerance for every probability comparison in the package.
PROB_ATOL = 1e-9
# Vectors with norm at or below this floor cannot enter a cosine.
NORM_FLOOR = 1e-12
# Total excess mass at or below this floor makes a residual degenerate.
RESIDUAL_FLOOR = 1e-12


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class LengthMismatch(EngineError):
    """Two distributions of different vocabulary size were combined."""


class ZeroNormFeature(EngineError):
    """A feature vector with (near-)zero norm reached a cosine computation."""


class DegenerateResidual(EngineError):
    """q - p has no positive part anywhere; there is nothing to correct with."""


class UnknownWindow(EngineError):
    """A tabular model was asked about a context window it does not cover."""


class TooLarge(EngineError):
    """An exact enumeration was requested beyond the configured size guard."""


class VocabExhausted(EngineError):
    """A tree level requests more sibling candidates than the vocabulary holds."""


class NotAPath(EngineError):
    """Nodes handed to a path operation are not an ancestor-linked chain."""


class RowOutOfRange(EngineError):
    """A heatmap export referenced a grid row outside the model's grid."""


class NonFinite(EngineError):
    """A numeric quantity that must be finite was not."""


class ModelFormatError(EngineError):
    """A model file could not be parsed or has an unsupported format version."""


class ConfigError(EngineError):
    """An experiment or CLI configuration is invalid or incomplete."""


class ProbDist:
    """Normalized probability mass over a finite token vocabulary.

    Instances are immutable; helper caches (cdf, sort order) are built lazily
    so that shared rows can be sampled and ranked cheaply in hot loops.
    """

    __slots__ = ("mass", "_cdf", "_order")

    def __init__(self, mass: Sequence[float] | np.ndarray) -> None:
        arr = np.asarray(mass, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("probability mass must be a non-empty 1-d array")
        if not np.all(np.isfinite(arr)):
            raise NonFinite("probability mass contains non-finite entries")
        if np.any(arr < 0.0):
            raise ValueError("probability mass must be non-negative")
        total = float(arr.sum())
        if abs(total - 1.0) > PROB_ATOL:
            raise ValueError(f"probability mass sums to {total!r}, expected 1.0")
        arr = arr.copy()
        arr.flags.writeable = False
        self.mass = arr
        self._cdf: tuple[float, ...] | None = None
        self._order: tuple[int, ...] | None = None

    @classmethod
    def normalized(cls, raw: Sequence[float] | np.ndarray) -> "ProbDist":
        """Build a distribution from non-negative weights, dividing by their sum."""
        arr = np.asarray(raw, dtype=np.float64)
        total = float(arr.sum())
        if not np.isfinite(total) or total <= 0.0:
            raise ValueError("weights must be non-negative with a positive sum")
        return cls(arr / total)

    def __len__(self) -> int:
        return int(self.mass.size)

    def __getitem__(self, token: TokenId) -> float:
        return float(self.mass[token])

    def __iter__(self) -> Iterator[float]:
        return iter(self.mass.tolist())

    def __repr__(self) -> str:
        return f"ProbDist({self.mass.tolist()})"

    def sample(self, rng: "RngStream") -> TokenId:
        """Inverse-CDF draw using one uniform from the stream."""
        if self._cdf is None:
            self._cdf = tuple(np.cumsum(self.mass).tolist())
        r = rng.next_real()
        idx = bisect_right(self._cdf, r)
        if idx >= len(self._cdf):
            # Cumulative rounding left the final cdf entry a hair below 1.
            idx = len(self._cdf) - 1
            while idx > 0 and self.mass[idx] == 0.0:
                idx -= 1
        return idx

    def descending_order(self) -> tuple[int, ...]:
        """Token ids sorted by decreasing mass; ties broken by ascending id."""
        if self._order is None:
            order = np.lexsort((np.arange(self.mass.size), -self.mass))
            self._order = tuple(int(i) for i in order)
        return self._order


class FeatureVec:
    """Real-valued hidden-state vector used for similarity measurements."""

    __slots__ = ("values", "_norm")

    def __init__(self, values: Sequence[float] | np.ndarray) -> None:
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("feature vector must be a non-empty 1-d array")
        if not np.all(np.isfinite(arr)):
            raise NonFinite("feature vector contains non-finite entries")
        arr = arr.copy()
        arr.flags.writeable = False
        self.values = arr
        self._norm: float | None = None

    @property
    def norm(self) -> float:
        if self._norm is None:
            self._norm = float(np.linalg.norm(self.values))
        return self._norm

    def __len__(self) -> int:
        return int(self.values.size)

    def __repr__(self) -> str:
        return f"FeatureVec({self.values.tolist()})"


class GridPos(NamedTuple):
    """Row/column address on an N x N generation grid."""

    row: int
    col: int

    def flatten(self, side: int) -> int:
        return self.row * side + self.col

    @classmethod
    def from_index(cls, index: int, side: int) -> "GridPos":
        if not 0 <= index < side * side:
            raise ValueError(f"sequence index {index} outside {side}x{side} grid")
        row, col = divmod(index, side)
        return cls(row, col)


def cosine_sim(a: FeatureVec, b: FeatureVec) -> float:
    """Cosine of the angle between two feature vectors, clamped to [-1, 1]."""
    na, nb = a.norm, b.norm
    if na <= NORM_FLOOR or nb <= NORM_FLOOR:
        raise ZeroNormFeature(f"cosine undefined for norms ({na!r}, {nb!r})")
    value = float(np.dot(a.values, b.values)) / (na * nb)
    return max(-1.0, min(1.0, value))


def tvd(a: ProbDist, b: ProbDist) -> float:
    """Total variation distance: half the L1 distance between mass vectors."""
    if len(a) != len(b):
        raise LengthMismatch(f"distributions of size {len(a)} and {len(b)}")
    return 0.5 * float(np.abs(a.mass - b.mass).sum())


def residual_dist(q: ProbDist, p: ProbDist) -> ProbDist:
    """Renormalized positive part of q - p, the correction law on rejection."""
    if len(q) != len(p):
        raise LengthMismatch(f"distributions of size {len(q)} and {len(p)}")
    excess = np.maximum(q.mass - p.mass, 0.0)
    total = float(excess.sum())
    if total <= RESIDUAL_FLOOR:
        raise DegenerateResidual("q and p coincide; residual mass is zero")
    return ProbDist(excess / total)


_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(base: int, index: int) -> int:
    """Deterministic child seed for sub-streams (per sequence, per worker)."""
    return _mix64((_mix64(base & _MASK64) + ((index & _MASK64) * _GAMMA)) & _MASK64)


class RngStream:
    """Counter-based uniform stream owned by exactly one generation session.

    Draw i is a pure function of (seed, i), so a stream can be replayed or
    resumed from any counter value and never depends on traversal order.
    """

    __slots__ = ("seed", "counter", "_key")

    def __init__(self, seed: int, counter: int = 0) -> None:
        self.seed = seed & _MASK64
        self.counter = counter
        self._key = _mix64(self.seed)

    def next_real(self) -> float:
        """Next uniform double in [0, 1)."""
        self.counter += 1
        z = (self._key + (self.counter * _GAMMA & _MASK64)) & _MASK64
        return (_mix64(z) >> 11) * 1.1102230246251565e-16  # 2**-53

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"
