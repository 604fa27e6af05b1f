"""Equal-interval discretization of continuous predictors into level sets."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import DataError

logger = logging.getLogger(__name__)

DEGENERATE_RANGE = 1e-12


@dataclass(frozen=True)
class BinSpec:
    """``m`` equal-width bins over ``[lo, hi]`` represented by their midpoints.

    Values outside the range clamp to the end bins; a value on an interior
    boundary belongs to the higher bin.
    """

    m: int
    lo: float
    hi: float
    degenerate: bool = False

    def __post_init__(self):
        if self.m < 1:
            raise DataError("bin count must be positive")
        if not self.lo <= self.hi:
            raise DataError(f"invalid bin range [{self.lo}, {self.hi}]")
        if self.m > 1 and self.hi - self.lo < DEGENERATE_RANGE:
            raise DataError("a degenerate range admits only a single bin")

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.m

    @property
    def representatives(self) -> np.ndarray:
        if self.hi - self.lo < DEGENERATE_RANGE:
            return np.array([0.5 * (self.lo + self.hi)])
        return self.lo + (np.arange(self.m) + 0.5) * (self.hi - self.lo) / self.m

    def assign(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if self.m == 1:
            return np.zeros(values.shape, dtype=np.int64)
        idx = np.floor((values - self.lo) * (self.m / (self.hi - self.lo)))
        return np.clip(idx, 0, self.m - 1).astype(np.int64)

    def to_dict(self) -> dict:
        return {"m": self.m, "lo": self.lo, "hi": self.hi, "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, obj: dict) -> "BinSpec":
        return cls(int(obj["m"]), float(obj["lo"]), float(obj["hi"]), bool(obj.get("degenerate", False)))


@dataclass(frozen=True)
class LevelPartition:
    """Assignment of n samples to ``len(values)`` level sets.

    ``values[k]`` is the prediction on level set ``k``. ``spec`` is set when
    the partition comes from a :class:`BinSpec` grid.
    """

    assignment: np.ndarray
    values: np.ndarray
    spec: Optional[BinSpec] = None

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        v = np.asarray(self.values, dtype=float)
        if a.ndim != 1 or v.ndim != 1:
            raise DataError("assignment and values must be vectors")
        if a.size and (a.min() < 0 or a.max() >= v.size):
            raise DataError("assignment index out of range")
        a.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.assignment.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.m)

    @property
    def masses(self) -> np.ndarray:
        return self.counts / self.n

    def rounded(self) -> np.ndarray:
        return self.values[self.assignment]

    def subset(self, mask: np.ndarray) -> "LevelPartition":
        """Same levels restricted to the selected rows (e.g. one environment)."""
        return LevelPartition(self.assignment[mask], self.values, self.spec)


def _coverage(sorted_u: np.ndarray, m: int, min_bin_count: int) -> float:
    # sorted_u holds predictions mapped to [0, 1]; bin k is [k/m, (k+1)/m)
    edges = np.searchsorted(sorted_u, np.arange(1, m) / m, side="left")
    counts = np.diff(np.concatenate(([0], edges, [sorted_u.size])))
    return counts[counts >= min_bin_count].sum() / sorted_u.size


def choose_bins(
    predictions: np.ndarray,
    min_bins: int = 10,
    min_bin_count: int = 30,
    coverage_fraction: float = 0.9,
    max_bins: Optional[int] = None,
) -> BinSpec:
    """Pick the bin count by growing ``m`` one at a time from ``min_bins``.

    The returned ``m`` is the last one for which at least
    ``coverage_fraction`` of the samples sit in bins holding
    ``min_bin_count`` or more samples. A constant input yields a single
    degenerate bin.
    """
    p = np.asarray(predictions, dtype=float).reshape(-1)
    if p.size == 0 or not np.all(np.isfinite(p)):
        raise DataError("predictions must be finite and non-empty")
    lo, hi = float(p.min()), float(p.max())
    if hi - lo < DEGENERATE_RANGE:
        logger.warning("constant predictor: using a single degenerate bin")
        return BinSpec(1, lo, hi, degenerate=True)
    if p.size < min_bin_count:
        raise DataError(f"insufficient samples: n={p.size} < min_bin_count={min_bin_count}")
    if max_bins is None:
        max_bins = max(min_bins, p.size)

    # same arithmetic as BinSpec.assign, so the criterion matches the final assignment
    def covered(m: int) -> bool:
        spec = BinSpec(m, lo, hi)
        counts = np.bincount(spec.assign(p), minlength=m)
        return counts[counts >= min_bin_count].sum() >= coverage_fraction * p.size

    if not covered(min_bins):
        raise DataError(
            f"insufficient samples: fewer than {coverage_fraction:.0%} of samples lie in bins "
            f"with >= {min_bin_count} samples at m={min_bins}"
        )
    # Sorted fast path guesses the stopping point; it is accepted only if the
    # exact check agrees on every m up to it, otherwise fall back to a plain scan.
    u = np.sort((p - lo) / (hi - lo))
    guess = min_bins
    while guess < max_bins and _coverage(u, guess + 1, min_bin_count) >= coverage_fraction:
        guess += 1
    stop_ok = guess == max_bins or not covered(guess + 1)
    if stop_ok and covered(guess) and all(covered(k) for k in _spot_checks(min_bins, guess)):
        return BinSpec(guess, lo, hi)
    m = min_bins
    while m < max_bins and covered(m + 1):
        m += 1
    return BinSpec(m, lo, hi)


def _spot_checks(lo: int, hi: int, k: int = 16) -> list[int]:
    return sorted(set(np.linspace(lo, hi, num=min(k, hi - lo + 1)).astype(int).tolist()))


def round_predictions(predictions: np.ndarray, spec: BinSpec) -> tuple[np.ndarray, LevelPartition]:
    """Replace each prediction by its bin midpoint."""
    p = np.asarray(predictions, dtype=float).reshape(-1)
    if not np.all(np.isfinite(p)):
        raise DataError("predictions must be finite")
    part = LevelPartition(spec.assign(p), spec.representatives, spec)
    return part.rounded(), part


def level_sets(predictions: np.ndarray) -> LevelPartition:
    """Exact level sets of a finite-range predictor (no rounding)."""
    p = np.asarray(predictions, dtype=float).reshape(-1)
    if not np.all(np.isfinite(p)):
        raise DataError("predictions must be finite")
    values, assignment = np.unique(p, return_inverse=True)
    if values.size > max(1, p.size // 2):
        logger.warning("predictor has %d distinct values on %d samples; level sets are tiny", values.size, p.size)
    return LevelPartition(assignment.reshape(-1), values)
