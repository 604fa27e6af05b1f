"""Plug-in estimators of multicalibration error and the post-processing gap."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import DataError
from .discretize import LevelPartition

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class McReport:
    """Squared (``k2``) and absolute (``k1``) multicalibration error of one grouping function.

    ``moments[k]`` is the sample mean of ``h * (y - v_k)`` on level set ``k``
    (zero for empty level sets, whose mass is zero).
    """

    k2: float
    k1: float
    values: np.ndarray
    masses: np.ndarray
    moments: np.ndarray
    h_sup_sq: float

    @property
    def per_bin(self) -> list[tuple[float, float, float]]:
        return list(zip(self.values.tolist(), self.masses.tolist(), self.moments.tolist()))

    def to_dict(self) -> dict:
        return {
            "k2": self.k2,
            "k1": self.k1,
            "h_sup_sq": self.h_sup_sq,
            "per_bin": [{"v": v, "mass": w, "moment": c} for v, w, c in self.per_bin],
        }


def _check(n: int, *arrays: np.ndarray) -> None:
    for a in arrays:
        if a.shape[0] != n:
            raise DataError(f"length mismatch: expected {n}, got {a.shape[0]}")


def conditional_moments(h_values: np.ndarray, y: np.ndarray, partition: LevelPartition) -> np.ndarray:
    """Per-level-set mean of ``h * (y - v)``; empty level sets give 0."""
    h = np.asarray(h_values, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    _check(partition.n, h, y)
    resid = h * (y - partition.rounded())
    sums = np.bincount(partition.assignment, weights=resid, minlength=partition.m)
    counts = partition.counts
    return np.divide(sums, counts, out=np.zeros(partition.m), where=counts > 0)


def mc_error(h_values: np.ndarray, y: np.ndarray, partition: LevelPartition) -> McReport:
    moments = conditional_moments(h_values, y, partition)
    masses = partition.masses
    h = np.asarray(h_values, dtype=float).reshape(-1)
    return McReport(
        k2=float(np.sum(masses * moments**2)),
        k1=float(np.sum(masses * np.abs(moments))),
        values=partition.values,
        masses=masses,
        moments=moments,
        h_sup_sq=float(np.max(h**2)) if h.size else 0.0,
    )


def bin_means(y: np.ndarray, partition: LevelPartition) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1)
    _check(partition.n, y)
    counts = partition.counts
    sums = np.bincount(partition.assignment, weights=y, minlength=partition.m)
    return np.divide(sums, counts, out=partition.values.astype(float).copy(), where=counts > 0)


def post_processing_gap(predictions_rounded: np.ndarray, y: np.ndarray, partition: LevelPartition) -> float:
    """Squared-loss risk of the predictor minus that of its best post-processing.

    The best post-processing maps each level set to its mean label.
    """
    f = np.asarray(predictions_rounded, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    _check(partition.n, f, y)
    g = bin_means(y, partition)[partition.assignment]
    gap = np.mean((f - y) ** 2) - np.mean((g - y) ** 2)
    return float(max(gap, 0.0))


def _scaled(h: np.ndarray, B: float) -> np.ndarray:
    return h * np.sqrt(B / np.max(h**2))


def mc_error_over_class(
    basis_values: np.ndarray,
    y: np.ndarray,
    partition: LevelPartition,
    B: float,
    n_directions: int = 64,
    seed: int = 0,
) -> float:
    """Lower bound on ``sup k2(h)`` over the span of the basis with ``max h^2 = B``.

    Evaluates every basis column and ``n_directions`` random Gaussian
    combinations, each rescaled so its sample sup of ``h^2`` equals ``B``,
    and returns the largest ``k2`` seen.
    """
    Hm = np.asarray(basis_values, dtype=float)
    if Hm.ndim == 1:
        Hm = Hm[:, None]
    _check(partition.n, Hm, np.asarray(y))
    if B <= 0:
        raise DataError("B must be positive")
    J = Hm.shape[1]
    if n_directions < J:
        raise DataError(f"n_directions={n_directions} must be at least the basis size {J}")
    best = 0.0
    for j in range(J):
        col = Hm[:, j]
        if not np.any(col):
            logger.warning("skipping all-zero basis column %d", j)
            continue
        best = max(best, mc_error(_scaled(col, B), y, partition).k2)
    rng = np.random.default_rng(seed)
    for _ in range(n_directions):
        h = Hm @ rng.standard_normal(J)
        if not np.any(h):
            continue
        best = max(best, mc_error(_scaled(h, B), y, partition).k2)
    return best


def rmse(pred: np.ndarray, y: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    _check(y.shape[0], pred)
    return float(np.sqrt(np.mean((pred - y) ** 2)))
