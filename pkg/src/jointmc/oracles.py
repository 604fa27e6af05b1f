"""Regression oracles: ridge/OLS with min-norm fallback and an environment classifier."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp, softmax

from .core import DataError, Dataset, LinearPredictor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OlsSolution:
    coeffs: np.ndarray
    intercept: float
    rss: float
    rank: int
    rank_deficient: bool
    cond: float

    def predictor(self, clamp=None) -> LinearPredictor:
        return LinearPredictor(self.coeffs, self.intercept, clamp)


def ols_fit(X: np.ndarray, y: np.ndarray, ridge_lambda: float = 0.0) -> OlsSolution:
    """Minimize ``||y - X b - c||^2 + ridge_lambda * ||b||^2`` over ``(b, c)``.

    The intercept is never penalized. Rank-deficient problems get the
    minimum-norm ``b`` (SVD based, via ``lstsq``).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if n < 1 or y.shape[0] != n:
        raise DataError(f"ols_fit: X has {n} rows, y has {y.shape[0]}")
    if ridge_lambda < 0:
        raise DataError("ridge_lambda must be nonnegative")
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    yc = y - y_mean
    if ridge_lambda > 0:
        A = np.vstack([Xc, np.sqrt(ridge_lambda) * np.eye(d)])
        b = np.concatenate([yc, np.zeros(d)])
    else:
        A, b = Xc, yc
    coeffs, _, rank, sv = np.linalg.lstsq(A, b, rcond=None)
    intercept = float(y_mean - x_mean @ coeffs)
    resid = y - X @ coeffs - intercept
    smin = sv[-1] if sv.size else 0.0
    cond = float(sv[0] / smin) if sv.size and smin > 0 else float("inf")
    return OlsSolution(coeffs, intercept, float(resid @ resid), int(rank), int(rank) < d, cond)


# ---------------------------------------------------------------------------
# Environment classifier
# ---------------------------------------------------------------------------

FEATURE_MAPS = ("linear", "quadratic")


def _expand(Z: np.ndarray, feature_map: str) -> np.ndarray:
    if feature_map == "linear":
        cols = [Z]
    elif feature_map == "quadratic":
        i, j = np.triu_indices(Z.shape[1])
        cols = [Z, Z[:, i] * Z[:, j]]
    else:
        raise DataError(f"unknown feature map {feature_map!r}")
    return np.hstack([np.ones((Z.shape[0], 1))] + cols)


@dataclass(frozen=True)
class EnvClassifier:
    """Multinomial logistic model for ``p(e | x, y)``.

    ``weights`` has one column per environment over the expanded (x, y)
    features; the last column is pinned at zero (reference class).
    """

    weights: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    feature_map: str = "quadratic"
    converged: bool = True
    grad_inf_norm: float = 0.0
    n_iter: int = 0

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]

    def design(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        Z = np.column_stack([np.asarray(X, dtype=float), np.asarray(y, dtype=float).reshape(-1)])
        if Z.shape[1] != self.center.shape[0]:
            raise DataError(f"classifier expects {self.center.shape[0] - 1} features, got {Z.shape[1] - 1}")
        return _expand((Z - self.center) / self.scale, self.feature_map)

    def predict_proba(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        return softmax(self.design(X, y) @ self.weights, axis=1)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "feature_map": self.feature_map,
            "converged": self.converged,
            "grad_inf_norm": self.grad_inf_norm,
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EnvClassifier":
        return cls(
            np.asarray(obj["weights"], dtype=float),
            np.asarray(obj["center"], dtype=float),
            np.asarray(obj["scale"], dtype=float),
            obj.get("feature_map", "quadratic"),
            bool(obj.get("converged", True)),
            float(obj.get("grad_inf_norm", 0.0)),
            int(obj.get("n_iter", 0)),
        )


class _LogisticObjective:
    """Mean multinomial NLL plus ``l2/2 * ||W||^2`` (intercept row unpenalized).

    Parameters are the first ``E-1`` weight columns, flattened column-major
    as ``W[:, :E-1].ravel(order="F")``.
    """

    def __init__(self, Z: np.ndarray, labels: np.ndarray, n_classes: int, l2: float):
        self.Z = Z
        self.n, self.p = Z.shape
        self.E = n_classes
        self.onehot = np.eye(n_classes)[labels]
        self.l2 = l2
        self.pen = np.ones(self.p)
        self.pen[0] = 0.0

    def unpack(self, theta: np.ndarray) -> np.ndarray:
        W = np.zeros((self.p, self.E))
        W[:, : self.E - 1] = theta.reshape(self.p, self.E - 1, order="F")
        return W

    def value(self, theta: np.ndarray) -> float:
        W = self.unpack(theta)
        S = self.Z @ W
        nll = np.mean(logsumexp(S, axis=1) - np.sum(S * self.onehot, axis=1))
        return float(nll + 0.5 * self.l2 * np.sum(self.pen[:, None] * W[:, : self.E - 1] ** 2))

    def probs(self, theta: np.ndarray) -> np.ndarray:
        return softmax(self.Z @ self.unpack(theta), axis=1)

    def grad(self, theta: np.ndarray, P: Optional[np.ndarray] = None) -> np.ndarray:
        if P is None:
            P = self.probs(theta)
        G = self.Z.T @ (P - self.onehot)[:, : self.E - 1] / self.n
        G += self.l2 * self.pen[:, None] * theta.reshape(self.p, self.E - 1, order="F")
        return G.ravel(order="F")

    def hessian(self, P: np.ndarray) -> np.ndarray:
        k = self.E - 1
        H = np.empty((self.p * k, self.p * k))
        for a in range(k):
            for b in range(a, k):
                w = P[:, a] * ((a == b) - P[:, b])
                blk = (self.Z * w[:, None]).T @ self.Z / self.n
                H[a * self.p:(a + 1) * self.p, b * self.p:(b + 1) * self.p] = blk
                H[b * self.p:(b + 1) * self.p, a * self.p:(a + 1) * self.p] = blk.T
        H += self.l2 * np.diag(np.tile(self.pen, k))
        return H


def fit_env_classifier(
    data: Dataset,
    max_iters: int = 200,
    tol: float = 1e-6,
    l2: float = 1e-6,
    feature_map: str = "quadratic",
    method: str = "newton",
) -> EnvClassifier:
    """Fit ``p(e | x, y)`` by full-batch descent with Armijo backtracking.

    ``method="newton"`` uses damped Newton directions, ``"gd"`` plain
    steepest descent. Both start from zero weights and stop once the
    gradient's inf-norm drops below ``tol``.
    """
    if data.envs is None:
        raise DataError("environment labels required to fit an environment classifier")
    E = data.n_envs
    if E < 2:
        raise DataError("need at least two environments")
    if feature_map not in FEATURE_MAPS:
        raise DataError(f"unknown feature map {feature_map!r}")
    if method not in ("newton", "gd"):
        raise DataError(f"unknown method {method!r}")

    Zraw = np.column_stack([data.features, data.targets])
    center = Zraw.mean(axis=0)
    scale = Zraw.std(axis=0)
    scale[scale == 0] = 1.0
    Z = _expand((Zraw - center) / scale, feature_map)
    obj = _LogisticObjective(Z, data.envs, E, l2)

    theta = np.zeros(obj.p * (E - 1))
    f = obj.value(theta)
    P = obj.probs(theta)
    g = obj.grad(theta, P)
    step = 1.0
    it = 0
    for it in range(1, max_iters + 1):
        if np.max(np.abs(g)) < tol:
            it -= 1
            break
        direction = -g
        if method == "newton":
            try:
                direction = -np.linalg.solve(obj.hessian(P), g)
            except np.linalg.LinAlgError:
                direction = -g
            if direction @ g >= 0:
                direction = -g
            t = 1.0
        else:
            t = min(step * 2.0, 1e6)
        slope = direction @ g
        while True:
            cand = theta + t * direction
            f_new = obj.value(cand)
            if f_new <= f + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-16:
                break
        if t < 1e-16:
            logger.warning("line search failed at iteration %d", it)
            break
        step = t
        theta, f = cand, f_new
        P = obj.probs(theta)
        g = obj.grad(theta, P)

    gnorm = float(np.max(np.abs(g)))
    converged = gnorm < tol
    if not converged:
        logger.warning("environment classifier did not converge: grad inf-norm %.3g after %d iterations", gnorm, it)
    return EnvClassifier(obj.unpack(theta), center, scale, feature_map, converged, gnorm, it)


def logistic_objective(data: Dataset, l2: float = 0.0, feature_map: str = "linear") -> _LogisticObjective:
    """Objective used by :func:`fit_env_classifier` on ``data`` (for diagnostics and tests)."""
    Zraw = np.column_stack([data.features, data.targets])
    center = Zraw.mean(axis=0)
    scale = Zraw.std(axis=0)
    scale[scale == 0] = 1.0
    return _LogisticObjective(_expand((Zraw - center) / scale, feature_map), data.envs, data.n_envs, l2)
