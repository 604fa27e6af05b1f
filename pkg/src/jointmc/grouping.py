"""Grouping-function bases and per-level-set regression on them.

A grouping function is a linear combination of basis columns evaluated on
``(x, y)``; a fitted grouping holds one coefficient vector per level set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import DataError, Dataset, LinearPredictor
from .discretize import LevelPartition
from .oracles import EnvClassifier, ols_fit

KINDS = ("environment", "hard_sample", "raw_linear", "constant")


@dataclass(frozen=True)
class GroupingBasis:
    """Basis of grouping functions ``phi_j(x, y)``.

    ``features`` evaluates the non-constant columns; ``include_constant``
    adds the constant function as an unpenalized per-level-set intercept.
    ``params`` holds whatever is needed to rebuild the basis from JSON.
    """

    kind: str
    features: Callable[[np.ndarray, np.ndarray], np.ndarray]
    include_constant: bool
    names: tuple[str, ...] = ()
    params: dict = field(default_factory=dict)

    def evaluate(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        F = np.asarray(self.features(np.asarray(X, dtype=float), np.asarray(y, dtype=float)), dtype=float)
        if F.ndim == 1:
            F = F[:, None]
        if not np.all(np.isfinite(F)):
            raise DataError(f"{self.kind} basis produced non-finite values")
        return F

    def matrix(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Evaluation matrix, with a trailing column of ones when the constant is included."""
        F = self.evaluate(X, y)
        if self.include_constant:
            F = np.column_stack([F, np.ones(F.shape[0])])
        return F

    @property
    def spans_constant(self) -> bool:
        return self.include_constant or self.kind == "environment"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "include_constant": self.include_constant, "names": list(self.names), **self.params}

    @classmethod
    def from_dict(cls, obj: dict) -> "GroupingBasis":
        kind = obj["kind"]
        if kind == "environment":
            return env_basis(EnvClassifier.from_dict(obj["classifier"]))
        if kind == "hard_sample":
            return jtt_basis(LinearPredictor.from_dict(obj["f_id"]))
        if kind == "raw_linear":
            return linear_basis_from_params(int(obj["d_phi"]), np.asarray(obj["beta"], dtype=float),
                                            np.asarray(obj["offset"], dtype=float))
        if kind == "constant":
            return constant_basis()
        raise DataError(f"unknown basis kind {kind!r}")


def constant_basis() -> GroupingBasis:
    return GroupingBasis("constant", lambda X, y: np.zeros((X.shape[0], 0)), True, ())


def env_basis(classifier: EnvClassifier) -> GroupingBasis:
    """Span of environment posteriors ``p(e | x, y)``.

    Posteriors sum to one, so the constant is already in the span and no
    separate intercept is added.
    """
    names = tuple(f"p_env{e}" for e in range(classifier.n_classes))
    return GroupingBasis("environment", classifier.predict_proba, False, names,
                         {"classifier": classifier.to_dict()})


def jtt_basis(f_id: LinearPredictor) -> GroupingBasis:
    """Squared residual of a reference model plus the constant."""
    def feats(X, y):
        return ((f_id(X) - y) ** 2)[:, None]

    return GroupingBasis("hard_sample", feats, True, ("sq_residual",), {"f_id": f_id.to_dict()})


def linear_basis_from_params(d_phi: int, beta: np.ndarray, offset: np.ndarray) -> GroupingBasis:
    beta = np.atleast_2d(beta)

    def feats(X, y):
        if X.shape[1] <= d_phi:
            raise DataError(f"raw_linear basis needs more than d_phi={d_phi} columns")
        Z = np.column_stack([X[:, :d_phi], y])
        return X[:, d_phi:] - Z @ beta - offset

    d_psi = beta.shape[1]
    return GroupingBasis("raw_linear", feats, True, tuple(f"psi_resid{j + 1}" for j in range(d_psi)),
                         {"d_phi": d_phi, "beta": beta.tolist(), "offset": np.asarray(offset).tolist()})


def linear_basis(data: Dataset, d_phi: int, cov=None) -> GroupingBasis:
    """Linear grouping functions ``c_x.x + c_y y + c_b`` whose mean given (Phi, Y) is constant.

    Feature columns ``0..d_phi-1`` are Phi and the rest Psi. The admissible
    non-constant directions are the residuals of Psi after linear regression
    on (Phi, Y). The regression comes from ``cov`` (a BlockCov) when given,
    otherwise from OLS on ``data``.
    """
    X, y = data.features, data.targets
    if not 1 <= d_phi < data.d:
        raise DataError(f"d_phi must lie in 1..{data.d - 1}")
    if cov is not None:
        from .gaussian import compute_stars

        stars = compute_stars(cov)
        beta = np.vstack([stars.beta_phi, stars.beta_y])
        offset = np.zeros(data.d - d_phi)
    else:
        Z = np.column_stack([X[:, :d_phi], y])
        beta = np.empty((d_phi + 1, data.d - d_phi))
        offset = np.empty(data.d - d_phi)
        for j in range(data.d - d_phi):
            sol = ols_fit(Z, X[:, d_phi + j])
            beta[:, j] = sol.coeffs
            offset[j] = sol.intercept
    return linear_basis_from_params(d_phi, beta, offset)


def build_env_basis(classifier: EnvClassifier, data: Dataset) -> np.ndarray:
    return env_basis(classifier).matrix(data.features, data.targets)


def build_jtt_basis(f_id: LinearPredictor, data: Dataset) -> np.ndarray:
    return jtt_basis(f_id).matrix(data.features, data.targets)


def density_ratio_columns(classifier: EnvClassifier, data: Dataset, priors: np.ndarray) -> np.ndarray:
    """``p(e | x, y) / p(e)`` per environment: the density ratio of each environment to the pool."""
    return classifier.predict_proba(data.features, data.targets) / np.asarray(priors)[None, :]


# ---------------------------------------------------------------------------
# Level-set regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FittedGrouping:
    """Per-level-set coefficients; unfitted (empty) level sets emit their value ``v``."""

    coefs: np.ndarray
    intercepts: np.ndarray
    fitted: np.ndarray
    cond: np.ndarray
    include_constant: bool

    @property
    def m(self) -> int:
        return self.coefs.shape[0]

    @property
    def lambdas(self) -> list[Optional[list[float]]]:
        out = []
        for k in range(self.m):
            if not self.fitted[k]:
                out.append(None)
            elif self.include_constant:
                out.append(self.coefs[k].tolist() + [float(self.intercepts[k])])
            else:
                out.append(self.coefs[k].tolist())
        return out

    def to_dict(self) -> dict:
        return {
            "include_constant": self.include_constant,
            "lambdas": self.lambdas,
            "cond": [None if not np.isfinite(c) else float(c) for c in self.cond],
        }


def _bin_sums(assignment: np.ndarray, weights: np.ndarray, m: int) -> np.ndarray:
    return np.bincount(assignment, weights=weights, minlength=m)


def fit_on_levelsets(
    basis_matrix: np.ndarray,
    y: np.ndarray,
    partition: LevelPartition,
    ridge_lambda: float = 0.0,
    include_constant: bool = False,
) -> FittedGrouping:
    """Least-squares regression of ``y`` on the basis within every level set.

    With ``include_constant`` each level set also gets an unpenalized
    intercept. ``ridge_lambda * I`` is added to the (centred) normal matrix.
    Singular or under-determined level sets receive the minimum-norm
    solution; all level sets are solved together as a stack.
    """
    A = np.asarray(basis_matrix, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    y = np.asarray(y, dtype=float).reshape(-1)
    if A.shape[0] != partition.n or y.shape[0] != partition.n:
        raise DataError("basis, targets and partition lengths differ")
    if ridge_lambda < 0:
        raise DataError("ridge_lambda must be nonnegative")
    a, m = partition.assignment, partition.m
    n, J = A.shape
    counts = partition.counts
    nonempty = counts > 0
    safe = np.where(nonempty, counts, 1)

    if include_constant:
        meanA = np.column_stack([_bin_sums(a, A[:, j], m) for j in range(J)]) / safe[:, None] if J else np.zeros((m, 0))
        meany = _bin_sums(a, y, m) / safe
        Ac = A - meanA[a]
        yc = y - meany[a]
    else:
        Ac, yc = A, y

    G = np.zeros((m, J, J))
    r = np.zeros((m, J))
    for i in range(J):
        r[:, i] = _bin_sums(a, Ac[:, i] * yc, m)
        for j in range(i, J):
            G[:, i, j] = G[:, j, i] = _bin_sums(a, Ac[:, i] * Ac[:, j], m)
    G += ridge_lambda * np.eye(J)

    coefs = np.zeros((m, J))
    cond = np.full(m, np.inf)
    if J:
        w, V = np.linalg.eigh(G)
        wmax = np.max(np.abs(w), axis=1)
        tol = np.maximum(wmax * J * np.finfo(float).eps, 1e-300)
        keep = w > tol[:, None]
        inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
        coefs = np.einsum("mij,mj,mkj,mk->mi", V, inv, V, r)
        full = keep.all(axis=1)
        cond = np.where(full, wmax / np.where(full, w[:, 0], 1.0), np.inf)
    intercepts = meany - np.einsum("mj,mj->m", meanA, coefs) if include_constant else np.zeros(m)
    coefs[~nonempty] = 0.0
    intercepts[~nonempty] = 0.0
    return FittedGrouping(coefs, intercepts, nonempty, cond, include_constant)


def eval_pseudolabels(fitted: FittedGrouping, basis_matrix: np.ndarray, partition: LevelPartition) -> np.ndarray:
    """Evaluate each row's level-set grouping function; empty level sets emit ``v``."""
    A = np.asarray(basis_matrix, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if partition.m != fitted.m or A.shape[1] != fitted.coefs.shape[1] or A.shape[0] != partition.n:
        raise DataError("partition or basis does not match the fitted grouping")
    a = partition.assignment
    out = np.einsum("ij,ij->i", A, fitted.coefs[a]) + fitted.intercepts[a]
    unfit = ~fitted.fitted[a]
    out[unfit] = partition.values[a[unfit]]
    return out
