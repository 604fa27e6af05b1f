"""Closed-form analysis of MC-Pseudolabel on jointly Gaussian (Phi, Psi, Y).

Covariances are ordered as (Phi dims, Psi dims, Y). All inverses go through
Cholesky solves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .core import DataError, NumericalError


@dataclass(frozen=True)
class BlockCov:
    Sigma: np.ndarray
    d_phi: int
    d_psi: int

    def __post_init__(self):
        S = np.array(self.Sigma, dtype=float)
        d = self.d_phi + self.d_psi
        if self.d_phi < 1 or self.d_psi < 1:
            raise DataError("d_phi and d_psi must both be positive")
        if S.shape != (d + 1, d + 1):
            raise DataError(f"Sigma must be {(d + 1, d + 1)}, got {S.shape}")
        if not np.all(np.isfinite(S)):
            raise DataError("Sigma must be finite")
        if np.max(np.abs(S - S.T)) > 1e-12 * max(1.0, np.max(np.abs(S))):
            raise DataError("Sigma is not symmetric")
        S = 0.5 * (S + S.T)
        _chol(S)
        S.setflags(write=False)
        object.__setattr__(self, "Sigma", S)

    @classmethod
    def from_matrix(cls, Sigma, d_phi: int) -> "BlockCov":
        Sigma = np.asarray(Sigma, dtype=float)
        return cls(Sigma, d_phi, Sigma.shape[0] - 1 - d_phi)

    @property
    def d(self) -> int:
        return self.d_phi + self.d_psi

    @property
    def phi(self) -> slice:
        return slice(0, self.d_phi)

    @property
    def psi(self) -> slice:
        return slice(self.d_phi, self.d)

    @property
    def yi(self) -> int:
        return self.d

    def block(self, rows, cols) -> np.ndarray:
        S = self.Sigma
        r = _idx(self, rows)
        c = _idx(self, cols)
        return S[np.ix_(r, c)]


def _idx(cov: BlockCov, name: str) -> np.ndarray:
    parts = {"phi": np.arange(cov.d_phi), "psi": np.arange(cov.d_phi, cov.d), "y": np.array([cov.d])}
    return np.concatenate([parts[p] for p in name.split("+")])


def _chol(S: np.ndarray):
    try:
        return cho_factor(S, lower=True)
    except LinAlgError as exc:
        raise NumericalError("matrix is not positive definite") from exc


def _solve(S: np.ndarray, B: np.ndarray) -> np.ndarray:
    return cho_solve(_chol(S), B)


@dataclass(frozen=True)
class RegressionStars:
    """Population regression coefficients.

    ``E[Y | Phi, Psi] = alpha_phi.Phi + alpha_psi.Psi`` and
    ``E[Psi | Phi, Y] = beta_phi^T Phi + beta_y^T Y``.
    """

    alpha_phi: np.ndarray  # (d_phi,)
    alpha_psi: np.ndarray  # (d_psi,)
    beta_phi: np.ndarray  # (d_phi, d_psi)
    beta_y: np.ndarray  # (1, d_psi)


def compute_stars(cov: BlockCov) -> RegressionStars:
    alpha = _solve(cov.block("phi+psi", "phi+psi"), cov.block("phi+psi", "y")).reshape(-1)
    beta = _solve(cov.block("phi+y", "phi+y"), cov.block("phi+y", "psi"))
    return RegressionStars(alpha[: cov.d_phi], alpha[cov.d_phi:], beta[: cov.d_phi], beta[cov.d_phi:])


def target_coeffs(cov: BlockCov) -> np.ndarray:
    """Coefficients of ``E[Y | Phi]``."""
    return _solve(cov.block("phi", "phi"), cov.block("phi", "y")).reshape(-1)


def M_schur(cov: BlockCov) -> float:
    """Convergence rate from the Schur-complement formula."""
    Spp = cov.block("phi", "phi")
    S_py = cov.block("phi", "y")
    S_pq = cov.block("phi", "psi")
    S_qq = cov.block("psi", "psi")
    S_qy = cov.block("psi", "y")
    S_yy = cov.block("y", "y")
    inv_py = _solve(Spp, S_py)
    inv_pq = _solve(Spp, S_pq)
    s_yy = (S_yy - S_py.T @ inv_py).item()
    s_qy = S_qy - S_pq.T @ inv_py  # (d_psi, 1)
    s_qq = S_qq - S_pq.T @ inv_pq
    return (s_qy.T @ _solve(s_qq, s_qy)).item() / s_yy


def compute_M(cov: BlockCov, check_tol: float = 1e-10) -> float:
    """Rate ``M = beta_y . alpha_psi``, cross-checked against the Schur formula."""
    stars = compute_stars(cov)
    M = (stars.beta_y @ stars.alpha_psi).item()
    M_alt = M_schur(cov)
    if abs(M - M_alt) > check_tol:
        raise NumericalError(f"rate formulas disagree: {M!r} vs {M_alt!r}")
    if not (-check_tol <= M < 1.0):
        raise NumericalError(f"rate {M!r} outside [0, 1)")
    return max(M, 0.0)


def iteration_matrix(cov: BlockCov, stars: RegressionStars | None = None) -> np.ndarray:
    stars = stars or compute_stars(cov)
    top = np.hstack([np.eye(cov.d_phi), stars.beta_phi + np.outer(stars.alpha_phi, stars.beta_y)])
    bottom = np.hstack([np.zeros((cov.d_psi, cov.d_phi)), np.outer(stars.alpha_psi, stars.beta_y)])
    return np.vstack([top, bottom])


def hat_iteration(cov: BlockCov, T: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Unnormalized population coefficients ``(alpha_phi^(t), alpha_psi^(t))`` for ``t = 0..T``."""
    if T < 0:
        raise ValueError("T must be nonnegative")
    stars = compute_stars(cov)
    A = iteration_matrix(cov, stars)
    z = np.concatenate([stars.alpha_phi, stars.alpha_psi])
    out = [(z[: cov.d_phi].copy(), z[cov.d_phi:].copy())]
    for _ in range(T):
        z = A @ z
        out.append((z[: cov.d_phi].copy(), z[cov.d_phi:].copy()))
    return out


def psi_log_norms(cov: BlockCov, T: int) -> np.ndarray:
    """``log ||alpha_psi^(t)||`` for ``t = 0..T`` via a normalized power iteration.

    The plain iterates underflow once ``M^t`` drops below the double range;
    carrying the scale as a logarithm keeps norms and ratios exact to
    rounding. A vanishing block gives ``-inf``.
    """
    if T < 0:
        raise ValueError("T must be nonnegative")
    stars = compute_stars(cov)
    K = np.outer(stars.alpha_psi, stars.beta_y)
    out = np.full(T + 1, -np.inf)
    n0 = float(np.linalg.norm(stars.alpha_psi))
    if n0 == 0:
        return out
    u, log_s = stars.alpha_psi / n0, np.log(n0)
    out[0] = log_s
    for t in range(1, T + 1):
        w = K @ u
        n = float(np.linalg.norm(w))
        if n == 0:
            break
        log_s += np.log(n)
        u = w / n
        out[t] = log_s
    return out


def iteration_table(cov: BlockCov, T: int) -> list[dict]:
    """One row per ``t`` with both coefficient blocks, ``||alpha_psi||`` and its successive ratio."""
    logs = psi_log_norms(cov, T)
    rows = []
    for t, (a_phi, a_psi) in enumerate(hat_iteration(cov, T)):
        if t == 0 or not np.isfinite(logs[t - 1]):
            ratio = float("nan")
        else:
            ratio = float(np.exp(logs[t] - logs[t - 1]))
        rows.append({"t": t, "psi_norm": float(np.exp(logs[t])), "ratio": ratio,
                     **{f"alpha_phi{j + 1}": float(v) for j, v in enumerate(a_phi)},
                     **{f"alpha_psi{j + 1}": float(v) for j, v in enumerate(a_psi)}})
    return rows


def random_cov(d: int, d_phi: int, rng: np.random.Generator, ridge: float | None = None) -> BlockCov:
    """Wishart-style ``A A^T / (d+1) + ridge I`` covariance of size ``d + 1``."""
    A = rng.standard_normal((d + 1, d + 1))
    S = A @ A.T / (d + 1) + (1.0 if ridge is None else ridge) * np.eye(d + 1)
    return BlockCov(0.5 * (S + S.T), d_phi, d - d_phi)
