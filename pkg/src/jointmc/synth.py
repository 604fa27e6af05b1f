"""Synthetic data: the multi-environment spurious-feature SCM and Gaussian (Phi, Psi, Y) draws.

Randomness comes from numpy's PCG64 seeded through ``SeedSequence``; the
train and test splits of the SCM use distinct spawn keys of the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky

from .core import DataError, Dataset, NumericalError
from .gaussian import BlockCov

SPLITS = ("train", "test")


def _rng(seed: int, key: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))


@dataclass(frozen=True)
class ScmConfig:
    n_per_env: int = 50000
    alpha_v_train: tuple[float, ...] = (1.25, 0.75)
    alpha_v_test: float = -1.0
    sigma_y: float = 0.5
    sigma_v: float = 0.1
    d_s: int = 9
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "alpha_v_train", tuple(float(a) for a in self.alpha_v_train))
        if self.n_per_env < 1 or self.d_s < 1:
            raise DataError("n_per_env and d_s must be positive")
        if not self.alpha_v_train:
            raise DataError("at least one training environment is required")
        if self.sigma_y < 0 or self.sigma_v < 0:
            raise DataError("noise scales must be nonnegative")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["alpha_v_train"] = list(self.alpha_v_train)
        return d


def _scm_block(rng: np.random.Generator, n: int, alpha_v: float, cfg: ScmConfig) -> tuple[np.ndarray, np.ndarray]:
    S = rng.standard_normal((n, cfg.d_s))
    y = S.sum(axis=1) + cfg.sigma_y * rng.standard_normal(n)
    v = alpha_v * y + cfg.sigma_v * rng.standard_normal(n)
    return np.column_stack([S, v]), y


def generate_scm(cfg: ScmConfig, split: str = "train") -> Dataset:
    """Causal features ``S`` with all-ones weights plus a spurious ``V = alpha_V(e) Y + noise``.

    The train split stacks one block per training environment (labels
    ``0..E-1``); the test split uses ``alpha_v_test`` and has no labels.
    """
    if split not in SPLITS:
        raise DataError(f"split must be one of {SPLITS}")
    rng = _rng(cfg.seed, SPLITS.index(split))
    names = tuple(f"s{j + 1}" for j in range(cfg.d_s)) + ("v",)
    if split == "test":
        X, y = _scm_block(rng, cfg.n_per_env, cfg.alpha_v_test, cfg)
        return Dataset(X, y, None, names)
    blocks = [_scm_block(rng, cfg.n_per_env, a, cfg) for a in cfg.alpha_v_train]
    X = np.vstack([b[0] for b in blocks])
    y = np.concatenate([b[1] for b in blocks])
    envs = np.repeat(np.arange(len(blocks)), cfg.n_per_env)
    return Dataset(X, y, envs, names)


def scm_population_cov(alpha_v: float, cfg: ScmConfig = ScmConfig()) -> np.ndarray:
    """Population covariance of ``(S, V, Y)`` in one environment."""
    d = cfg.d_s
    var_y = d + cfg.sigma_y**2
    C = np.zeros((d + 2, d + 2))
    C[:d, :d] = np.eye(d)
    C[:d, d] = C[d, :d] = alpha_v
    C[:d, d + 1] = C[d + 1, :d] = 1.0
    C[d, d] = alpha_v**2 * var_y + cfg.sigma_v**2
    C[d, d + 1] = C[d + 1, d] = alpha_v * var_y
    C[d + 1, d + 1] = var_y
    return C


def generate_gaussian(cov: BlockCov, mu=None, n: int = 1000, seed: int = 0) -> Dataset:
    """``n`` draws of ``N(mu, Sigma)``; the last coordinate is the target."""
    if n < 1:
        raise DataError("n must be positive")
    D = cov.Sigma.shape[0]
    mu = np.zeros(D) if mu is None else np.asarray(mu, dtype=float).reshape(-1)
    if mu.shape != (D,):
        raise DataError(f"mu must have length {D}")
    try:
        L = cholesky(cov.Sigma, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance is not positive definite") from exc
    Z = _rng(seed).standard_normal((n, D)) @ L.T + mu
    names = tuple(f"phi{j + 1}" for j in range(cov.d_phi)) + tuple(f"psi{j + 1}" for j in range(cov.d_psi))
    return Dataset(Z[:, :-1], Z[:, -1], None, names)
