"""Shared domain types, errors and CSV I/O for datasets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

TARGET_COLUMN = "y"


class DataError(ValueError):
    """Invalid or inconsistent input data."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (non-PD matrix, failed identity check, ...)."""


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, target vector and optional environment labels."""

    features: np.ndarray
    targets: np.ndarray
    envs: Optional[np.ndarray] = None
    names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        X = np.array(self.features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.array(self.targets, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError(f"features must be a non-empty n x d matrix, got shape {X.shape}")
        if y.shape[0] != X.shape[0]:
            raise DataError(f"targets length {y.shape[0]} != feature rows {X.shape[0]}")
        if not np.all(np.isfinite(X)):
            raise DataError("non-finite feature")
        if not np.all(np.isfinite(y)):
            raise DataError("non-finite target")
        envs = self.envs
        if envs is not None:
            envs = np.array(envs).reshape(-1)
            if envs.shape[0] != X.shape[0]:
                raise DataError("envs length does not match number of rows")
            if not np.issubdtype(envs.dtype, np.integer):
                if not np.all(np.mod(envs, 1) == 0):
                    raise DataError("environment labels must be integers")
            envs = envs.astype(np.int64)
            labels = np.unique(envs)
            if labels[0] != 0 or labels[-1] != len(labels) - 1:
                raise DataError(f"environment labels must be contiguous 0..E-1, got {labels.tolist()}")
        names = self.names
        if names is not None:
            names = tuple(str(s) for s in names)
            if len(names) != X.shape[1]:
                raise DataError("names must match the number of feature columns")
        for arr in (X, y) + ((envs,) if envs is not None else ()):
            arr.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "envs", envs)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_envs(self) -> int:
        return 0 if self.envs is None else int(self.envs.max()) + 1

    def subset(self, mask: np.ndarray) -> "Dataset":
        return Dataset(
            self.features[mask],
            self.targets[mask],
            None if self.envs is None else self.envs[mask],
            self.names,
        )


@dataclass(frozen=True)
class LinearPredictor:
    """Affine predictor ``coeffs @ x + intercept`` with optional output clamp.

    ``bin_spec`` (a :class:`jointmc.discretize.BinSpec`) turns the model into
    its rounded, finite-range version: outputs are replaced by the nearest
    grid representative after clamping.
    """

    coeffs: np.ndarray
    intercept: float = 0.0
    clamp: Optional[tuple[float, float]] = None
    bin_spec: Optional[object] = None

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).reshape(-1)
        if not np.all(np.isfinite(c)) or not math.isfinite(self.intercept):
            raise NumericalError("predictor coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "intercept", float(self.intercept))
        if self.clamp is not None:
            lo, hi = (float(v) for v in self.clamp)
            if not lo <= hi:
                raise DataError(f"invalid clamp interval {self.clamp}")
            object.__setattr__(self, "clamp", (lo, hi))

    @property
    def d(self) -> int:
        return self.coeffs.shape[0]

    def raw(self, X: np.ndarray) -> np.ndarray:
        """Affine output with clamp, before any rounding."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.d:
            raise DataError(f"dimension mismatch: model expects d={self.d}, data has shape {X.shape}")
        out = X @ self.coeffs + self.intercept
        if self.clamp is not None:
            out = np.clip(out, *self.clamp)
        return out

    def __call__(self, X: np.ndarray) -> np.ndarray:
        out = self.raw(X)
        if self.bin_spec is not None:
            out = self.bin_spec.representatives[self.bin_spec.assign(out)]
        return out

    def unrounded(self) -> "LinearPredictor":
        return LinearPredictor(self.coeffs, self.intercept, self.clamp)

    def to_dict(self) -> dict:
        return {
            "coeffs": self.coeffs.tolist(),
            "intercept": self.intercept,
            "clamp": None if self.clamp is None else list(self.clamp),
            "bin_spec": None if self.bin_spec is None else self.bin_spec.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "LinearPredictor":
        from .discretize import BinSpec

        spec = obj.get("bin_spec")
        clamp = obj.get("clamp")
        return cls(
            np.asarray(obj["coeffs"], dtype=float),
            float(obj.get("intercept", 0.0)),
            None if clamp is None else tuple(clamp),
            None if spec is None else BinSpec.from_dict(spec),
        )


def predict(model: LinearPredictor, data: Dataset) -> np.ndarray:
    return model(data.features)


@dataclass(frozen=True)
class RunConfig:
    """Knobs for one MC-Pseudolabel run.

    ``stop_epsilon=None`` resolves to ``1e-6 * var(y)`` at run time.
    ``strict`` switches the stopping test to "stop only when the gap is
    non-positive" instead of "stop when the gap stops decreasing".
    """

    max_iters: int = 50
    stop_epsilon: Optional[float] = None
    ridge_lambda: float = 0.0
    seed: int = 0
    discretize: bool = True
    min_bins: int = 10
    min_bin_count: int = 30
    coverage_fraction: float = 0.9
    max_bins: Optional[int] = None
    clamp: Optional[tuple[float, float]] = None
    strict: bool = False

    def __post_init__(self):
        if not (isinstance(self.max_iters, (int, np.integer)) and self.max_iters >= 1):
            raise DataError("max_iters must be a positive integer")
        if self.stop_epsilon is not None and not (math.isfinite(self.stop_epsilon) and self.stop_epsilon >= 0):
            raise DataError("stop_epsilon must be finite and nonnegative")
        if not (math.isfinite(self.ridge_lambda) and self.ridge_lambda >= 0):
            raise DataError("ridge_lambda must be finite and nonnegative")
        if self.seed < 0:
            raise DataError("seed must be unsigned")
        if self.min_bins < 1 or self.min_bin_count < 1:
            raise DataError("min_bins and min_bin_count must be positive")
        if not (0 < self.coverage_fraction <= 1):
            raise DataError("coverage_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def _parse_float(cell: str, column: str, row: int) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"non-numeric cell {cell!r} in column {column!r}, row {row}") from None


def load_dataset(path, env_column: Optional[str] = None) -> Dataset:
    """Read a comma-separated table with a header row and a ``y`` column.

    Every other column except ``env_column`` becomes a feature. Environment
    labels may be arbitrary strings; they are mapped to ``0..E-1`` in order
    of first appearance.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")
    if TARGET_COLUMN not in header:
        raise DataError(f"{path}: missing {TARGET_COLUMN!r} column")
    if env_column is not None and env_column not in header:
        raise DataError(f"{path}: missing environment column {env_column!r}")
    y_idx = header.index(TARGET_COLUMN)
    e_idx = header.index(env_column) if env_column is not None else None
    feat_idx = [i for i in range(len(header)) if i not in (y_idx, e_idx)]
    if not feat_idx:
        raise DataError(f"{path}: no feature columns")

    X = np.empty((len(body), len(feat_idx)))
    y = np.empty(len(body))
    env_map: dict[str, int] = {}
    envs = np.empty(len(body), dtype=np.int64) if e_idx is not None else None
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        i = r - 2
        for j, c in enumerate(feat_idx):
            X[i, j] = _parse_float(row[c], header[c], r)
        y[i] = _parse_float(row[y_idx], TARGET_COLUMN, r)
        if e_idx is not None:
            label = row[e_idx].strip()
            envs[i] = env_map.setdefault(label, len(env_map))
    if not np.all(np.isfinite(y)):
        raise DataError(f"{path}: non-finite target")
    if not np.all(np.isfinite(X)):
        raise DataError(f"{path}: non-finite feature")
    return Dataset(X, y, envs, tuple(header[c] for c in feat_idx))


def write_dataset(data: Dataset, path, env_column: str = "env") -> None:
    """Write ``data`` as CSV; floats use ``repr`` so they round-trip exactly."""
    names = data.names or tuple(f"x{j + 1}" for j in range(data.d))
    header = list(names) + [TARGET_COLUMN]
    if data.envs is not None:
        header.append(env_column)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            row = [repr(float(v)) for v in data.features[i]] + [repr(float(data.targets[i]))]
            if data.envs is not None:
                row.append(str(int(data.envs[i])))
            w.writerow(row)


def env_priors(envs: Sequence[int]) -> np.ndarray:
    envs = np.asarray(envs)
    return np.bincount(envs) / envs.shape[0]
