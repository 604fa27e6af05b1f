"""MC-Pseudolabel: iterative level-set regression on grouping functions with pseudolabel refits."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import DataError, Dataset, LinearPredictor, RunConfig
from .discretize import BinSpec, LevelPartition, choose_bins, level_sets, round_predictions
from .grouping import GroupingBasis, eval_pseudolabels, fit_on_levelsets
from .oracles import ols_fit

logger = logging.getLogger(__name__)

STOP_REASONS = ("gap_nonimproving", "max_iters", "degenerate")


@dataclass(frozen=True)
class IterationRecord:
    t: int
    err: float
    err_tilde: float
    gap: float
    n_levels: int
    coeffs: np.ndarray
    intercept: float
    lambdas: list

    def to_dict(self, with_lambdas: bool = True) -> dict:
        d = {
            "t": self.t,
            "err": self.err,
            "err_tilde": self.err_tilde,
            "gap": self.gap,
            "n_levels": self.n_levels,
            "predictor": {"coeffs": self.coeffs.tolist(), "intercept": self.intercept},
        }
        if with_lambdas:
            d["lambdas"] = self.lambdas
        return d


@dataclass
class RunTrace:
    """Per-iteration history of one run plus its stopping certificate.

    Record ``t`` holds the predictor ``f_t``, the risk ``err`` of its rounded
    version, the risk ``err_tilde`` of the pseudolabels built on its level
    sets and their difference ``gap``.
    """

    iterations: list[IterationRecord] = field(default_factory=list)
    stop_reason: str = ""
    bin_spec: Optional[BinSpec] = None
    stop_epsilon: float = 0.0
    spans_constant: bool = True
    clamp: Optional[tuple[float, float]] = None
    certificate: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def final(self) -> IterationRecord:
        if not self.iterations:
            raise DataError("trace has no completed iteration")
        return self.iterations[-1]

    def to_dict(self, with_lambdas: bool = True) -> dict:
        return {
            "stop_reason": self.stop_reason,
            "bin_spec": None if self.bin_spec is None else self.bin_spec.to_dict(),
            "stop_epsilon": self.stop_epsilon,
            "spans_constant": self.spans_constant,
            "clamp": None if self.clamp is None else list(self.clamp),
            "certificate": self.certificate,
            "config": self.config,
            "iterations": [r.to_dict(with_lambdas) for r in self.iterations],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "err", "err_tilde", "gap", "n_levels", "coef_norm", "intercept"])
            for r in self.iterations:
                w.writerow([r.t, repr(r.err), repr(r.err_tilde), repr(r.gap), r.n_levels,
                            repr(float(np.linalg.norm(r.coeffs))), repr(r.intercept)])


def _levels(pred: np.ndarray, spec: Optional[BinSpec]) -> LevelPartition:
    if spec is None:
        return level_sets(pred)
    return round_predictions(pred, spec)[1]


def natural_B(basis_matrix: np.ndarray) -> float:
    """Largest sample ``h^2`` over the basis columns (each column at its own scale)."""
    H = np.asarray(basis_matrix, dtype=float)
    if H.ndim == 1:
        H = H[:, None]
    return float(np.max(H**2)) if H.size else 1.0


def run(
    data: Dataset,
    basis: GroupingBasis,
    f0: LinearPredictor,
    cfg: RunConfig = RunConfig(),
) -> tuple[LinearPredictor, RunTrace]:
    """Post-process ``f0`` until the pseudolabel gain stops decreasing.

    Returns the predictor of the iteration at which the stopping test fired,
    carrying the bin grid so that calling it yields the rounded outputs.
    The grid is fixed from ``f0``; later predictions outside its range clamp
    to the end bins. With ``cfg.discretize=False`` the exact level sets of
    each (finite-range) predictor are used instead.
    """
    X, y = data.features, data.targets
    if f0.d != data.d:
        raise DataError(f"f0 expects d={f0.d}, data has d={data.d}")
    H = basis.evaluate(X, y)
    eps = cfg.stop_epsilon if cfg.stop_epsilon is not None else 1e-6 * float(np.var(y))
    clamp = cfg.clamp if cfg.clamp is not None else f0.clamp
    trace = RunTrace(stop_epsilon=eps, spans_constant=basis.spans_constant and
                     (cfg.ridge_lambda == 0 or basis.include_constant),
                     clamp=clamp, config=cfg.to_dict())
    trace.config["basis"] = basis.kind

    f = LinearPredictor(f0.coeffs, f0.intercept, clamp)
    spec = None
    if cfg.discretize:
        spec = choose_bins(f.raw(X), cfg.min_bins, cfg.min_bin_count, cfg.coverage_fraction, cfg.max_bins)
        trace.bin_spec = spec
        if spec.degenerate:
            trace.stop_reason = "degenerate"
            return replace(f, bin_spec=spec), trace

    prev_gap = None
    for t in range(cfg.max_iters):
        part = _levels(f.raw(X), spec)
        err = float(np.mean((part.rounded() - y) ** 2))
        fitted = fit_on_levelsets(H, y, part, cfg.ridge_lambda, basis.include_constant)
        pseudo = eval_pseudolabels(fitted, H, part)
        err_tilde = float(np.mean((pseudo - y) ** 2))
        gap = err - err_tilde
        trace.iterations.append(IterationRecord(t, err, err_tilde, gap, int(np.count_nonzero(part.counts)),
                                                f.coeffs, f.intercept, fitted.lambdas))
        logger.info("iter %d: err=%.6g err_tilde=%.6g gap=%.6g", t, err, err_tilde, gap)
        if cfg.strict:
            stop = gap <= 0
        else:
            stop = gap <= eps or (prev_gap is not None and gap >= prev_gap - eps)
        if stop:
            trace.stop_reason = "gap_nonimproving"
            break
        prev_gap = gap
        if t + 1 == cfg.max_iters:
            trace.stop_reason = "max_iters"
            break
        f = ols_fit(X, pseudo, cfg.ridge_lambda).predictor(clamp)

    trace.certificate = certify(trace, basis.matrix(X, y))
    return replace(f, bin_spec=spec), trace


def certify(trace: RunTrace, basis_matrix: np.ndarray, B: Optional[float] = None) -> dict:
    """Multicalibration level certified by the final gap: ``alpha = B * gap``.

    ``B`` defaults to the sample sup of ``h^2`` over the basis columns.
    """
    gap = trace.final.gap
    B = natural_B(basis_matrix) if B is None else float(B)
    # the bound needs the constant in the regression span and a nonnegative gap
    valid = bool(trace.spans_constant and gap >= 0)
    return {"B": B, "alpha": B * gap, "gap": gap, "valid": valid, "B_source": "sample_sup"}


def final_partition(model: LinearPredictor, data: Dataset) -> LevelPartition:
    """Level sets of the returned model on ``data`` (the partition the certificate refers to)."""
    return _levels(model.raw(data.features), model.bin_spec)


def pseudolabels(model: LinearPredictor, data: Dataset, basis: GroupingBasis, ridge_lambda: float = 0.0):
    """One level-set regression step on ``data``; returns (pseudolabels, partition, fitted)."""
    H = basis.evaluate(data.features, data.targets)
    part = final_partition(model, data)
    fitted = fit_on_levelsets(H, data.targets, part, ridge_lambda, basis.include_constant)
    return eval_pseudolabels(fitted, H, part), part, fitted


def erm(data: Dataset, ridge_lambda: float = 0.0, clamp=None) -> LinearPredictor:
    return ols_fit(data.features, data.targets, ridge_lambda).predictor(clamp)
