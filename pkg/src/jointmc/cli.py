"""Command-line harness: ``gen``, ``run``, ``eval`` and ``analyze``.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical failure.

Config files are plain text, one ``key = value`` per line, ``#`` starts a
comment. Keys are the long flag names with dashes or underscores. Flags
given on the command line override the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .core import DataError, Dataset, LinearPredictor, NumericalError, RunConfig, env_priors, load_dataset, write_dataset
from .discretize import choose_bins
from .gaussian import BlockCov, compute_M, compute_stars, iteration_table, target_coeffs
from .grouping import GroupingBasis, constant_basis, density_ratio_columns, env_basis, jtt_basis, linear_basis
from .metrics import mc_error, mc_error_over_class, post_processing_gap, rmse
from .oracles import EnvClassifier, fit_env_classifier
from .pseudolabel import erm, final_partition, natural_B, pseudolabels, run
from .synth import ScmConfig, generate_gaussian, generate_scm

logger = logging.getLogger("jointmc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _resolve(args: argparse.Namespace, defaults: dict[str, Any], conv: dict[str, Any]) -> dict[str, Any]:
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    unknown = set(cfg) - set(defaults)
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in cfg:
            try:
                out[key] = conv.get(key, str)(cfg[key])
            except ValueError as exc:
                raise DataError(f"bad config value for {key}: {cfg[key]!r}") from exc
        else:
            out[key] = default
    return out


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(s).split(",") if v.strip())


def _bool(s: str) -> bool:
    s = str(s).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def _dump(obj, path: Optional[str]) -> None:
    text = json.dumps(obj, indent=1, default=_json_default)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o))


def _echo(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}


def read_sigma(path) -> tuple[np.ndarray, Optional[int]]:
    """Covariance from JSON (a matrix, or ``{"sigma": ..., "d_phi": k}``) or headerless CSV."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        obj = json.loads(text)
        if isinstance(obj, dict):
            return np.asarray(obj["sigma"], dtype=float), obj.get("d_phi")
        return np.asarray(obj, dtype=float), None
    rows = [r for r in csv.reader(text.splitlines()) if r and any(c.strip() for c in r)]
    try:
        return np.array([[float(c) for c in r] for r in rows]), None
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric covariance entry") from exc


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

SCM_DEFAULTS = {
    "seed": 0, "n_per_env": 50000, "alpha_v_train": (1.25, 0.75), "alpha_v_test": -1.0,
    "sigma_y": 0.5, "sigma_v": 0.1, "d_s": 9,
}
SCM_CONV = {"seed": int, "n_per_env": int, "alpha_v_train": _floats, "alpha_v_test": float,
            "sigma_y": float, "sigma_v": float, "d_s": int}


def cmd_gen(args) -> int:
    if args.kind == "scm":
        eff = _resolve(args, SCM_DEFAULTS, SCM_CONV)
        cfg = ScmConfig(**eff)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_dataset(generate_scm(cfg, "train"), out / "train.csv")
        write_dataset(generate_scm(cfg, "test"), out / "test.csv")
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
        return EXIT_OK
    sigma, d_phi = read_sigma(args.sigma)
    d_phi = args.d_phi or d_phi or 1
    cov = BlockCov.from_matrix(sigma, d_phi)
    mu = None if args.mu is None else np.asarray(_floats(args.mu))
    data = generate_gaussian(cov, mu, args.n, args.seed)
    write_dataset(data, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

RUN_DEFAULTS = {
    "max_iters": 50, "stop_epsilon": None, "ridge": 0.0, "seed": 0, "discretize": True,
    "min_bins": 10, "min_bin_count": 30, "coverage": 0.9, "clamp": None, "strict": False,
    "env_column": "env", "d_phi": None, "classifier_features": "quadratic", "normalize_y": False,
}
RUN_CONV = {"max_iters": int, "stop_epsilon": float, "ridge": float, "seed": int, "discretize": _bool,
            "min_bins": int, "min_bin_count": int, "coverage": float, "clamp": _floats, "strict": _bool,
            "d_phi": int, "normalize_y": _bool}


def _normalize(data: Dataset, scale: Optional[tuple[float, float]]) -> Dataset:
    if scale is None:
        return data
    lo, hi = scale
    return Dataset(data.features, (data.targets - lo) / (hi - lo), data.envs, data.names)


def _make_basis(kind: str, data: Dataset, eff: dict, fid_path: Optional[str]) -> GroupingBasis:
    if kind == "constant":
        return constant_basis()
    if kind == "env":
        if data.envs is None:
            raise DataError(f"environment basis requires the {eff['env_column']!r} column")
        return env_basis(fit_env_classifier(data, feature_map=eff["classifier_features"]))
    if kind == "jtt":
        f_id = _load_model(fid_path) if fid_path else erm(data)
        return jtt_basis(f_id.unrounded())
    if kind == "linear":
        if eff["d_phi"] is None:
            raise UsageError("--basis linear requires --d-phi")
        return linear_basis(data, int(eff["d_phi"]))
    raise UsageError(f"unknown basis {kind!r}")


def _load(path, env_column: str, required: bool = False) -> Dataset:
    """Load a CSV, treating ``env_column`` as labels whenever the header has it."""
    with Path(path).open(newline="") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    if env_column in header:
        return load_dataset(path, env_column)
    if required:
        raise DataError(f"{path}: missing environment column {env_column!r}")
    return load_dataset(path)


def _load_model(path) -> LinearPredictor:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON") from exc
    return LinearPredictor.from_dict(obj)


def cmd_run(args) -> int:
    eff = _resolve(args, RUN_DEFAULTS, RUN_CONV)
    train = _load(args.train, eff["env_column"], required=args.basis == "env")
    scale = None
    if eff["normalize_y"]:
        lo, hi = float(train.targets.min()), float(train.targets.max())
        if hi - lo <= 0:
            raise DataError("cannot normalize a constant target")
        scale = (lo, hi)
        train = _normalize(train, scale)
    cfg = RunConfig(
        max_iters=eff["max_iters"], stop_epsilon=eff["stop_epsilon"], ridge_lambda=eff["ridge"], seed=eff["seed"],
        discretize=eff["discretize"], min_bins=eff["min_bins"], min_bin_count=eff["min_bin_count"],
        coverage_fraction=eff["coverage"], clamp=None if eff["clamp"] is None else tuple(eff["clamp"]),
        strict=eff["strict"],
    )
    f0 = _load_model(args.f0).unrounded() if args.f0 else erm(train, cfg.ridge_lambda)
    basis = _make_basis(args.basis, train, eff, args.fid)
    model, trace = run(train, basis, f0, cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    effective = {**{k: (list(v) if isinstance(v, tuple) else v) for k, v in eff.items()},
                 "basis": args.basis, "train": str(args.train), "f0": args.f0, "fid": args.fid}
    _dump({**model.to_dict(), "grouping": basis.to_dict(), "certificate": trace.certificate,
           "stop_reason": trace.stop_reason, "target_scale": scale, "config": effective}, out / "model.json")
    _dump({**f0.to_dict(), "target_scale": scale, "config": effective}, out / "f0.json")
    trace.config.update(effective)
    trace.write_json(out / "trace.json")
    trace.write_csv(out / "trace.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def evaluate(model: LinearPredictor, data: Dataset, basis: GroupingBasis, n_directions: int = 64,
             seed: int = 0) -> dict:
    """Accuracy and multicalibration metrics of ``model`` on ``data``."""
    X, y = data.features, data.targets
    out_raw = model(X)
    grid = "model"
    if model.bin_spec is None:
        # an unrounded model gets a grid chosen on its eval predictions
        try:
            model = replace(model, bin_spec=choose_bins(model.raw(X)))
            grid = "eval_predictions"
        except DataError:
            grid = "exact_level_sets"
    pred = model(X)
    part = final_partition(model, data)
    out: dict[str, Any] = {
        "n": data.n,
        "grid": grid,
        "rmse": rmse(out_raw, y),
        "rmse_rounded": rmse(pred, y),
        "rmse_unrounded": rmse(model.raw(X), y),
        "post_processing_gap": post_processing_gap(part.rounded(), y, part),
        "calibration_k2": mc_error(np.ones(data.n), y, part).k2,
    }
    if data.envs is not None:
        out["per_env_rmse"] = {str(e): rmse(pred[data.envs == e], y[data.envs == e]) for e in range(data.n_envs)}
        out["per_env_post_processing_gap"] = {
            str(e): post_processing_gap(part.rounded()[data.envs == e], y[data.envs == e], part.subset(data.envs == e))
            for e in range(data.n_envs)
        }
    H = basis.matrix(X, y)
    B = natural_B(H)
    names = list(basis.names) + (["const"] if basis.include_constant else [])
    out["basis"] = basis.kind
    out["grouping_errors"] = {
        name: {k: v for k, v in mc_error(H[:, j], y, part).to_dict().items() if k != "per_bin"}
        for j, name in enumerate(names)
    }
    out["k2_over_class"] = mc_error_over_class(H, y, part, B, max(n_directions, H.shape[1]), seed)
    pl, _, _ = pseudolabels(model, data, basis)
    gap = float(np.mean((part.rounded() - y) ** 2) - np.mean((pl - y) ** 2))
    out["certificate"] = {"B": B, "gap": gap, "alpha": B * gap}
    if basis.kind == "environment" and data.envs is not None:
        clf = EnvClassifier.from_dict(basis.params["classifier"])
        if clf.n_classes == data.n_envs:
            R = density_ratio_columns(clf, data, env_priors(data.envs))
            out["density_ratio_k2"] = {str(e): mc_error(R[:, e], y, part).k2 for e in range(data.n_envs)}
    return out


def cmd_eval(args) -> int:
    obj = json.loads(Path(args.model).read_text())
    model = LinearPredictor.from_dict(obj)
    grouping = obj.get("grouping")
    data = _load(args.data, args.env_column)
    scale = obj.get("target_scale")
    data = _normalize(data, None if scale is None else tuple(scale))
    if model.d != data.d:
        raise DataError(f"model expects d={model.d}, data has d={data.d}")
    if args.basis == "model":
        basis = GroupingBasis.from_dict(grouping) if grouping else constant_basis()
    elif args.basis == "constant":
        basis = constant_basis()
    elif args.basis == "jtt":
        f_id = _load_model(args.fid) if args.fid else erm(data)
        basis = jtt_basis(f_id.unrounded())
    else:
        if args.d_phi is None:
            raise UsageError("--basis linear requires --d-phi")
        basis = linear_basis(data, args.d_phi)
    result = evaluate(model, data, basis, seed=args.seed)
    result["config"] = _echo(args)
    _dump(result, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    sigma, d_phi = read_sigma(args.sigma)
    d_phi = args.d_phi or d_phi
    if d_phi is None:
        raise UsageError("--d-phi is required")
    cov = BlockCov.from_matrix(sigma, int(d_phi))
    stars = compute_stars(cov)
    M = compute_M(cov, check_tol=args.check_tol)
    gamma = target_coeffs(cov)
    table = iteration_table(cov, args.T)
    out: dict[str, Any] = {
        "d_phi": cov.d_phi, "d_psi": cov.d_psi, "M": M, "gamma_phi": gamma,
        "alpha_phi": stars.alpha_phi, "alpha_psi": stars.alpha_psi,
        "beta_phi": stars.beta_phi, "beta_y": stars.beta_y.reshape(-1),
        "iterations": table if not args.table else len(table),
    }
    out["config"] = _echo(args)
    if M >= 0.99:
        logger.warning("M = %.6f: near-singular covariance, convergence will be very slow", M)
        out["warning"] = "near-singular covariance: M >= 0.99"
    if args.table:
        with Path(args.table).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(table)
    if args.compare:
        data = generate_gaussian(cov, None, args.n, args.seed)
        cfg = RunConfig(max_iters=args.max_iters, min_bin_count=args.min_bin_count)
        model, trace = run(data, linear_basis(data, cov.d_phi), erm(data), cfg)
        target = np.concatenate([gamma, np.zeros(cov.d_psi)])
        out["compare"] = {
            "n": args.n, "seed": args.seed, "min_bin_count": args.min_bin_count,
            "coeffs": model.coeffs, "target": target, "iterations": len(trace.iterations),
            "stop_reason": trace.stop_reason,
            "max_abs_deviation": float(np.max(np.abs(model.coeffs - target))),
        }
    _dump(out, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointmc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic datasets")
    gsub = g.add_subparsers(dest="kind", required=True, parser_class=_Parser)
    s = gsub.add_parser("scm", help="multi-environment spurious-feature SCM (train.csv, test.csv)")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-per-env", type=int)
    s.add_argument("--alpha-v-train", type=_floats)
    s.add_argument("--alpha-v-test", type=float)
    s.add_argument("--sigma-y", type=float)
    s.add_argument("--sigma-v", type=float)
    s.add_argument("--d-s", type=int)
    s.add_argument("--out", required=True)
    gg = gsub.add_parser("gaussian", help="draws from N(mu, Sigma); last coordinate is y")
    gg.add_argument("--sigma", required=True)
    gg.add_argument("--d-phi", type=int)
    gg.add_argument("--mu")
    gg.add_argument("--n", type=int, default=100000)
    gg.add_argument("--seed", type=int, default=0)
    gg.add_argument("--out", default="gaussian.csv")

    r = sub.add_parser("run", help="run MC-Pseudolabel on a training CSV")
    r.add_argument("--train", required=True)
    r.add_argument("--basis", required=True, choices=["env", "jtt", "constant", "linear"])
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.add_argument("--f0", help="initial model JSON (default: OLS fit)")
    r.add_argument("--fid", help="reference model JSON for the jtt basis (default: OLS fit)")
    r.add_argument("--env-column")
    r.add_argument("--d-phi", type=int)
    r.add_argument("--max-iters", type=int)
    r.add_argument("--stop-epsilon", type=float)
    r.add_argument("--ridge", type=float)
    r.add_argument("--seed", type=int)
    r.add_argument("--no-discretize", dest="discretize", action="store_const", const=False)
    r.add_argument("--min-bins", type=int)
    r.add_argument("--min-bin-count", type=int)
    r.add_argument("--coverage", type=float)
    r.add_argument("--clamp", type=_floats)
    r.add_argument("--strict", action="store_const", const=True)
    r.add_argument("--classifier-features", choices=["linear", "quadratic"])
    r.add_argument("--normalize-y", action="store_const", const=True)

    e = sub.add_parser("eval", help="evaluate a model JSON on a CSV")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--env-column", default="env")
    e.add_argument("--basis", default="model", choices=["model", "constant", "jtt", "linear"],
                   help="grouping basis to measure against (default: the one stored in the model)")
    e.add_argument("--fid", help="reference model JSON for --basis jtt (default: OLS fit on the data)")
    e.add_argument("--d-phi", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")

    a = sub.add_parser("analyze", help="closed-form convergence analysis for a Gaussian covariance")
    a.add_argument("--sigma", required=True)
    a.add_argument("--d-phi", type=int)
    a.add_argument("--T", type=int, default=50)
    a.add_argument("--table", help="write the iteration table as CSV here")
    a.add_argument("--check-tol", type=float, default=1e-10)
    a.add_argument("--compare", action="store_true", help="also sample and run the algorithm")
    a.add_argument("--n", type=int, default=200000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--max-iters", type=int, default=200)
    a.add_argument("--min-bin-count", type=int, default=300)
    a.add_argument("--out")
    return p


COMMANDS = {"gen": cmd_gen, "run": cmd_run, "eval": cmd_eval, "analyze": cmd_analyze}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"jointmc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"jointmc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"jointmc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
