"""Command-line entry point.

Exit status: 0 on success, 1 for usage or input errors, 2 for numerical
failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import warnings

import numpy as np

from ..auxiliary import AuxSpec, build_aux
from ..dist import build_cdf, pointwise_variance, quantile_ci, variance_context
from ..errors import (
    ConvergenceError,
    EPIError,
    InfeasibleError,
    InsufficientDataError,
    LearnerError,
    ParseError,
    RankError,
    SchemaError,
)
from ..estimate import fit, supervised_pilot
from ..infer import infer
from ..model import ProblemConfig, Tolerances, builtin_model, load_dataset
from .experiment import ExperimentError, ExperimentSpec, run_experiment
from .selftest import run_selftest

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
NUMERIC_ERRORS = (InfeasibleError, ConvergenceError, RankError, LearnerError, ExperimentError,
                  np.linalg.LinAlgError, ArithmeticError)
CONFIG_KEYS = {"model", "d", "aux", "alpha", "seed", "theta0", "schema", "tolerances", "mc_draws", "y", "tau"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="overrides the seed in the config or spec")
    p.add_argument("--threads", type=int, default=1, help="worker processes (simulate only)")
    p.add_argument("--out", default=None, help="output file (simulate: path prefix); stdout when omitted")
    p.add_argument("--format", choices=("csv", "json"), default="json")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="epi", description="Empirical-likelihood prediction-powered inference.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (("fit", "point estimate, plug-in variance and Wald intervals"),
                       ("ci", "as fit, plus the calibrated likelihood-ratio interval")):
        p = sub.add_parser(name, help=text)
        p.add_argument("data", help="CSV with labeled, y, y_tilde, x1..xd columns")
        p.add_argument("--config", help="JSON problem config")
        _common(p)
    p = sub.add_parser("dist", help="calibrated CDF, pointwise variances and quantile intervals")
    p.add_argument("data")
    p.add_argument("--config")
    p.add_argument("--y", type=float, nargs="*", default=None, help="query points; all observed y when omitted")
    p.add_argument("--tau", type=float, nargs="*", default=None, help="quantile levels")
    _common(p)
    p = sub.add_parser("simulate", help="run an ExperimentSpec (or a list of them)")
    p.add_argument("spec", help="ExperimentSpec JSON")
    _common(p)
    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    _common(p)
    return parser


# ---------------------------------------------------------------- helpers

def _read_json(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _load(path, schema):
    try:
        return load_dataset(path, schema)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _config(cfg: dict, dataset, seed):
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise SchemaError(f"unknown config keys {sorted(unknown)}")
    model = builtin_model(cfg.get("model", "mean"), int(cfg.get("d", dataset.d)))
    aux = AuxSpec.from_dict(cfg.get("aux", {"kind": "none"}))
    tol = Tolerances(**cfg.get("tolerances", {}))
    return ProblemConfig(model, aux, float(cfg.get("alpha", 0.1)), seed if seed is not None else int(cfg.get("seed", 0)),
                         tol, int(cfg.get("mc_draws", 200_000)))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _emit(text: str, out):
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


# ---------------------------------------------------------------- commands

def _cmd_fit(args, lr: bool):
    cfg = _read_json(args.config)
    ds = _load(args.data, cfg.get("schema"))
    config = _config(cfg, ds, args.seed)
    f = fit(config, ds)
    theta0 = cfg.get("theta0")
    rep = infer(ds, config.model, f, config.alpha, theta0=theta0, lr_set=lr, mc_draws=config.mc_draws,
                seed=config.seed)
    if args.format == "json":
        payload = {"fit": f.to_dict(), "inference": rep.to_dict()}
        payload["fit"].pop("path", None)
        return _dump_json(payload)
    se = np.sqrt(np.clip(np.diag(rep.sigma_hat), 0, None) / ds.n)
    rows = []
    for j in range(config.model.p):
        row = [j, f.theta_hat[j], se[j], rep.wald[j, 0], rep.wald[j, 1]]
        if lr and rep.lr_interval is not None and config.model.p == 1:
            row += [rep.lr_interval.lower, rep.lr_interval.upper]
        rows.append(row)
    header = ["index", "theta_hat", "std_error", "wald_lower", "wald_upper"]
    if lr and config.model.p == 1:
        header += ["lr_lower", "lr_upper"]
    return _csv(rows, header)


def _cmd_dist(args):
    cfg = _read_json(args.config)
    ds = _load(args.data, cfg.get("schema"))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    alpha = float(cfg.get("alpha", 0.1))
    spec = AuxSpec.from_dict(cfg.get("aux", {"kind": "none"}))
    model = theta = None
    if "model" in cfg:
        model = builtin_model(cfg["model"], int(cfg.get("d", ds.d)))
    if spec.kind == "crossfit" and spec.target == "score":
        if model is None:
            raise SchemaError("score cross-fitting in dist needs a model")
        theta = supervised_pilot(ds, model)
    aux = build_aux(spec, ds, model, theta, seed=seed)
    if model is not None:
        theta = fit(ProblemConfig(model, spec, alpha, seed), ds).theta_hat
    cdf = build_cdf(ds, aux, model, theta)
    ys = args.y if args.y is not None else cfg.get("y")
    taus = args.tau if args.tau is not None else cfg.get("tau", [])
    ys = np.unique(cdf.support_y) if ys is None else np.asarray(ys, dtype=float)
    ctx = variance_context(ds, cdf, aux, model, theta)
    points = [pointwise_variance(ds, aux, y, model=model, theta_hat=theta, alpha=alpha, cdf=cdf) for y in ys]
    quants = [quantile_ci(cdf, ctx, float(t), alpha) for t in taus]
    if args.format == "json":
        return _dump_json({"n": ds.n, "m": ds.m, "alpha": alpha, "fallback": cdf.fallback,
                           "points": [p.to_dict() for p in points], "quantiles": [q.to_dict() for q in quants]})
    rows = [[p.y, p.F_hat, p.sigma2, p.lower, p.upper] for p in points]
    text = _csv(rows, ["y", "F_hat", "sigma2", "lower", "upper"])
    if quants:
        text += "\n" + _csv([[q.tau, q.estimate, q.lower, q.upper, int(q.fallback)] for q in quants],
                            ["tau", "quantile", "lower", "upper", "fallback"])
    return text


def _cmd_simulate(args):
    raw = _read_json(args.spec)
    entries = raw if isinstance(raw, list) else [raw]
    if not entries:
        raise UsageError("empty spec list")
    results, errors = [], []
    for entry in entries:
        if not isinstance(entry, dict):
            raise UsageError("each ExperimentSpec must be a JSON object")
        if args.seed is not None:
            entry = {**entry, "seed": args.seed}
        try:
            spec = ExperimentSpec.from_dict(entry)
        except TypeError as exc:
            raise SchemaError(f"invalid ExperimentSpec: {exc}") from None
        try:
            results.append(run_experiment(spec, threads=max(1, args.threads)))
        except ExperimentError as exc:
            results.append(exc.result)
            errors.append(str(exc))
    csv_text = results[0].to_csv()
    for r in results[1:]:
        csv_text += r.to_csv().split("\n", 1)[1]
    summary = [r.summary() for r in results]
    summary = summary[0] if not isinstance(raw, list) else summary
    json_text = _dump_json(summary)
    if args.out is None:
        sys.stdout.write(csv_text if args.format == "csv" else json_text)
    else:
        _emit(csv_text, f"{args.out}.csv")
        _emit(json_text, f"{args.out}.json")
    if errors:
        raise ExperimentError("; ".join(errors))
    return None


def _cmd_selftest(args):
    results = run_selftest(0 if args.seed is None else args.seed)
    if args.format == "json":
        text = _dump_json([{"check": n, "passed": ok, "detail": d} for n, ok, d in results])
    else:
        text = _csv([[n, "pass" if ok else "FAIL", d] for n, ok, d in results], ["check", "status", "detail"])
    _emit(text, args.out)
    return all(ok for _, ok, _ in results)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            if args.command == "selftest":
                return EXIT_OK if _cmd_selftest(args) else EXIT_NUMERIC
            if args.command in ("fit", "ci"):
                text = _cmd_fit(args, lr=args.command == "ci")
            elif args.command == "dist":
                text = _cmd_dist(args)
            else:
                text = _cmd_simulate(args)
            if text is not None:
                _emit(text, args.out)
    except NUMERIC_ERRORS as exc:
        print(f"epi {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, SchemaError, ParseError, InsufficientDataError, ValueError, EPIError) as exc:
        print(f"epi {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
