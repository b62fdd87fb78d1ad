"""Replication engine for the simulation studies.

Replication ``r`` of an experiment with seed ``s`` draws everything from
``SeedSequence(s, spawn_key=(r,))``, so results do not depend on how the
replications are spread over worker processes.  Aggregation runs in
replication order.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Optional

import numpy as np
from scipy import stats

from ..auxiliary import AuxSpec, build_aux
from ..baselines import fit_baseline
from ..dist import build_cdf, cdf_at
from ..errors import EPIError
from ..estimate import fit
from ..infer import el_ratio_stat, infer
from ..model import (
    ProblemConfig,
    builtin_linreg_model,
    builtin_mean_model,
    builtin_overidentified_mean_model,
)
from .generators import SCENARIOS, dist_query_points, generate, scenario_params

log = logging.getLogger(__name__)

METHODS = {
    "mean_inference": ("supervised", "ppi", "ppi_power_tuned", "epi_basis", "epi_cf"),
    "linreg": ("supervised", "ppi", "ppi_power_tuned", "epi_basis", "epi_cf"),
    "overidentified": ("supervised", "ppi", "ppi_power_tuned", "supervised_el", "epi_basis", "epi_cf"),
    "dist_learning": ("ecdf", "epi_dist_basis", "epi_dist_cf"),
}
REFERENCE = {"mean_inference": "supervised", "linreg": "supervised", "overidentified": "supervised",
             "dist_learning": "ecdf"}
BASIS_DEGREE = {"mean_inference": 1, "linreg": 3, "overidentified": 2, "dist_learning": 1}
MAX_FAILURE_RATE = 0.01
CSV_COLUMNS = ("scenario", "param", "method", "metric", "value", "mc_se", "n_reps", "n_failures")


class ExperimentError(EPIError):
    """More than the tolerated share of replications failed."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class ExperimentSpec:
    """One design point of a simulation study.

    ``C`` lists the multipliers of the null ``theta0 = C * theta_star`` whose
    rejection rates are recorded.  With ``inference=False`` only point
    estimates are computed.
    """

    scenario: str
    n: int
    m: int
    params: dict = field(default_factory=dict)
    methods: tuple = ()
    replications: int = 2000
    alpha: float = 0.1
    seed: int = 0
    C: tuple = (1.0,)
    inference: bool = True
    basis_degree: Optional[int] = None
    K: int = 5
    learner: str = "ridge_poly"
    mc_draws: int = 200_000

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        object.__setattr__(self, "params", scenario_params(self.scenario, self.params))
        methods = tuple(self.methods) or METHODS[self.scenario]
        bad = [mth for mth in methods if mth not in METHODS[self.scenario]]
        if bad:
            raise ValueError(f"methods {bad} are not available for {self.scenario}")
        if REFERENCE[self.scenario] not in methods:
            methods = (REFERENCE[self.scenario],) + methods
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "C", tuple(float(c) for c in np.atleast_1d(self.C)))
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.n < 1 or self.m < 0:
            raise ValueError("need n >= 1 and m >= 0")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ExperimentSpec keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["methods"] = list(self.methods)
        out["C"] = list(self.C)
        return out

    @property
    def degree(self) -> int:
        return self.basis_degree if self.basis_degree is not None else BASIS_DEGREE[self.scenario]

    @property
    def param_label(self) -> str:
        parts = [f"n={self.n}", f"m={self.m}"] + [f"{k}={v}" for k, v in sorted(self.params.items())]
        return ";".join(parts)


# ---------------------------------------------------------------- one replication

def _model_for(spec: ExperimentSpec, method: str, d: int):
    if spec.scenario == "linreg":
        return builtin_linreg_model(d)
    if spec.scenario == "overidentified" and method in ("supervised_el", "epi_basis", "epi_cf"):
        return builtin_overidentified_mean_model()
    return builtin_mean_model()


def _aux_spec(spec: ExperimentSpec, method: str) -> AuxSpec:
    if method in ("supervised_el", "ecdf"):
        return AuxSpec()
    if method in ("epi_basis", "epi_dist_basis"):
        return AuxSpec(kind="fixed_basis", degree=spec.degree)
    target = "indicator" if method == "epi_dist_cf" else "score"
    return AuxSpec(kind="crossfit", K=spec.K, learner=spec.learner, target=target)


def _wald_rejects(theta_hat, sigma, theta0, n, alpha) -> bool:
    diff = np.asarray(theta_hat) - theta0
    stat = n * float(diff @ np.linalg.pinv(sigma) @ diff)
    return stat > stats.chi2.ppf(1 - alpha, diff.size)


def _record(theta_hat, theta_star, lower=None, upper=None, rejects=()):
    out = {"estimate": np.asarray(theta_hat, dtype=float).tolist(),
           "sq_err": float(np.sum((np.asarray(theta_hat) - theta_star) ** 2)),
           "rejects": [bool(r) for r in rejects]}
    if lower is not None:
        out["lower"], out["upper"] = float(lower), float(upper)
    return out


def _run_baseline(spec, method, ds, theta_star):
    model = _model_for(spec, method, ds.d)
    bf = fit_baseline(method, ds, model, spec.alpha)
    if not spec.inference:
        return _record(bf.theta_hat, theta_star)
    rejects = [_wald_rejects(bf.theta_hat, bf.sigma_hat, c * theta_star, ds.n, spec.alpha) for c in spec.C]
    lo, hi = (bf.wald_ci[0] if model.p == 1 else (None, None))
    return _record(bf.theta_hat, theta_star, lo, hi, rejects)


def _run_el(spec, method, ds, theta_star, fold_seed, mc_seed):
    model = _model_for(spec, method, ds.d)
    config = ProblemConfig(model, _aux_spec(spec, method), spec.alpha, fold_seed, mc_draws=spec.mc_draws)
    f = fit(config, ds)
    if not spec.inference:
        out = _record(f.theta_hat, theta_star)
    else:
        rep = infer(ds, model, f, spec.alpha, lr_set=model.p == 1, mc_draws=spec.mc_draws, seed=mc_seed)
        rejects = [el_ratio_stat(ds, model, f.aux, c * theta_star, f) > rep.critical_value for c in spec.C]
        if model.p == 1:
            out = _record(f.theta_hat, theta_star, rep.lr_interval.lower, rep.lr_interval.upper, rejects)
        else:
            out = _record(f.theta_hat, theta_star, rejects=rejects)
    out["fallback"] = "fallback" in f.diagnostics
    return out


def _run_dist(spec, method, ds, fold_seed):
    points, _ = dist_query_points(spec.params)
    if method == "ecdf":
        cdf = build_cdf(ds)
    else:
        cdf = build_cdf(ds, build_aux(_aux_spec(spec, method), ds, seed=fold_seed))
    return {"cdf": np.atleast_1d(cdf_at(cdf, points)).tolist()}


def replicate(spec: ExperimentSpec, rep: int) -> dict:
    """All requested methods on replication ``rep``; failures are caught and reported."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(rep,)))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            draw = generate(spec.scenario, spec.params, spec.n, spec.m, rng)
            fold_seed, mc_seed = (int(s) for s in rng.integers(0, 2 ** 31 - 1, size=2))
            out = {}
            for method in spec.methods:
                if spec.scenario == "dist_learning":
                    out[method] = _run_dist(spec, method, draw.dataset, fold_seed)
                elif method in ("supervised", "ppi", "ppi_power_tuned"):
                    out[method] = _run_baseline(spec, method, draw.dataset, draw.theta_star)
                else:
                    out[method] = _run_el(spec, method, draw.dataset, draw.theta_star, fold_seed, mc_seed)
            return {"rep": rep, "ok": True, "theta_star": draw.theta_star.tolist(), "methods": out}
    except (EPIError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return {"rep": rep, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


# ---------------------------------------------------------------- aggregation

@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rows: list
    n_reps: int
    n_failures: int
    failures: list
    raw: Optional[list] = None

    def metrics(self) -> dict:
        """``{param: {method: {metric: {"value", "mc_se"}}}}``."""
        out: dict = {}
        for row in self.rows:
            cell = out.setdefault(row["param"], {}).setdefault(row["method"], {})
            cell[row["metric"]] = {"value": _jsonable(row["value"]), "mc_se": _jsonable(row["mc_se"])}
        return out

    def value(self, method: str, metric: str, param: Optional[str] = None) -> float:
        for row in self.rows:
            if row["method"] == method and row["metric"] == metric and (param is None or row["param"] == param):
                return row["value"]
        raise KeyError((method, metric, param))

    def mc_se(self, method: str, metric: str, param: Optional[str] = None) -> float:
        for row in self.rows:
            if row["method"] == method and row["metric"] == metric and (param is None or row["param"] == param):
                return row["mc_se"]
        raise KeyError((method, metric, param))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"spec": self.spec.to_dict(), "n_reps": self.n_reps, "n_failures": self.n_failures,
                "failures": self.failures, "metrics": self.metrics()}

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _jsonable(v):
    v = float(v)
    return v if math.isfinite(v) else str(v)


def _mean_se(a):
    a = np.asarray(a, dtype=float)
    if a.size < 2:
        return float(a.mean()), math.nan
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(a.size))


def _ratio_se(a, b):
    """Ratio of means with a paired delta-method standard error."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    mb = b.mean()
    if mb == 0 or not np.isfinite(mb):
        return math.nan, math.nan
    r = a.mean() / mb
    if a.size < 2 or not np.isfinite(r):
        return float(r), math.nan
    return float(r), float(np.std(a - r * b, ddof=1) / (math.sqrt(a.size) * abs(mb)))


def _prop_se(x):
    x = np.asarray(x, dtype=float)
    p = float(x.mean())
    return p, math.sqrt(p * (1 - p) / x.size)


def aggregate(spec: ExperimentSpec, records: list) -> ExperimentResult:
    ok = [r for r in records if r["ok"]]
    failures = [{"rep": r["rep"], "error": r["error"]} for r in records if not r["ok"]]
    nf = len(failures)
    rows = []
    base = spec.param_label

    def emit(param, method, metric, value, se):
        rows.append({"scenario": spec.scenario, "param": param, "method": method, "metric": metric,
                     "value": float(value), "mc_se": float(se), "n_reps": len(ok), "n_failures": nf})

    if not ok:
        return ExperimentResult(spec, rows, 0, nf, failures)
    ref = REFERENCE[spec.scenario]
    if spec.scenario == "dist_learning":
        points, taus = dist_query_points(spec.params)
        ref_err = np.array([(np.array(r["methods"][ref]["cdf"]) - taus) ** 2 for r in ok])
        for method in spec.methods:
            err = np.array([(np.array(r["methods"][method]["cdf"]) - taus) ** 2 for r in ok])
            for k, tau in enumerate(taus):
                param = f"{base};tau={tau:g}"
                emit(param, method, "cdf_mse", *_mean_se(err[:, k]))
                emit(param, method, "cdf_mse_ratio", *_ratio_se(err[:, k], ref_err[:, k]))
        return ExperimentResult(spec, rows, len(ok), nf, failures)

    ref_sq = [r["methods"][ref]["sq_err"] for r in ok]
    ref_len = None
    if spec.inference and "lower" in ok[0]["methods"][ref]:
        ref_len = [r["methods"][ref]["upper"] - r["methods"][ref]["lower"] for r in ok]
    for method in spec.methods:
        recs = [r["methods"][method] for r in ok]
        sq = [x["sq_err"] for x in recs]
        emit(base, method, "mse", *_mean_se(sq))
        emit(base, method, "rel_mse", *_ratio_se(sq, ref_sq))
        if "fallback" in recs[0]:
            emit(base, method, "fallback_rate", *_prop_se([x["fallback"] for x in recs]))
        if not spec.inference:
            continue
        if "lower" in recs[0]:
            star = np.array([r["theta_star"][0] for r in ok])
            lo = np.array([x["lower"] for x in recs])
            hi = np.array([x["upper"] for x in recs])
            miss_l, miss_u = star < lo, star > hi
            emit(base, method, "coverage", *_prop_se(~miss_l & ~miss_u))
            emit(base, method, "miscoverage_lower", *_prop_se(miss_l))
            emit(base, method, "miscoverage_upper", *_prop_se(miss_u))
            emit(base, method, "mean_length", *_mean_se(hi - lo))
            if ref_len is not None:
                emit(base, method, "length_ratio", *_ratio_se(hi - lo, ref_len))
        for k, c in enumerate(spec.C):
            emit(f"{base};C={c:g}", method, "rejection_rate", *_prop_se([x["rejects"][k] for x in recs]))
    return ExperimentResult(spec, rows, len(ok), nf, failures)


def run_experiment(spec: ExperimentSpec, threads: int = 1, keep_raw: bool = False) -> ExperimentResult:
    """Run every replication of ``spec`` and aggregate in replication order.

    Raises :class:`ExperimentError` (carrying the result) when more than 1% of
    replications fail.
    """
    reps = range(spec.replications)
    job = partial(replicate, spec)
    if threads <= 1:
        records = [job(r) for r in reps]
    else:
        chunk = max(1, spec.replications // (4 * threads))
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(job, reps, chunksize=chunk))
    result = aggregate(spec, records)
    if keep_raw:
        result.raw = records
    if result.n_failures > MAX_FAILURE_RATE * spec.replications:
        raise ExperimentError(f"{result.n_failures} of {spec.replications} replications failed", result)
    if result.n_failures:
        log.warning("%d replications failed and were excluded", result.n_failures)
    return result
