"""Data generators for the simulation scenarios.

Each generator draws a labeled and an unlabeled sample from one seeded
``numpy.random.Generator`` and returns a :class:`PPIDataset` together with
the population target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..auxiliary import RidgePoly
from ..model import PPIDataset

SCENARIOS = ("mean_inference", "linreg", "overidentified", "dist_learning")

# documented ranges for scenario parameters
DEFAULT_PARAMS = {
    "mean_inference": {"dist": "normal"},
    "linreg": {"d": 5, "rho": 1.0},
    "overidentified": {"theta": 2.0},
    "dist_learning": {"d": 10, "sigma": 0.5, "train_size": 1000},
}
EXP_RATE = 2.0


@dataclass(frozen=True)
class Draw:
    dataset: PPIDataset
    theta_star: np.ndarray


def scenario_params(scenario: str, params: dict | None = None) -> dict:
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    out = dict(DEFAULT_PARAMS[scenario])
    unknown = set(params or {}) - set(out)
    if unknown:
        raise ValueError(f"unknown parameters for {scenario}: {sorted(unknown)}")
    out.update(params or {})
    if scenario == "mean_inference" and out["dist"] not in ("normal", "exp"):
        raise ValueError("dist must be 'normal' or 'exp'")
    if scenario == "linreg" and (int(out["d"]) < 2 or out["rho"] < 0):
        raise ValueError("linreg needs d >= 2 and rho >= 0")
    if scenario == "overidentified" and out["theta"] <= 0:
        raise ValueError("theta must be positive")
    if scenario == "dist_learning" and (int(out["d"]) < 1 or out["sigma"] < 0 or int(out["train_size"]) < 10):
        raise ValueError("dist_learning needs d >= 1, sigma >= 0 and train_size >= 10")
    return out


def _mean_inference(p, n, m, rng):
    if p["dist"] == "normal":
        draw = lambda k: rng.standard_normal(k)
        theta = 0.0
    else:
        draw = lambda k: rng.exponential(1.0 / EXP_RATE, k)
        theta = 2.0 / EXP_RATE
    x, eps = draw(n), draw(n)
    xu = draw(m)
    y = x + eps
    yt = x + rng.standard_normal(n)
    ytu = xu + rng.standard_normal(m)
    return Draw(PPIDataset(y, x[:, None], yt, xu[:, None], ytu), np.array([theta]))


def _linreg_signal(x):
    return x[:, 0] + x[:, 1] + x[:, 0] ** 2 + x[:, 1] ** 2


def _linreg(p, n, m, rng):
    d = int(p["d"])
    x = rng.standard_normal((n, d))
    xu = rng.standard_normal((m, d))
    y = _linreg_signal(x) + rng.standard_t(3, n) / 2
    yt = _linreg_signal(x) + p["rho"] * rng.standard_normal(n)
    ytu = _linreg_signal(xu) + p["rho"] * rng.standard_normal(m)
    theta = np.zeros(d)
    theta[:2] = 1.0
    return Draw(PPIDataset(y, x, yt, xu, ytu), theta)


def _overidentified(p, n, m, rng):
    th = float(p["theta"])
    x = rng.normal(0.0, th, (n, 2))
    xu = rng.normal(0.0, th, (m, 2))
    y = th + x.sum(axis=1) + th * rng.standard_normal(n)
    return Draw(PPIDataset(y, x, x.sum(axis=1), xu, xu.sum(axis=1)), np.array([th]))


def dist_signal_count(d: int) -> int:
    return math.ceil(0.15 * d - 1e-12)


def _dist_response(x, d1, sigma, rng):
    return x[:, :d1].sum(axis=1) / math.sqrt(d1) + sigma * rng.standard_normal(x.shape[0])


def _dist_learning(p, n, m, rng):
    d, sigma = int(p["d"]), float(p["sigma"])
    d1 = dist_signal_count(d)
    # predictor trained on an independent sample drawn first from the same stream
    xtr = rng.standard_normal((int(p["train_size"]), d))
    predictor = RidgePoly(degree=2).fit(xtr, _dist_response(xtr, d1, sigma, rng))
    x = rng.standard_normal((n, d))
    xu = rng.standard_normal((m, d))
    y = _dist_response(x, d1, sigma, rng)
    return Draw(PPIDataset(y, x, predictor.predict(x), xu, predictor.predict(xu)), np.zeros(0))


_GENERATORS = {
    "mean_inference": _mean_inference,
    "linreg": _linreg,
    "overidentified": _overidentified,
    "dist_learning": _dist_learning,
}


def generate(scenario: str, params: dict | None, n: int, m: int, rng: np.random.Generator) -> Draw:
    """One dataset for ``scenario``; ``theta_star`` is the population target."""
    p = scenario_params(scenario, params)
    if n < 1 or m < 0:
        raise ValueError("need n >= 1 and m >= 0")
    return _GENERATORS[scenario](p, n, m, rng)


def dist_query_points(params: dict | None = None, taus=None) -> tuple[np.ndarray, np.ndarray]:
    """Deciles of the marginal of ``Y`` in the distribution scenario and their true CDF values."""
    p = scenario_params("dist_learning", params)
    taus = np.arange(1, 10) / 10 if taus is None else np.asarray(taus, dtype=float)
    sd = math.sqrt(1.0 + float(p["sigma"]) ** 2)
    return sd * stats.norm.ppf(taus), taus
