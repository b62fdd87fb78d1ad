"""Supervised and prediction-powered comparators.

Every estimator here solves the rectified equation

    mean_lab g(Y, X) - lam * {mean_lab g(Ytilde, X) - mean_unlab g(Ytilde, X)} = 0

with ``lam = 0`` (supervised), ``lam = 1`` (PPI) or a tuned scalar.  The
variance is the delta-method sandwich with ``lam`` held fixed; covariances
use divisor ``n`` (or ``m``) throughout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, RankError
from .estimate import fit_full_profile
from .infer import _sym, plugin_moments, supervised_sigma, wald_intervals
from .model import MomentModel, PPIDataset, Tolerances

METHODS = ("supervised", "ppi", "ppi_power_tuned")


@dataclass(frozen=True)
class BaselineFit:
    method: str
    theta_hat: np.ndarray
    sigma_hat: np.ndarray
    wald_ci: np.ndarray
    tuning: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "theta_hat": np.asarray(self.theta_hat).tolist(),
            "sigma_hat": np.asarray(self.sigma_hat).tolist(),
            "wald_ci": np.asarray(self.wald_ci).tolist(),
            "tuning": float(self.tuning),
            "diagnostics": dict(self.diagnostics),
        }


def _cov(a, b=None):
    a = a - a.mean(axis=0)
    b = a if b is None else b - b.mean(axis=0)
    return a.T @ b / a.shape[0]


def _pieces(ds: PPIDataset, model: MomentModel, theta):
    """Labeled score, labeled and unlabeled imputed scores, and the labeled Jacobian."""
    g = model.score(theta, ds.labeled_y, ds.labeled_x)
    gt = model.score(theta, ds.labeled_ytilde, ds.labeled_x)
    gu = model.score(theta, ds.unlabeled_ytilde, ds.unlabeled_x) if ds.m else np.zeros((0, model.q))
    jac = model.jacobian(theta, ds.labeled_y, ds.labeled_x).mean(axis=0)
    return g, gt, gu, jac


def _jac_inverse(jac):
    if np.linalg.cond(jac) > 1e14:
        raise RankError("score Jacobian is singular")
    return np.linalg.inv(jac)


def _middle(ds, g, gt, gu, lam):
    """Covariance of the rectified score for a fixed ``lam``."""
    mid = _cov(g - lam * gt)
    if ds.m and lam != 0.0:
        mid = mid + lam * lam * (ds.n / ds.m) * _cov(gu)
    return mid


def rectified_sigma(ds: PPIDataset, model: MomentModel, theta, lam: float) -> np.ndarray:
    """Plug-in covariance of ``sqrt(n)(theta_hat - theta*)`` at ``theta`` for fixed ``lam``."""
    g, gt, gu, jac = _pieces(ds, model, theta)
    jinv = _jac_inverse(jac)
    return _sym(jinv @ _middle(ds, g, gt, gu, lam) @ jinv.T)


def optimal_lambda(ds: PPIDataset, model: MomentModel, theta) -> float:
    """Minimizer over ``[0, 1]`` of ``tr rectified_sigma(theta, lam)``.

    The trace is quadratic in ``lam``, so the minimizer is closed form.
    """
    if ds.m == 0:
        return 0.0
    g, gt, gu, jac = _pieces(ds, model, theta)
    jinv = _jac_inverse(jac)
    cross = _cov(g, gt)
    curv = _cov(gt) + (ds.n / ds.m) * _cov(gu)
    den = float(np.trace(jinv @ curv @ jinv.T))
    if den <= 0.0:
        return 0.0
    num = float(np.trace(jinv @ _sym(cross) @ jinv.T))
    return float(np.clip(num / den, 0.0, 1.0))


def _rectified_root(ds, model, lam, tol: Tolerances):
    y, x = ds.labeled_y, ds.labeled_x
    yt = ds.labeled_ytilde
    yu, xu = ds.unlabeled_ytilde, ds.unlabeled_x

    def resid(th):
        out = model.score(th, y, x).mean(axis=0)
        if lam != 0.0:
            out = out - lam * (model.score(th, yt, x).mean(axis=0) - model.score(th, yu, xu).mean(axis=0))
        return out

    def jac(th):
        out = model.jacobian(th, y, x).mean(axis=0)
        if lam != 0.0:
            out = out - lam * (model.jacobian(th, yt, x).mean(axis=0) - model.jacobian(th, yu, xu).mean(axis=0))
        return out

    theta = model.project(model.initial_theta(y, x))
    f = resid(theta)
    scale = max(1.0, float(np.abs(model.score(theta, y, x)).mean()))
    for _ in range(tol.outer_max_iter):
        fn = float(np.linalg.norm(f))
        if fn <= tol.outer_tol * scale:
            return theta
        try:
            step = -np.linalg.solve(jac(theta), f)
        except np.linalg.LinAlgError as exc:
            raise RankError("rectified Jacobian is singular") from exc
        alpha = 1.0
        for _ in range(50):
            cand = model.project(theta + alpha * step)
            fc = resid(cand)
            if np.linalg.norm(fc) <= (1.0 - 1e-4 * alpha) * fn:
                break
            alpha *= 0.5
        else:
            if fn <= 1e3 * tol.outer_tol * scale:
                return theta
            raise ConvergenceError("rectified equation did not converge", last=theta)
        theta, f = cand, fc
    raise ConvergenceError("rectified equation did not converge", last=theta)


def _fit(ds, model, method, lam, alpha, tol, diagnostics=None) -> BaselineFit:
    theta = _rectified_root(ds, model, lam, tol)
    sigma = rectified_sigma(ds, model, theta, lam)
    return BaselineFit(method, theta, sigma, wald_intervals(theta, sigma, ds.n, alpha), lam, diagnostics or {})


def fit_supervised(ds: PPIDataset, model: MomentModel, alpha: float = 0.1,
                   tol: Tolerances = Tolerances()) -> BaselineFit:
    """Unweighted score root with the sandwich covariance; supervised EL when ``q > p``."""
    if not model.just_identified:
        fit = fit_full_profile(ds, model, None, tol=tol)
        sigma = supervised_sigma(plugin_moments(ds, model, None, fit.theta_hat))
        return BaselineFit("supervised", fit.theta_hat, sigma, wald_intervals(fit.theta_hat, sigma, ds.n, alpha),
                           0.0, {"mode": fit.mode})
    return _fit(ds, model, "supervised", 0.0, alpha, tol)


def _needs_unlabeled(ds, model, name):
    if not model.just_identified:
        raise ValueError(f"{name} needs q = p")
    if ds.m == 0:
        warnings.warn(f"{name}: no unlabeled rows, returning the supervised fit", RuntimeWarning, stacklevel=3)
        return True
    return False


def fit_ppi(ds: PPIDataset, model: MomentModel, alpha: float = 0.1, tol: Tolerances = Tolerances()) -> BaselineFit:
    """Prediction-powered estimator: the rectified equation with ``lam = 1``."""
    if _needs_unlabeled(ds, model, "ppi"):
        return _fit(ds, model, "ppi", 0.0, alpha, tol, {"fallback": "m = 0"})
    return _fit(ds, model, "ppi", 1.0, alpha, tol)


def fit_ppi_power_tuned(ds: PPIDataset, model: MomentModel, alpha: float = 0.1,
                        tol: Tolerances = Tolerances()) -> BaselineFit:
    """Scalar power tuning: ``lam`` minimizes the trace of the plug-in covariance.

    The covariance pieces are evaluated at the supervised estimate, then the
    rectified equation is solved with that ``lam``.
    """
    if _needs_unlabeled(ds, model, "ppi_power_tuned"):
        return _fit(ds, model, "ppi_power_tuned", 0.0, alpha, tol, {"fallback": "m = 0"})
    pilot = _rectified_root(ds, model, 0.0, tol)
    lam = optimal_lambda(ds, model, pilot)
    return _fit(ds, model, "ppi_power_tuned", lam, alpha, tol)


def fit_baseline(method: str, ds: PPIDataset, model: MomentModel, alpha: float = 0.1,
                 tol: Tolerances = Tolerances()) -> BaselineFit:
    if method == "supervised":
        return fit_supervised(ds, model, alpha, tol)
    if method == "ppi":
        return fit_ppi(ds, model, alpha, tol)
    if method == "ppi_power_tuned":
        return fit_ppi_power_tuned(ds, model, alpha, tol)
    raise ValueError(f"unknown baseline {method!r}; expected one of {METHODS}")
