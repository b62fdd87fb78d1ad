"""Calibrated empirical distribution functions from EL weights.

The weights come from the auxiliary constraint alone, or from the stacked
problem at ``theta_hat`` when an over-identified score is supplied.  With no
auxiliary columns the result is the ordinary ECDF.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .auxiliary import AuxMatrix
from .el_core import solve_inner
from .errors import ConvergenceError, InfeasibleError
from .estimate import profile_solution
from .infer import plugin_moments, projection_residual, psd_pinv
from .model import MomentModel, PPIDataset

QUANTILE_SLACK = 1e-12


@dataclass(frozen=True)
class CalibratedCDF:
    support_y: np.ndarray
    weights: np.ndarray
    cumulative: np.ndarray
    rows_y: np.ndarray = field(repr=False)
    rows_x: np.ndarray = field(repr=False)
    rows_w: np.ndarray = field(repr=False)
    uniform: bool = False
    fallback: Optional[str] = None

    @property
    def n(self) -> int:
        return self.rows_y.size


def _from_weights(y, x, w, uniform, fallback=None) -> CalibratedCDF:
    order = np.argsort(y, kind="stable")
    return CalibratedCDF(y[order], w[order], np.cumsum(w[order]), y, x, w, uniform, fallback)


def build_cdf(dataset: PPIDataset, aux: Optional[AuxMatrix] = None, model: Optional[MomentModel] = None,
              theta_hat=None, tol: float = 1e-10) -> CalibratedCDF:
    """``F_hat(y, x) = sum_i w_i I(Y_i <= y, X_i <= x)``.

    With ``model`` and ``theta_hat`` the score block ``g_theta_hat`` joins the
    auxiliary block in the weight solve.  An infeasible constraint falls back
    to the ECDF with a warning.
    """
    n = dataset.n
    y = np.array(dataset.labeled_y)
    x = np.array(dataset.labeled_x)
    r = 0 if aux is None else aux.r
    if r == 0 and model is None:
        return _from_weights(y, x, np.full(n, 1.0 / n), True)
    try:
        if model is not None:
            if theta_hat is None:
                raise ValueError("a score block needs theta_hat")
            sol = profile_solution(dataset, model, aux, theta_hat, tol)
        else:
            sol = solve_inner(aux.hc, tol=tol)
    except (InfeasibleError, ConvergenceError) as exc:
        warnings.warn(f"weight solve failed ({exc}); using the ECDF", RuntimeWarning, stacklevel=2)
        return _from_weights(y, x, np.full(n, 1.0 / n), True, fallback=str(exc))
    return _from_weights(y, x, sol.weights, False)


def _indicators(cdf: CalibratedCDF, y, x=None) -> np.ndarray:
    """``(n, k)`` matrix of ``I(Y_i <= y_k, X_i <= x)``."""
    ind = cdf.rows_y[:, None] <= np.atleast_1d(np.asarray(y, dtype=float))[None, :]
    if x is not None:
        x = np.asarray(x, dtype=float).reshape(-1)
        ind &= np.all(cdf.rows_x <= x[None, :], axis=1)[:, None]
    return ind


def cdf_at(cdf: CalibratedCDF, y, x=None):
    """Right-continuous evaluation; ``x=None`` gives the marginal of ``Y``."""
    scalar = np.ndim(y) == 0
    yy = np.atleast_1d(np.asarray(y, dtype=float))
    if x is not None:
        ind = _indicators(cdf, yy, x)
        out = ind.sum(axis=0) / cdf.n if cdf.uniform else cdf.rows_w @ ind
    else:
        count = np.searchsorted(cdf.support_y, yy, side="right")
        if cdf.uniform:
            out = count / cdf.n
        else:
            out = np.where(count > 0, cdf.cumulative[np.maximum(count - 1, 0)], 0.0)
    return float(out[0]) if scalar else out


def quantile(cdf: CalibratedCDF, tau: float) -> float:
    """Generalized inverse ``inf{y : F_hat(y) >= tau}``, always an observed ``Y``."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    if cdf.uniform:
        k = max(math.ceil(tau * cdf.n - QUANTILE_SLACK * cdf.n), 1)
        return float(cdf.support_y[k - 1])
    idx = int(np.searchsorted(cdf.cumulative, tau - QUANTILE_SLACK, side="left"))
    return float(cdf.support_y[min(idx, cdf.n - 1)])


# ------------------------------------------------------------------ variance

def sigma2_aux_only(F, rho_hI, cov_h_inv, gamma) -> float:
    """``F(1-F) - (1-gamma) rho' C^-1 rho`` for an auxiliary-only weight solve."""
    rho = np.asarray(rho_hI, dtype=float).reshape(-1)
    return float(F * (1.0 - F) - (1.0 - gamma) * rho @ np.atleast_2d(cov_h_inv) @ rho)


def sigma2_general(F, rho_hI, cov_h_inv, gamma, rho_gI, cov_gh, pi) -> float:
    """Variance with a score block: ``F(1-F) - rho'C^-1 rho - a'Pi a + gamma b'C^-1 b``.

    ``a = rho_gI - Cov(g,h) C^-1 rho_hI`` and ``b = Cov(h,g) Pi a - rho_hI``.
    With ``Pi = 0`` this equals :func:`sigma2_aux_only`.
    """
    rho = np.asarray(rho_hI, dtype=float).reshape(-1)
    cinv = np.atleast_2d(cov_h_inv)
    cov_gh = np.atleast_2d(cov_gh)
    a = np.asarray(rho_gI, dtype=float).reshape(-1) - cov_gh @ cinv @ rho
    b = cov_gh.T @ pi @ a - rho
    return float(F * (1.0 - F) - rho @ cinv @ rho - a @ pi @ a + gamma * b @ cinv @ b)


@dataclass
class VarianceContext:
    """Plug-in pieces shared by every query point of one fitted CDF."""

    cdf: CalibratedCDF
    hc: np.ndarray
    cov_h_inv: np.ndarray
    gamma: float
    g: Optional[np.ndarray] = None
    cov_gh: Optional[np.ndarray] = None
    pi: Optional[np.ndarray] = None

    def variance(self, y, x=None) -> np.ndarray:
        """Plug-in asymptotic variance of ``sqrt(n){F_hat(y, x) - F(y, x)}`` at each ``y``; clipped at 0."""
        yy = np.atleast_1d(np.asarray(y, dtype=float))
        F = np.atleast_1d(cdf_at(self.cdf, yy, x)) if x is not None else np.atleast_1d(cdf_at(self.cdf, yy))
        ind = _indicators(self.cdf, yy, x).astype(float)
        n = ind.shape[0]
        ic = ind - ind.mean(axis=0)
        rho_h = (self.hc - self.hc.mean(axis=0)).T @ ic / n
        out = np.empty(yy.size)
        for k in range(yy.size):
            if self.g is None:
                if self.hc.shape[1] == 0:
                    val = F[k] * (1.0 - F[k])
                else:
                    val = sigma2_aux_only(F[k], rho_h[:, k], self.cov_h_inv, self.gamma)
            else:
                rho_g = (self.g - self.g.mean(axis=0)).T @ ic[:, k] / n
                val = sigma2_general(F[k], rho_h[:, k], self.cov_h_inv, self.gamma, rho_g, self.cov_gh, self.pi)
            degenerate = F[k] <= QUANTILE_SLACK or F[k] >= 1.0 - QUANTILE_SLACK
            out[k] = 0.0 if degenerate else max(val, 0.0)
        return out


def variance_context(dataset: PPIDataset, cdf: CalibratedCDF, aux: Optional[AuxMatrix] = None,
                     model: Optional[MomentModel] = None, theta_hat=None) -> VarianceContext:
    n = dataset.n
    hc = np.zeros((n, 0)) if aux is None or cdf.fallback else aux.hc
    hcc = hc - hc.mean(axis=0)
    cov_h_inv = psd_pinv(hcc.T @ hcc / n, "Cov(h)") if hc.shape[1] else np.zeros((0, 0))
    ctx = VarianceContext(cdf, hc, cov_h_inv, dataset.gamma_n)
    if model is not None:
        pm = plugin_moments(dataset, model, None if cdf.fallback else aux, theta_hat)
        ctx.g = model.score(theta_hat, dataset.labeled_y, dataset.labeled_x)
        ctx.cov_gh = pm.cov_gh
        ctx.pi = projection_residual(pm)
        if hc.shape[1] == 0:
            ctx.cov_gh = np.zeros((model.q, 0))
    return ctx


@dataclass(frozen=True)
class PointwiseResult:
    y: float
    F_hat: float
    sigma2: float
    lower: float
    upper: float
    degenerate: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def pointwise_variance(dataset: PPIDataset, aux: Optional[AuxMatrix], y, x=None, model=None, theta_hat=None,
                       alpha: float = 0.1, cdf: Optional[CalibratedCDF] = None) -> PointwiseResult:
    """Plug-in variance of the calibrated CDF at ``(y, x)`` with a Wald interval for ``F(y, x)``."""
    if cdf is None:
        cdf = build_cdf(dataset, aux, model, theta_hat)
    ctx = variance_context(dataset, cdf, aux, model, theta_hat)
    F = float(cdf_at(cdf, float(y), x))
    s2 = float(ctx.variance([float(y)], x)[0])
    half = stats.norm.ppf(1 - alpha / 2) * math.sqrt(s2 / dataset.n)
    degenerate = F <= QUANTILE_SLACK or F >= 1 - QUANTILE_SLACK
    return PointwiseResult(float(y), F, s2, max(F - half, 0.0), min(F + half, 1.0), degenerate)


@dataclass(frozen=True)
class QuantileInterval:
    tau: float
    estimate: float
    lower: float
    upper: float
    fallback: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def quantile_ci(cdf: CalibratedCDF, ctx: VarianceContext, tau: float, alpha: float = 0.1) -> QuantileInterval:
    """Invert the pointwise band ``F_hat(y) -/+ z sigma(y) / sqrt(n)`` at level ``tau``.

    The lower end is the first support point whose upper band reaches ``tau``;
    the upper end is the first whose lower band does.  When the lower band
    never reaches ``tau`` the largest observation is used and flagged.
    """
    ys = np.unique(cdf.support_y)
    F = np.atleast_1d(cdf_at(cdf, ys))
    sd = np.sqrt(ctx.variance(ys))
    c = stats.norm.ppf(1 - alpha / 2) / math.sqrt(cdf.n)
    hi_band = F + c * sd
    lo_band = F - c * sd
    lo_idx = np.flatnonzero(hi_band >= tau - QUANTILE_SLACK)
    up_idx = np.flatnonzero(lo_band >= tau - QUANTILE_SLACK)
    fallback = up_idx.size == 0 or lo_idx.size == 0
    lower = float(ys[lo_idx[0]]) if lo_idx.size else float(ys[0])
    upper = float(ys[up_idx[0]]) if up_idx.size else float(ys[-1])
    return QuantileInterval(tau, quantile(cdf, tau), lower, upper, fallback)


def export_cdf_csv(cdf: CalibratedCDF, path) -> None:
    """Two-column CSV ``y,F_hat`` at each distinct observed ``y``."""
    ys = np.unique(cdf.support_y)
    vals = np.atleast_1d(cdf_at(cdf, ys))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["y", "F_hat"])
        for a, b in zip(ys, vals):
            w.writerow([repr(float(a)), repr(float(b))])
