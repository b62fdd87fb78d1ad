"""Plug-in variances, weighted chi-square calibration and likelihood-ratio sets.

All covariances are centered by labeled-sample means with divisor ``n``.
Near-singular matrices are inverted by eigen-truncation at ``1e-10`` times the
largest eigenvalue, with a warning when any direction is discarded.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize, stats

from .auxiliary import AuxMatrix
from .errors import ConvergenceError, InfeasibleError, RankError
from .estimate import ELFit, profile_solution
from .model import MomentModel, PPIDataset

TRUNC_TOL = 1e-10
MAX_DOUBLINGS = 50


class TruncationWarning(RuntimeWarning):
    """A near-singular covariance was inverted on a reduced subspace."""


def _sym(a):
    return 0.5 * (a + a.T)


def psd_pinv(mat: np.ndarray, name: str = "matrix", ref: float = 0.0) -> np.ndarray:
    """Pseudo-inverse of a symmetric PSD matrix by eigen-truncation.

    Eigenvalues at or below ``1e-10 * max(lambda_max, ref)`` are discarded;
    ``ref`` lets a difference of covariances be judged against its parts.
    """
    mat = _sym(np.atleast_2d(np.asarray(mat, dtype=float)))
    if mat.size == 0:
        return mat.copy()
    vals, vecs = np.linalg.eigh(mat)
    top = max(vals.max(), ref)
    keep = vals > TRUNC_TOL * top
    if top <= 0 or not keep.all():
        warnings.warn(f"{name} is near-singular; {int((~keep).sum())} direction(s) truncated",
                      TruncationWarning, stacklevel=3)
    inv = (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T
    return _sym(inv)


def psd_power(mat: np.ndarray, power: float) -> np.ndarray:
    """Symmetric matrix power through the eigendecomposition; negative eigenvalues are clipped."""
    vals, vecs = np.linalg.eigh(_sym(mat))
    vals = np.clip(vals, 0.0, None)
    if power < 0:
        pos = vals > TRUNC_TOL * max(vals.max(), 0.0)
        out = np.zeros_like(vals)
        out[pos] = vals[pos] ** power
    else:
        out = vals ** power
    return _sym((vecs * out) @ vecs.T)


@dataclass(frozen=True)
class PluginMoments:
    J_hat: np.ndarray
    cov_g: np.ndarray
    cov_h: np.ndarray
    cov_gh: np.ndarray
    U_hat: np.ndarray
    gamma_n: float
    cov_h_inv: np.ndarray = field(repr=False, default=None)

    @property
    def p(self) -> int:
        return self.J_hat.shape[1]

    @property
    def q(self) -> int:
        return self.J_hat.shape[0]

    @property
    def r(self) -> int:
        return self.cov_h.shape[0]

    @property
    def adjustment(self) -> np.ndarray:
        """``cov_gh cov_h^{-1} cov_gh'``, the part of ``cov_g`` explained by the auxiliary."""
        if self.r == 0:
            return np.zeros((self.q, self.q))
        return _sym(self.cov_gh @ self.cov_h_inv @ self.cov_gh.T)


def moments_from_matrices(J, cov_g, cov_h, cov_gh, gamma_n) -> PluginMoments:
    """Assemble plug-in moments from given blocks (used for hand-built instances)."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    cov_g = np.atleast_2d(np.asarray(cov_g, dtype=float))
    cov_h = np.atleast_2d(np.asarray(cov_h, dtype=float)) if np.size(cov_h) else np.zeros((0, 0))
    cov_gh = np.asarray(cov_gh, dtype=float).reshape(cov_g.shape[0], cov_h.shape[0])
    cov_h_inv = psd_pinv(cov_h, "Cov(h)") if cov_h.size else cov_h
    adj = _sym(cov_gh @ cov_h_inv @ cov_gh.T) if cov_h.size else np.zeros_like(cov_g)
    return PluginMoments(J, _sym(cov_g), _sym(cov_h), cov_gh, _sym(cov_g - adj), float(gamma_n), cov_h_inv)


def plugin_moments(dataset: PPIDataset, model: MomentModel, aux: Optional[AuxMatrix], theta_hat) -> PluginMoments:
    """Labeled-sample plug-ins at ``theta_hat``."""
    y, x = dataset.labeled_y, dataset.labeled_x
    n = dataset.n
    g = model.score(theta_hat, y, x)
    J = model.jacobian(theta_hat, y, x).mean(axis=0)
    h = np.zeros((n, 0)) if aux is None else aux.hc
    gc = g - g.mean(axis=0)
    hc = h - h.mean(axis=0)
    return moments_from_matrices(J, gc.T @ gc / n, hc.T @ hc / n, gc.T @ hc / n, dataset.gamma_n)


def _u_inv(pm: PluginMoments) -> np.ndarray:
    ref = float(np.linalg.eigvalsh(pm.cov_g).max()) if pm.q else 0.0
    return psd_pinv(pm.U_hat, "U", ref)


def _inv_jacobian(pm: PluginMoments) -> np.ndarray:
    try:
        jinv = np.linalg.inv(pm.J_hat)
    except np.linalg.LinAlgError as exc:
        raise RankError("the Jacobian estimate is singular; the score must have rank p") from exc
    if np.linalg.cond(pm.J_hat) > 1e14:
        raise RankError("the Jacobian estimate is numerically singular; the score must have rank p")
    return jinv


def sigma_hat_just_identified(pm: PluginMoments) -> np.ndarray:
    jinv = _inv_jacobian(pm)
    return _sym(jinv @ (pm.cov_g - (1.0 - pm.gamma_n) * pm.adjustment) @ jinv.T)


def sigma_hat_general(pm: PluginMoments) -> np.ndarray:
    """``(M [M + gamma J'U^-1 A U^-1 J]^-1 M)^-1`` with ``M = J'U^-1 J``; valid for any ``q >= p``."""
    u_inv = _u_inv(pm)
    J = pm.J_hat
    M = _sym(J.T @ u_inv @ J)
    B = _sym(J.T @ u_inv @ pm.adjustment @ u_inv @ J)
    inner = np.linalg.inv(M + pm.gamma_n * B)
    return _sym(np.linalg.inv(_sym(M @ inner @ M)))


def sigma_hat(pm: PluginMoments) -> np.ndarray:
    """Asymptotic covariance of ``sqrt(n)(theta_hat - theta*)``."""
    if pm.q == pm.p:
        return sigma_hat_just_identified(pm)
    return sigma_hat_general(pm)


def supervised_sigma(pm: PluginMoments) -> np.ndarray:
    """Supervised benchmark: sandwich for ``q = p``, ``(J' Cov(g)^-1 J)^-1`` otherwise."""
    if pm.q == pm.p:
        jinv = _inv_jacobian(pm)
        return _sym(jinv @ pm.cov_g @ jinv.T)
    return _sym(np.linalg.inv(pm.J_hat.T @ psd_pinv(pm.cov_g, "Cov(g)") @ pm.J_hat))


def lambda_matrix_just_identified(pm: PluginMoments) -> np.ndarray:
    """``I + gamma M^{1/2} J^-1 A J^-T M^{1/2}`` with ``M = J'U^-1 J``."""
    jinv = _inv_jacobian(pm)
    root = psd_power(_sym(pm.J_hat.T @ _u_inv(pm) @ pm.J_hat), 0.5)
    return _sym(np.eye(pm.p) + pm.gamma_n * root @ jinv @ pm.adjustment @ jinv.T @ root)


def lambda_matrix_general(pm: PluginMoments) -> np.ndarray:
    """``I + gamma M^{-1/2} J'U^-1 A U^-1 J M^{-1/2}``; valid for any ``q >= p``."""
    J = pm.J_hat
    u_inv = _u_inv(pm)
    root = psd_power(_sym(J.T @ u_inv @ J), -0.5)
    return _sym(np.eye(pm.p) + pm.gamma_n * root @ J.T @ u_inv @ pm.adjustment @ u_inv @ J @ root)


def lambda_matrix(pm: PluginMoments) -> np.ndarray:
    if pm.q == pm.p:
        return lambda_matrix_just_identified(pm)
    return lambda_matrix_general(pm)


def lambda_hat(pm: PluginMoments) -> np.ndarray:
    """Eigenvalues (ascending) weighting the chi-square limit of the LR statistic."""
    if pm.gamma_n == 0 or pm.r == 0:
        return np.ones(pm.p)
    return np.linalg.eigvalsh(lambda_matrix(pm))


def weighted_chisq_quantile(lambdas, alpha: float = 0.1, mc_draws: int = 200_000, seed=0) -> float:
    """Monte Carlo ``1 - alpha`` quantile of ``sum_j lambda_j xi_j^2``."""
    lam = np.asarray(lambdas, dtype=float).reshape(-1)
    if not np.all(np.isfinite(lam)) or np.any(lam < 0):
        raise ValueError("weights must be finite and non-negative")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((mc_draws, lam.size))
    return float(np.quantile((xi * xi) @ lam, 1.0 - alpha))


def el_ratio_stat(dataset: PPIDataset, model: MomentModel, aux: Optional[AuxMatrix], theta0,
                  fit: ELFit, tol: float = 1e-10, t0=None) -> float:
    """``2{l_n(theta_hat) - l_n(theta0)}``; ``inf`` when ``theta0`` is not attainable."""
    try:
        sol = profile_solution(dataset, model, aux, np.asarray(theta0, dtype=float).reshape(model.p), tol, t0=t0)
    except (InfeasibleError, ConvergenceError):
        return math.inf
    return 2.0 * (fit.log_el - sol.log_el)


def wald_intervals(theta_hat, sigma, n: int, alpha: float) -> np.ndarray:
    z = stats.norm.ppf(1.0 - alpha / 2)
    half = z * np.sqrt(np.clip(np.diag(sigma), 0.0, None) / n)
    return np.column_stack([theta_hat - half, theta_hat + half])


@dataclass(frozen=True)
class LRSet:
    """Inverted likelihood-ratio confidence set.

    For a scalar parameter ``lower``/``upper`` are the interval ends; a
    missing crossing is reported as an infinite end with the matching flag.
    For ``p > 1`` only ``contains`` and the Wald ellipsoid are available.
    """

    critical_value: float
    lower: Optional[float] = None
    upper: Optional[float] = None
    unbounded_lower: bool = False
    unbounded_upper: bool = False
    contains: Optional[Callable] = field(default=None, repr=False, compare=False)
    ellipsoid_center: Optional[np.ndarray] = None
    ellipsoid_shape: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        if self.lower is not None or self.upper is not None:
            return {"lower": self.lower, "upper": self.upper,
                    "unbounded_lower": self.unbounded_lower, "unbounded_upper": self.unbounded_upper}
        return {"ellipsoid_center": self.ellipsoid_center.tolist(),
                "ellipsoid_shape": self.ellipsoid_shape.tolist(), "radius_sq": self.critical_value}


def lr_confidence_set(dataset: PPIDataset, model: MomentModel, aux: Optional[AuxMatrix], fit: ELFit,
                      critical_value: float, sigma: Optional[np.ndarray] = None, tol: float = 1e-10) -> LRSet:
    """``{theta : T_n(theta) <= critical_value}``.

    Scalar case: outward bracketing from ``theta_hat`` by doubling a Wald-sized
    step, then Brent's method on ``T_n - critical_value``.
    """
    theta_hat = fit.theta_hat
    if sigma is None:
        sigma = sigma_hat(plugin_moments(dataset, model, aux, theta_hat))
    n = dataset.n
    warm = {"t": fit.multipliers}

    def stat(theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        try:
            sol = profile_solution(dataset, model, aux, theta, tol, t0=warm["t"])
        except (InfeasibleError, ConvergenceError):
            return math.inf
        warm["t"] = sol.multipliers
        return 2.0 * (fit.log_el - sol.log_el)

    def contains(theta):
        return stat(theta) <= critical_value

    if model.p > 1:
        return LRSet(critical_value, contains=contains, ellipsoid_center=theta_hat.copy(),
                     ellipsoid_shape=sigma / n)

    centre = float(theta_hat[0])
    width = math.sqrt(max(critical_value, 1e-12) * max(float(sigma[0, 0]), 1e-300) / n)
    if not np.isfinite(width) or width == 0:
        width = 1e-3 * (1.0 + abs(centre))
    ends = []
    for sign in (-1.0, 1.0):
        inner, step = centre, width
        outer = None
        for _ in range(MAX_DOUBLINGS):
            cand = float(model.project(np.array([centre + sign * step]))[0])
            val = stat(cand)
            if val > critical_value:
                outer = cand
                break
            inner = cand
            if cand != centre + sign * step:
                break  # pinned at the parameter box
            step *= 2.0
        if outer is None:
            ends.append((inner, True))
            continue
        warm["t"] = fit.multipliers
        big = critical_value + 1e6

        def crossing(t):
            v = stat(t)
            return (big if not np.isfinite(v) else v) - critical_value

        scale = max(abs(centre), width)
        root = optimize.brentq(crossing, inner, outer, xtol=1e-12 * scale, rtol=4 * np.finfo(float).eps,
                               maxiter=200)
        ends.append((root, False))
    (lo, lo_open), (hi, hi_open) = ends
    return LRSet(critical_value, lower=-math.inf if lo_open else lo, upper=math.inf if hi_open else hi,
                 unbounded_lower=lo_open, unbounded_upper=hi_open, contains=contains)


@dataclass(frozen=True)
class SafetyReport:
    min_eig_gap: float
    threshold: Optional[float] = None
    gamma_n: float = 0.0
    condition_holds: Optional[bool] = None

    def to_dict(self) -> dict:
        return {"min_eig_gap": self.min_eig_gap, "threshold": self.threshold,
                "gamma_n": self.gamma_n, "condition_holds": self.condition_holds}


def projection_residual(pm: PluginMoments) -> np.ndarray:
    """``U^-1 - U^-1 J (J'U^-1 J)^-1 J'U^-1``; zero when ``q = p``."""
    u_inv = _u_inv(pm)
    J = pm.J_hat
    M = J.T @ u_inv @ J
    return _sym(u_inv - u_inv @ J @ np.linalg.solve(M, J.T @ u_inv))


def safety_threshold(pm: PluginMoments) -> float:
    """Largest labeled fraction for which the over-identified fit is certified safe.

    ``1 / (1 + lambda_max(C^{-1/2} Cov(h,g) Pi Cov(g,h) C^{-1/2}))`` with ``C = Cov(h)``.
    """
    if pm.r == 0:
        return 1.0
    root = psd_power(pm.cov_h, -0.5)
    mat = root @ pm.cov_gh.T @ projection_residual(pm) @ pm.cov_gh @ root
    return float(1.0 / (1.0 + max(np.linalg.eigvalsh(_sym(mat)).max(), 0.0)))


def safety_certificate(pm: PluginMoments) -> SafetyReport:
    gap = supervised_sigma(pm) - sigma_hat(pm)
    min_eig = float(np.linalg.eigvalsh(_sym(gap)).min())
    if pm.q == pm.p:
        return SafetyReport(min_eig, gamma_n=pm.gamma_n)
    thr = safety_threshold(pm)
    return SafetyReport(min_eig, thr, pm.gamma_n, bool(pm.gamma_n <= thr))


@dataclass(frozen=True)
class InferenceReport:
    theta_hat: np.ndarray
    sigma_hat: np.ndarray
    lambda_hat: np.ndarray
    critical_value: float
    wald: np.ndarray
    safety: SafetyReport
    alpha: float
    t_n: Optional[float] = None
    theta0: Optional[np.ndarray] = None
    lr_interval: Optional[LRSet] = None

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.tolist(),
            "alpha": self.alpha,
            "sigma_hat": self.sigma_hat.tolist(),
            "lambda_hat": self.lambda_hat.tolist(),
            "critical_value": self.critical_value,
            "t_n": None if self.t_n is None else (self.t_n if math.isfinite(self.t_n) else "inf"),
            "theta0": None if self.theta0 is None else self.theta0.tolist(),
            "wald": self.wald.tolist(),
            "lr_interval": None if self.lr_interval is None else self.lr_interval.to_dict(),
            "safety": self.safety.to_dict(),
        }


def infer(dataset: PPIDataset, model: MomentModel, fit: ELFit, alpha: float = 0.1, theta0=None,
          lr_set: bool = False, mc_draws: int = 200_000, seed=0) -> InferenceReport:
    """Plug-ins, calibrated critical value, Wald intervals and optional LR quantities."""
    pm = plugin_moments(dataset, model, fit.aux, fit.theta_hat)
    sig = sigma_hat(pm)
    lam = lambda_hat(pm)
    crit = weighted_chisq_quantile(lam, alpha, mc_draws, seed)
    t_n = None
    if theta0 is not None:
        theta0 = np.asarray(theta0, dtype=float).reshape(model.p)
        t_n = el_ratio_stat(dataset, model, fit.aux, theta0, fit)
    lr = lr_confidence_set(dataset, model, fit.aux, fit, crit, sig) if lr_set else None
    return InferenceReport(fit.theta_hat, sig, lam, crit, wald_intervals(fit.theta_hat, sig, dataset.n, alpha),
                           safety_certificate(pm), alpha, t_n, theta0, lr)
