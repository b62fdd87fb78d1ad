"""Inner empirical likelihood problem for a fixed constraint matrix.

Given rows ``z_i`` (``n x d``) we maximize ``sum log w_i`` over probability
vectors with ``sum w_i z_i = 0``.  The solution is ``w_i = 1 / (n (1 + t'z_i))``
where the multiplier ``t`` minimizes the convex dual ``-sum log*(1 + t'z_i)``.
``log*`` is the logarithm above ``1/n`` and its quadratic Taylor extension
below, so the dual is finite everywhere and damped Newton cannot cross the pole.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog

from .errors import ConvergenceError, InfeasibleError

DEGENERATE_TOL = 1e-12
RANK_TOL = 1e-10
COND_LIMIT = 1e12
DIVERGENCE_NORM = 1e8


class OutsideDomainWarning(UserWarning):
    """Log-EL evaluated where some ``1 + t'z_i`` is below ``1/n``."""


@dataclass(frozen=True)
class ELInnerSolution:
    multipliers: np.ndarray
    weights: np.ndarray
    log_el: float
    converged: bool
    newton_iters: int
    dropped: tuple = ()
    rank: int = 0
    grad_norm: float = 0.0


def log_star(u: np.ndarray, eps: float):
    """Owen's pseudo-logarithm and its first two derivatives."""
    u = np.asarray(u, dtype=float)
    inside = u >= eps
    safe = np.where(inside, u, 1.0)
    r = u / eps
    val = np.where(inside, np.log(safe), np.log(eps) - 1.5 + 2.0 * r - 0.5 * r * r)
    d1 = np.where(inside, 1.0 / safe, (2.0 - r) / eps)
    d2 = np.where(inside, -1.0 / (safe * safe), -1.0 / (eps * eps))
    return val, d1, d2


def degenerate_columns(z: np.ndarray, scale: Optional[np.ndarray] = None) -> np.ndarray:
    """Indices of columns that are numerically identically zero.

    A column counts as zero when its largest magnitude is below ``1e-12``
    relative to ``max(1, scale_j)``; ``scale`` defaults to the column's own
    pre-centering magnitude supplied by the caller, else 1.
    """
    z = np.asarray(z, dtype=float)
    if z.shape[1] == 0:
        return np.zeros(0, dtype=int)
    ref = np.ones(z.shape[1]) if scale is None else np.maximum(1.0, np.asarray(scale, dtype=float))
    return np.flatnonzero(np.max(np.abs(z), axis=0) <= DEGENERATE_TOL * ref)


def _as_matrix(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim != 2:
        raise ValueError("constraint matrix must be 2-d")
    if not np.all(np.isfinite(z)):
        raise ValueError("constraint matrix contains non-finite values")
    return z


def log_el_at(z, t) -> float:
    """``-sum log*(1 + t'z_i) - n log n``; equals ``sum log w_i`` inside the domain."""
    z = _as_matrix(z)
    n = z.shape[0]
    u = 1.0 + z @ np.asarray(t, dtype=float).reshape(-1)
    if np.any(u < 1.0 / n):
        warnings.warn("multiplier outside the log domain; using the quadratic extension",
                      OutsideDomainWarning, stacklevel=2)
    val, _, _ = log_star(u, 1.0 / n)
    return float(-val.sum() - n * np.log(n))


def _reduce(z: np.ndarray):
    """Column scaling plus an orthonormal basis of the row space.

    Returns ``(zr, back)`` with ``zr = z @ back`` of full column rank.
    """
    rms = np.sqrt(np.mean(z * z, axis=0))
    zs = z / rms
    if zs.shape[1] == 1:
        return zs, np.diag(1.0 / rms)
    _, s, vt = np.linalg.svd(zs, full_matrices=False)
    keep = s > RANK_TOL * s[0]
    if keep.all():
        return zs, np.diag(1.0 / rms)
    v = vt[keep].T
    return zs @ v, (v.T / rms).T


def solve_inner(z, tol: float = 1e-10, max_iter: int = 200, t0=None) -> ELInnerSolution:
    """Solve for the EL multipliers of constraint matrix ``z``.

    Parameters
    ----------
    z : array, shape (n, d)
        Row ``i`` stacks observation ``i``'s constraint values.
    tol : float
        Convergence tolerance on ``||sum z_i / (1 + t'z_i)|| / n``.
    max_iter : int
        Newton iteration cap.
    t0 : array, optional
        Warm start for the multipliers.

    Raises
    ------
    InfeasibleError
        Zero is not in the interior of the convex hull of the rows.
    ConvergenceError
        The iteration cap was hit; ``err.last`` holds the last iterate.
    """
    z = _as_matrix(z)
    n, d = z.shape
    eps = 1.0 / n
    drop = degenerate_columns(z)
    live = np.setdiff1d(np.arange(d), drop)
    t_full = np.zeros(d)
    if live.size == 0:
        w = np.full(n, 1.0 / n)
        return ELInnerSolution(t_full, w, float(-n * np.log(n)), True, 0, tuple(drop.tolist()), 0)
    zl = z[:, live]
    if live.size == 1:
        col = zl[:, 0]
        if col.min() >= 0 or col.max() <= 0:
            raise InfeasibleError("zero is not inside the range of the single constraint")
    zr, back = _reduce(zl)
    k = zr.shape[1]

    if t0 is not None:
        t_init = np.asarray(t0, dtype=float).reshape(-1)[live]
        tr = np.linalg.lstsq(back, t_init, rcond=None)[0]
    else:
        tr = np.zeros(k)

    def objective(tt):
        val, d1, d2 = log_star(1.0 + zr @ tt, eps)
        return -val.sum(), d1, d2

    f, d1, d2 = objective(tr)
    it = 0
    converged = False
    gnorm = np.inf
    while it < max_iter:
        grad = -(zr.T @ d1)
        # stopping rule is stated in the caller's coordinates
        gnorm = np.linalg.norm(zl.T @ d1) / n
        if gnorm <= tol:
            converged = True
            break
        hess = (zr * (-d2)[:, None]).T @ zr
        hess = 0.5 * (hess + hess.T)
        if k > 1 and np.linalg.cond(hess) > COND_LIMIT:
            hess = hess + (1e-10 * np.trace(hess) / k) * np.eye(k)
        try:
            step = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = -grad
        slope = grad @ step
        if slope >= 0:
            step, slope = -grad, -(grad @ grad)
        alpha = 1.0
        accepted = False
        noise = 1e-12 * (1.0 + abs(f))
        for _ in range(60):
            cand = tr + alpha * step
            fc, d1c, d2c = objective(cand)
            # near the optimum the Armijo decrease is below rounding; take the full step
            if fc <= f + 1e-4 * alpha * slope or (alpha == 1.0 and -slope < noise and fc <= f + noise):
                accepted = True
                break
            alpha *= 0.5
        it += 1
        if not accepted:
            # no further decrease is representable; accept if the gradient is already tiny
            if gnorm <= 1e3 * tol * max(1.0, np.abs(zl).max()):
                converged = True
            break
        tr, f, d1, d2 = cand, fc, d1c, d2c
        if np.linalg.norm(back @ tr) > DIVERGENCE_NORM:
            raise InfeasibleError("dual diverged: zero is not in the convex hull interior")

    t_full[live] = back @ tr
    u = 1.0 + zl @ t_full[live]
    if np.any(u < eps * (1.0 - 1e-9)):
        raise InfeasibleError("constraint is not attainable with positive weights")
    if not converged:
        w = 1.0 / (n * u)
        last = ELInnerSolution(t_full, w, float(-np.log(u).sum() - n * np.log(n)), False, it,
                               tuple(drop.tolist()), k, gnorm)
        raise ConvergenceError(f"inner EL solver did not converge in {it} iterations "
                               f"(gradient {gnorm:.3e})", last=last)
    w = 1.0 / (n * u)
    log_el = float(-np.log(u).sum() - n * np.log(n))
    return ELInnerSolution(t_full, w, log_el, True, it, tuple(drop.tolist()), k, gnorm)


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    margin: float
    weights: Optional[np.ndarray] = field(default=None, repr=False)


def feasibility_check(z) -> Feasibility:
    """Check whether zero lies in the interior of the convex hull of the rows.

    For one column the check is the exact sign test.  Otherwise a linear
    program maximizes the smallest weight ``s`` of a probability vector with
    ``sum w_i z_i = 0``; the margin reported is ``n * s`` (1 when the uniform
    weights already satisfy the constraint, 0 on the boundary).
    """
    z = _as_matrix(z)
    n, d = z.shape
    if d == 1:
        col = z[:, 0]
        lo, hi = col.min(), col.max()
        ok = lo < 0 < hi or (lo == 0 == hi)
        return Feasibility(bool(ok), float(min(hi, -lo)) if ok else 0.0)
    # variables (w_1..w_n, s); maximize s
    c = np.zeros(n + 1)
    c[-1] = -1.0
    a_eq = np.zeros((d + 1, n + 1))
    a_eq[:d, :n] = z.T
    a_eq[d, :n] = 1.0
    b_eq = np.zeros(d + 1)
    b_eq[d] = 1.0
    a_ub = np.hstack([-np.eye(n), np.ones((n, 1))])
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(n), A_eq=a_eq, b_eq=b_eq,
                  bounds=[(0, None)] * n + [(None, 1.0 / n)], method="highs")
    if res.status != 0:
        return Feasibility(False, 0.0)
    s = float(res.x[-1])
    return Feasibility(s > 1e-12, n * s, res.x[:n])
