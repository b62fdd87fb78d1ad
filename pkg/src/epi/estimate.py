"""EPI point estimation by profiling the stacked empirical likelihood.

For a just-identified score the estimate is found in two steps: weights from
the auxiliary constraint alone, then the weighted estimating equation.  For
an over-identified score the profile log-EL is maximized directly with a
quasi-Newton outer loop around the inner multiplier solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .auxiliary import AuxMatrix, AuxSpec, build_aux
from .el_core import ELInnerSolution, solve_inner
from .errors import ConvergenceError, InfeasibleError, RankError
from .model import MomentModel, PPIDataset, ProblemConfig, Tolerances

log = logging.getLogger(__name__)

MODES = ("two_step", "full_profile", "supervised_el", "supervised_plain")


@dataclass(frozen=True)
class ELFit:
    theta_hat: np.ndarray
    weights: np.ndarray
    multipliers: np.ndarray
    log_el: float
    mode: str
    converged: bool = True
    path: list = field(default_factory=list, repr=False)
    diagnostics: dict = field(default_factory=dict)
    aux: Optional[AuxMatrix] = field(default=None, repr=False)

    @property
    def p(self) -> int:
        return self.theta_hat.size

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.tolist(),
            "log_el": self.log_el,
            "mode": self.mode,
            "converged": self.converged,
            "multipliers": self.multipliers.tolist(),
            "n_outer_iters": len(self.path),
            "aux_dim": 0 if self.aux is None else self.aux.r,
            "dropped_aux_columns": [] if self.aux is None else list(self.aux.dropped_columns),
            "diagnostics": {k: v for k, v in self.diagnostics.items() if _jsonable(v)},
        }


def _jsonable(v) -> bool:
    return isinstance(v, (str, int, float, bool, type(None), list, tuple))


def _aux_block(aux: Optional[AuxMatrix], n: int) -> np.ndarray:
    if aux is None:
        return np.zeros((n, 0))
    if aux.n != n:
        raise ValueError(f"aux has {aux.n} rows but the dataset has {n} labeled rows")
    return aux.hc


def stacked_constraints(dataset: PPIDataset, model: MomentModel, aux: Optional[AuxMatrix], theta) -> np.ndarray:
    """Rows ``(g_theta(Y_i, X_i), hc_i)`` of the stacked constraint matrix."""
    g = model.score(theta, dataset.labeled_y, dataset.labeled_x)
    return np.hstack([g, _aux_block(aux, dataset.n)])


def profile_solution(dataset: PPIDataset, model: MomentModel, aux: Optional[AuxMatrix], theta,
                     tol: float = 1e-10, t0=None) -> ELInnerSolution:
    """Inner solve at ``theta``; ``log_el`` of the result is the profile ``l_n(theta)``."""
    return solve_inner(stacked_constraints(dataset, model, aux, theta), tol=tol, t0=t0)


def _weighted_root(dataset, model, weights, theta0, tol, max_iter):
    """Damped Newton on ``sum_i w_i g_theta(Y_i, X_i) = 0``."""
    y, x = dataset.labeled_y, dataset.labeled_x
    theta = model.project(np.asarray(theta0, dtype=float).reshape(model.p))

    def resid(th):
        return weights @ model.score(th, y, x)

    f = resid(theta)
    scale = max(1.0, float(weights @ np.abs(model.score(theta, y, x)).max(axis=1)))
    path = []
    for it in range(max_iter):
        fn = float(np.linalg.norm(f))
        path.append({"iter": it, "theta": theta.tolist(), "residual": fn})
        if fn <= tol * scale:
            return theta, path, True
        jac = np.einsum("i,ijk->jk", weights, model.jacobian(theta, y, x))
        try:
            step = -np.linalg.solve(jac, f)
        except np.linalg.LinAlgError as exc:
            raise RankError("weighted Jacobian is singular; the score must have full rank p") from exc
        alpha = 1.0
        for _ in range(50):
            cand = model.project(theta + alpha * step)
            fc = resid(cand)
            if np.linalg.norm(fc) <= (1.0 - 1e-4 * alpha) * fn:
                break
            alpha *= 0.5
        else:
            # no decrease is representable; accept if already at rounding level
            return theta, path, fn <= 1e3 * tol * scale
        if np.array_equal(cand, theta):
            return theta, path, fn <= 1e3 * tol * scale
        theta, f = cand, fc
    return theta, path, False


def fit_two_step(dataset: PPIDataset, model: MomentModel, aux: Optional[AuxMatrix] = None,
                 tol: Tolerances = Tolerances(), theta_init=None) -> ELFit:
    """Weights from the auxiliary constraint, then the weighted score root.

    With no auxiliary columns the weights are uniform and the result is the
    supervised estimator.
    """
    if not model.just_identified:
        raise ValueError("the two-step fit needs q = p")
    n = dataset.n
    hc = _aux_block(aux, n)
    if hc.shape[1] == 0:
        weights = np.full(n, 1.0 / n)
        t_aux = np.zeros(0)
        base_log_el = float(-n * np.log(n))
        mode = "supervised_plain"
    else:
        try:
            sol = solve_inner(hc, tol=tol.inner_tol, max_iter=tol.inner_max_iter)
        except InfeasibleError as exc:
            raise InfeasibleError(f"auxiliary constraint is infeasible ({exc}); fall back to the supervised fit") from exc
        weights, t_aux, base_log_el = sol.weights, sol.multipliers, sol.log_el
        mode = "two_step"
    if theta_init is None:
        theta_init = model.initial_theta(dataset.labeled_y, dataset.labeled_x)
    theta, path, ok = _weighted_root(dataset, model, weights, theta_init, tol.outer_tol, tol.outer_max_iter)
    if not ok:
        raise ConvergenceError("weighted estimating equation did not converge", last=theta)
    multipliers = np.concatenate([np.zeros(model.q), t_aux])
    return ELFit(theta, weights, multipliers, base_log_el, mode, True, path, {}, aux)


def _profile_gradient(dataset, model, theta, sol: ELInnerSolution):
    """Envelope gradient of ``l_n``: ``-n sum_i w_i J_i' t_g``."""
    jac = model.jacobian(theta, dataset.labeled_y, dataset.labeled_x)
    t_g = sol.multipliers[: model.q]
    return -dataset.n * np.einsum("i,ijk,j->k", sol.weights, jac, t_g)


def _gauss_newton_curvature(dataset, model, theta, sol: ELInnerSolution, hc):
    """``n J' U^{-1} J`` from the weighted second moments of the stacked rows."""
    n = dataset.n
    y, x = dataset.labeled_y, dataset.labeled_x
    w = sol.weights
    z = np.hstack([model.score(theta, y, x), hc])
    s = (z * w[:, None]).T @ z
    jz = np.zeros((z.shape[1], model.p))
    jz[: model.q] = np.einsum("i,ijk->jk", w, model.jacobian(theta, y, x))
    sol_s = np.linalg.lstsq(s, jz, rcond=None)[0]
    h = n * jz.T @ sol_s
    return 0.5 * (h + h.T)


def _maximize_profile(dataset, model, aux, theta0, tol: Tolerances):
    hc = _aux_block(aux, dataset.n)
    n = dataset.n
    theta = model.project(np.asarray(theta0, dtype=float).reshape(model.p))
    sol = profile_solution(dataset, model, aux, theta, tol.inner_tol)
    f = -sol.log_el
    grad = -_profile_gradient(dataset, model, theta, sol)
    curv = _gauss_newton_curvature(dataset, model, theta, sol, hc)
    try:
        hinv = np.linalg.inv(curv + 1e-12 * np.trace(curv) * np.eye(model.p))
    except np.linalg.LinAlgError:
        hinv = np.eye(model.p)
    path = []
    best = (f, theta, sol)
    for it in range(tol.outer_max_iter):
        gnorm = float(np.linalg.norm(grad))
        path.append({"iter": it, "theta": theta.tolist(), "log_el": -f, "grad_norm": gnorm})
        if gnorm <= tol.outer_tol * n:
            return theta, sol, path, True
        step = -hinv @ grad
        if grad @ step >= 0:
            hinv = np.eye(model.p)
            step = -grad
        alpha = 1.0
        accepted = False
        for _ in range(60):
            cand = model.project(theta + alpha * step)
            try:
                csol = profile_solution(dataset, model, aux, cand, tol.inner_tol, t0=sol.multipliers)
            except InfeasibleError:
                alpha *= 0.5
                continue
            fc = -csol.log_el
            # projection may shorten the step, so Armijo uses the actual displacement
            if fc <= f + 1e-4 * (grad @ (cand - theta)) or \
                    (alpha == 1.0 and fc <= f + 1e-12 * (1 + abs(f))):
                accepted = True
                break
            alpha *= 0.5
        if not accepted or np.array_equal(cand, theta):
            ok = gnorm <= 1e3 * tol.outer_tol * n
            return theta, sol, path, ok
        cgrad = -_profile_gradient(dataset, model, cand, csol)
        s_vec, y_vec = cand - theta, cgrad - grad
        sy = s_vec @ y_vec
        if sy > 1e-14 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            rho = 1.0 / sy
            eye = np.eye(model.p)
            hinv = (eye - rho * np.outer(s_vec, y_vec)) @ hinv @ (eye - rho * np.outer(y_vec, s_vec)) \
                + rho * np.outer(s_vec, s_vec)
        theta, sol, f, grad = cand, csol, fc, cgrad
        if f < best[0]:
            best = (f, theta, sol)
    err = ConvergenceError(f"profile maximization did not converge in {tol.outer_max_iter} iterations",
                           last=best[1])
    raise err


def fit_full_profile(dataset: PPIDataset, model: MomentModel, aux: Optional[AuxMatrix] = None,
                     theta_init=None, tol: Tolerances = Tolerances()) -> ELFit:
    """Maximize ``l_n(theta)`` over theta with a nested inner solve.

    When ``q = p`` the maximization is started from both the supervised value
    and the two-step estimate; the better end point is returned and their
    disagreement is recorded in ``diagnostics["init_disagreement"]``.
    """
    if theta_init is None:
        theta_init = model.initial_theta(dataset.labeled_y, dataset.labeled_x)
    r = _aux_block(aux, dataset.n).shape[1]
    mode = "full_profile" if r > 0 else "supervised_el"
    starts = [np.asarray(theta_init, dtype=float).reshape(model.p)]
    if model.just_identified:
        try:
            starts.append(fit_two_step(dataset, model, aux, tol).theta_hat)
        except (InfeasibleError, ConvergenceError, RankError):
            pass
    runs = []
    last_exc = None
    for start in starts:
        try:
            runs.append(_maximize_profile(dataset, model, aux, start, tol))
        except (InfeasibleError, ConvergenceError) as exc:
            last_exc = exc
    if not runs:
        raise last_exc
    diagnostics = {}
    if len(runs) > 1:
        diagnostics["init_disagreement"] = float(np.max(np.abs(runs[0][0] - runs[1][0])))
        if diagnostics["init_disagreement"] > 1e-4:
            log.warning("profile maxima from two starts differ by %.3g", diagnostics["init_disagreement"])
    theta, sol, path, ok = max(runs, key=lambda run: run[1].log_el)
    if not ok:
        raise ConvergenceError("profile maximization stalled away from a stationary point", last=theta)
    return ELFit(theta, sol.weights, sol.multipliers, sol.log_el, mode, True, path, diagnostics, aux)


def supervised_pilot(dataset: PPIDataset, model: MomentModel, tol: Tolerances = Tolerances()) -> np.ndarray:
    """Supervised estimate: the unweighted score root, or supervised EL when ``q > p``."""
    if model.just_identified:
        return fit_two_step(dataset, model, None, tol).theta_hat
    return fit_full_profile(dataset, model, None, tol=tol).theta_hat


def fit(config: ProblemConfig, dataset: PPIDataset) -> ELFit:
    """Build the auxiliary block from the config and run the matching estimator.

    Empty or infeasible auxiliaries fall back to the supervised path; the
    reason is kept in ``diagnostics["fallback"]``.
    """
    model, tol = config.model, config.tolerances
    spec = config.aux_spec if config.aux_spec is not None else AuxSpec()
    pilot = None
    if spec.kind == "crossfit" and spec.target == "score":
        pilot = supervised_pilot(dataset, model, tol)
    aux = build_aux(spec, dataset, model, pilot, seed=config.seed)
    fallback = None
    if aux.r > 0:
        try:
            if model.just_identified:
                return fit_two_step(dataset, model, aux, tol)
            return fit_full_profile(dataset, model, aux, tol=tol)
        except InfeasibleError as exc:
            fallback = f"auxiliary constraint infeasible: {exc}"
            log.info("falling back to the supervised fit: %s", exc)
    elif spec.kind != "none":
        fallback = "every auxiliary column was degenerate"
    empty = AuxMatrix.empty(dataset.n, kind=aux.kind)
    if model.just_identified:
        out = fit_two_step(dataset, model, empty, tol)
    else:
        out = fit_full_profile(dataset, model, empty, tol=tol)
    if fallback:
        out.diagnostics["fallback"] = fallback
    return out
