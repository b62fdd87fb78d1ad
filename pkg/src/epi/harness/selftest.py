"""Quick invariant checks run by ``epi selftest``.

Each check builds small random instances from a fixed seed and compares two
routes to the same quantity.  Returns ``(name, passed, detail)`` triples.
"""

from __future__ import annotations

import numpy as np
from scipy import optimize

from ..baselines import fit_ppi
from ..dist import sigma2_aux_only, sigma2_general
from ..el_core import solve_inner
from ..infer import (
    lambda_matrix,
    moments_from_matrices,
    safety_certificate,
    sigma_hat_general,
    sigma_hat_just_identified,
)
from ..model import PPIDataset, builtin_mean_model


def _spd(rng, k):
    a = rng.standard_normal((k, k + 3))
    return a @ a.T / (k + 3)


def _plugin(rng, p, r, gamma):
    s = _spd(rng, p + r)
    return moments_from_matrices(rng.standard_normal((p, p)) + 2 * np.eye(p), s[:p, :p], s[p:, p:], s[:p, p:], gamma)


def check_scalar_dual(rng):
    worst = 0.0
    for _ in range(50):
        z = rng.standard_normal(int(rng.integers(3, 10))) + 0.3 * rng.standard_normal()
        if z.min() >= 0 or z.max() <= 0:
            continue
        sol = solve_inner(z[:, None])
        lo, hi = (-1 + 1e-12) / z.max(), (-1 + 1e-12) / z.min()
        root = optimize.brentq(lambda t: np.sum(z / (1 + t * z)), lo, hi, xtol=1e-15)
        worst = max(worst, abs(sol.multipliers[0] - root))
    return worst <= 1e-8, f"max |t - t_bisect| = {worst:.2e}"


def check_sigma_reduction(rng):
    worst = 0.0
    for _ in range(100):
        pm = _plugin(rng, int(rng.integers(1, 4)), int(rng.integers(1, 4)), rng.uniform())
        a, b = sigma_hat_general(pm), sigma_hat_just_identified(pm)
        worst = max(worst, np.abs(a - b).max() / np.abs(b).max())
    return worst <= 1e-10, f"max relative gap = {worst:.2e}"


def check_lambda_unit(rng):
    worst = 0.0
    for _ in range(100):
        pm = _plugin(rng, int(rng.integers(1, 4)), int(rng.integers(1, 4)), 0.0)
        worst = max(worst, np.abs(np.linalg.eigvalsh(lambda_matrix(pm)) - 1).max())
    return worst <= 1e-10, f"max |eig - 1| = {worst:.2e}"


def check_variance_reduction(rng):
    worst = 0.0
    for _ in range(100):
        r = int(rng.integers(1, 4))
        cinv = np.linalg.inv(_spd(rng, r))
        rho = 0.1 * rng.standard_normal(r)
        f, gamma = rng.uniform(0.05, 0.95), rng.uniform()
        a = sigma2_general(f, rho, cinv, gamma, rng.standard_normal(2), rng.standard_normal((2, r)), np.zeros((2, 2)))
        worst = max(worst, abs(a - sigma2_aux_only(f, rho, cinv, gamma)))
    return worst <= 1e-10, f"max gap = {worst:.2e}"


def check_safety(rng):
    worst = np.inf
    for _ in range(100):
        pm = _plugin(rng, int(rng.integers(1, 4)), int(rng.integers(1, 4)), rng.uniform())
        worst = min(worst, safety_certificate(pm).min_eig_gap)
    return worst >= -1e-8, f"min eigenvalue of Sigma_sup - Sigma_h = {worst:.2e}"


def check_ppi_closed_form(rng):
    worst = 0.0
    for _ in range(20):
        n, m = int(rng.integers(3, 30)), int(rng.integers(1, 60))
        y, yt, yu = rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal(m)
        ds = PPIDataset(y, np.zeros((n, 1)), yt, np.zeros((m, 1)), yu)
        worst = max(worst, abs(fit_ppi(ds, builtin_mean_model()).theta_hat[0] - (y.mean() - yt.mean() + yu.mean())))
    return worst <= 1e-10, f"max gap = {worst:.2e}"


CHECKS = {
    "inner_dual_vs_bisection": check_scalar_dual,
    "sigma_general_reduces": check_sigma_reduction,
    "lambda_unit_at_gamma_zero": check_lambda_unit,
    "cdf_variance_reduces": check_variance_reduction,
    "safety_certificate": check_safety,
    "ppi_closed_form": check_ppi_closed_form,
}


def run_selftest(seed: int = 0) -> list:
    out = []
    for name, check in CHECKS.items():
        ok, detail = check(np.random.default_rng([seed, len(out)]))
        out.append((name, bool(ok), detail))
    return out
