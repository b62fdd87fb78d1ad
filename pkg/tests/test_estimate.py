import numpy as np
import pytest
from numpy.testing import assert_allclose

from epi.auxiliary import AuxSpec, build_basis, center_pooled
from epi.el_core import solve_inner
from epi.estimate import fit, fit_full_profile, fit_two_step, profile_solution
from epi.model import (
    PPIDataset,
    ProblemConfig,
    builtin_linreg_model,
    builtin_mean_model,
    builtin_overidentified_mean_model,
)

from oracles import golden_max, primal_el_cvx, scalar_dual_root


def mean_data(n, m, seed=0, skew=False):
    rng = np.random.default_rng(seed)
    draw = (lambda k: rng.exponential(0.5, k)) if skew else rng.standard_normal
    x, xu = draw(n), draw(m)
    y = x + draw(n)
    return PPIDataset(y, x[:, None], x + rng.standard_normal(n), xu[:, None], xu + rng.standard_normal(m))


def over_data(n, m, theta=2.0, seed=0):
    rng = np.random.default_rng(seed)

    def gen(k):
        x = rng.normal(0, theta, (k, 2))
        return theta + x.sum(1) + theta * rng.standard_normal(k), x, x.sum(1)

    y, x, t = gen(n)
    _, xu, tu = gen(m)
    return PPIDataset(y, x, t, xu, tu)


def linreg_data(n, m, d, seed=0, noiseless=False):
    rng = np.random.default_rng(seed)
    x, xu = rng.standard_normal((n, d)), rng.standard_normal((m, d))
    y = x.sum(1) + (0 if noiseless else rng.standard_normal(n))
    return PPIDataset(y, x, y + rng.standard_normal(n), xu, xu.sum(1) + rng.standard_normal(m))


def basis_aux(ds, degree=1):
    return center_pooled(build_basis(ds, degree), ds.n)


def test_two_step_without_aux_is_sample_mean():
    ds = mean_data(30, 50)
    res = fit_two_step(ds, builtin_mean_model(), None)
    assert res.mode == "supervised_plain"
    assert res.theta_hat[0] == np.mean(ds.labeled_y)
    assert_allclose(res.weights, 1 / 30)


def test_two_step_toy_matches_bisection_oracle():
    y = np.array([1.0, 2, 3, 4])
    ds = PPIDataset(y, np.zeros((4, 1)), y, np.zeros((2, 1)), np.array([5.0, 6.0]))
    aux = center_pooled(np.concatenate([y, [5.0, 6.0]]), 4)
    assert_allclose(aux.hc[:, 0], y - 3.5)
    res = fit_two_step(ds, builtin_mean_model(), aux)
    _, w = scalar_dual_root(y - 3.5)
    assert_allclose(res.weights, w, atol=1e-8)
    assert_allclose(res.theta_hat[0], w @ y, atol=1e-8)
    assert res.mode == "two_step"


def test_two_step_noiseless_linreg_exact_root():
    ds = linreg_data(60, 200, 2, seed=3, noiseless=True)
    res = fit_two_step(ds, builtin_linreg_model(2), basis_aux(ds, 2))
    assert_allclose(res.theta_hat, [1.0, 1.0], atol=1e-8)


def test_two_step_weighted_score_vanishes_and_weights_valid():
    ds = linreg_data(120, 400, 3, seed=8)
    model = builtin_linreg_model(3)
    aux = basis_aux(ds, 2)
    res = fit_two_step(ds, model, aux)
    g = model.score(res.theta_hat, ds.labeled_y, ds.labeled_x)
    assert np.linalg.norm(res.weights @ g) <= 1e-9
    assert np.all(res.weights > 0) and abs(res.weights.sum() - 1) <= 1e-10
    # weights come from the auxiliary block alone
    assert_allclose(res.weights, solve_inner(aux.hc).weights, rtol=0, atol=0)


def test_full_profile_r0_mean_model_is_sample_mean():
    ds = mean_data(40, 10, seed=2)
    res = fit_full_profile(ds, builtin_mean_model(), None)
    assert_allclose(res.theta_hat[0], np.mean(ds.labeled_y), rtol=1e-12)
    assert res.mode == "supervised_el"


def test_full_profile_overidentified_matches_profile_oracle():
    ds = over_data(50, 0, seed=5)
    model = builtin_overidentified_mean_model()
    res = fit_full_profile(ds, model, None)
    y = ds.labeled_y
    ybar = y.mean()

    def oracle_profile(theta):
        z = np.column_stack([y - theta, y * y - 4 * theta * theta])
        try:
            val, _ = primal_el_cvx(z)
        except Exception:
            return -np.inf
        return -np.inf if val is None else val

    grid = np.linspace(ybar / 2, 2 * ybar, 21)
    vals = [oracle_profile(t) for t in grid]
    k = int(np.argmax(vals))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, 20)]
    theta_star = golden_max(oracle_profile, lo, hi, tol=1e-7)
    assert abs(res.theta_hat[0] - theta_star) <= 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_full_profile_equals_two_step_linreg_basis(seed):
    ds = linreg_data(100, 300, 2, seed=seed)
    model = builtin_linreg_model(2)
    aux = basis_aux(ds, 1)
    a = fit_two_step(ds, model, aux)
    b = fit_full_profile(ds, model, aux)
    assert np.max(np.abs(a.theta_hat - b.theta_hat)) <= 1e-6
    assert_allclose(a.log_el, b.log_el, atol=1e-8)


def test_two_step_profile_equivalence_random_instances():
    rng = np.random.default_rng(77)
    worst = 0.0
    for i in range(50):
        n = int(rng.integers(20, 201))
        m = int(rng.integers(n, 4 * n))
        d = int(rng.integers(1, 3))
        ds = linreg_data(n, m, d, seed=1000 + i)
        r = int(rng.integers(1, 4))
        raw = np.vstack([np.column_stack([ds.labeled_ytilde, ds.labeled_x]),
                         np.column_stack([ds.unlabeled_ytilde, ds.unlabeled_x])])
        raw = np.column_stack([raw, raw[:, 0] ** 2, raw[:, 0] * raw[:, 1]])[:, :r]
        aux = center_pooled(raw, n)
        model = builtin_mean_model() if d == 1 and i % 2 else builtin_linreg_model(d)
        a = fit_two_step(ds, model, aux)
        b = fit_full_profile(ds, model, aux)
        worst = max(worst, float(np.max(np.abs(a.theta_hat - b.theta_hat))))
    assert worst <= 1e-6


def _segment_check(ds, model, aux, res, seed):
    rng = np.random.default_rng(seed)
    best = res.log_el
    for _ in range(3):
        direction = rng.standard_normal(model.p)
        direction /= np.linalg.norm(direction)
        for s in np.linspace(-0.05, 0.05, 21):
            theta = model.project(res.theta_hat + s * direction)
            try:
                val = profile_solution(ds, model, aux, theta).log_el
            except Exception:
                continue
            assert val <= best + 1e-9


def test_profile_local_maximum_overidentified():
    ds = over_data(100, 1000, seed=4)
    model = builtin_overidentified_mean_model()
    aux = basis_aux(ds, 2)
    res = fit_full_profile(ds, model, aux)
    assert res.mode == "full_profile"
    _segment_check(ds, model, aux, res, 0)


def test_profile_local_maximum_linreg():
    ds = linreg_data(150, 500, 3, seed=6)
    model = builtin_linreg_model(3)
    aux = basis_aux(ds, 2)
    res = fit_full_profile(ds, model, aux)
    _segment_check(ds, model, aux, res, 1)


def test_dispatch_modes():
    ds = mean_data(40, 200)
    res = fit(ProblemConfig(builtin_mean_model()), ds)
    assert res.mode == "supervised_plain" and res.theta_hat[0] == np.mean(ds.labeled_y)
    res = fit(ProblemConfig(builtin_mean_model(), AuxSpec(kind="fixed_basis", degree=1)), ds)
    assert res.mode == "two_step"
    over = over_data(60, 300)
    res = fit(ProblemConfig(builtin_overidentified_mean_model()), over)
    assert res.mode == "supervised_el"
    res = fit(ProblemConfig(builtin_overidentified_mean_model(), AuxSpec(kind="crossfit", K=5)), over)
    assert res.mode == "full_profile"


def test_infeasible_aux_falls_back():
    y = np.array([0.0, 1.0, 2.0, 3.0])
    ds = PPIDataset(y, np.zeros((4, 1)), np.zeros(4), np.zeros((8, 1)), np.full(8, 10.0))
    spec = AuxSpec(kind="fixed_basis", degree=1)
    res = fit(ProblemConfig(builtin_mean_model(), spec), ds)
    assert res.mode == "supervised_plain"
    assert "infeasible" in res.diagnostics["fallback"]
    assert res.theta_hat[0] == 1.5


def test_safety_at_root_r0_exact():
    ds = mean_data(25, 0, seed=9)
    res = fit(ProblemConfig(builtin_mean_model(), AuxSpec(kind="fixed_basis")), ds)
    # with m = 0 nothing is learned from the basis beyond the labeled mean
    assert_allclose(res.theta_hat[0], np.mean(ds.labeled_y), rtol=1e-12)


def test_fit_to_dict_is_json_ready():
    import json
    ds = mean_data(30, 60)
    res = fit(ProblemConfig(builtin_mean_model(), AuxSpec(kind="fixed_basis")), ds)
    json.dumps(res.to_dict())
