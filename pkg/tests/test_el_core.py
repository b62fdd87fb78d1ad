import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy.spatial import Delaunay

from epi.el_core import (
    OutsideDomainWarning,
    feasibility_check,
    log_el_at,
    log_star,
    solve_inner,
)
from epi.errors import InfeasibleError

from oracles import primal_el_cvx, scalar_dual_root


def random_feasible(rng, n, d):
    z = rng.standard_normal((n, d)) * rng.uniform(0.5, 3.0, size=d)
    w = rng.dirichlet(np.ones(n))
    return z - w @ z


def test_symmetric_pair():
    sol = solve_inner([[1.0], [-1.0]])
    assert sol.multipliers[0] == 0.0
    assert_allclose(sol.weights, [0.5, 0.5])
    assert_allclose(sol.log_el, -2 * np.log(2), rtol=0, atol=1e-14)


def test_zero_mean_columns_give_uniform_weights():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((7, 3))
    z -= z.mean(axis=0)
    sol = solve_inner(z)
    assert_allclose(sol.multipliers, 0.0, atol=1e-12)
    assert_allclose(sol.weights, 1 / 7, rtol=1e-12)


def test_scalar_dual_matches_bisection():
    z = np.array([-1.0, 0.5, 2.0])
    t_star, w_star = scalar_dual_root(z)
    assert -0.5 < t_star < 1.0
    sol = solve_inner(z[:, None])
    assert_allclose(sol.multipliers[0], t_star, atol=1e-8)
    assert_allclose(sol.weights, w_star, atol=1e-8)
    assert_allclose(log_el_at(z[:, None], [t_star]), np.sum(np.log(w_star)), atol=1e-10)
    assert_allclose(sol.log_el, np.sum(np.log(w_star)), atol=1e-8)


def test_one_sided_is_infeasible():
    with pytest.raises(InfeasibleError):
        solve_inner([[1.0], [2.0], [3.0]])


def test_infeasible_multicolumn_detected_by_divergence():
    z = np.array([[1.0, 0.0], [2.0, 1.0], [3.0, -1.0], [1.5, 0.5]])
    with pytest.raises(InfeasibleError):
        solve_inner(z)


def test_log_el_at_uniform():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((5, 2))
    assert_allclose(log_el_at(z, [0.0, 0.0]), -5 * np.log(5), atol=1e-14)
    assert_allclose(log_el_at([[1.0], [-1.0]], [0.0]), -2 * np.log(2), atol=1e-14)


def test_log_el_outside_domain_warns():
    with pytest.warns(OutsideDomainWarning):
        log_el_at([[1.0], [-1.0]], [0.9])


def test_log_star_continuity():
    eps = 0.1
    below = log_star(np.array([eps - 1e-12]), eps)
    above = log_star(np.array([eps]), eps)
    for a, b in zip(below, above):
        assert_allclose(a, b, rtol=1e-9)


@pytest.mark.parametrize("z, expected", [([[-1.0], [2.0]], True), ([[1.0], [2.0]], False)])
def test_feasibility_scalar(z, expected):
    assert feasibility_check(z).feasible is expected


def test_feasibility_lp_against_delaunay():
    rng = np.random.default_rng(11)
    for _ in range(10):
        z = rng.standard_normal((20, 2))
        z -= z.mean(axis=0)
        assert Delaunay(z).find_simplex(np.zeros(2)) >= 0
        res = feasibility_check(z)
        assert res.feasible and res.margin > 0
    # shift everything so the origin falls outside
    z = rng.standard_normal((20, 2)) + np.array([10.0, 0.0])
    assert Delaunay(z).find_simplex(np.zeros(2)) < 0
    assert not feasibility_check(z).feasible


def test_oracle_equivalence_against_primal():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        d = int(rng.integers(1, 4))
        n = int(rng.integers(d + 2, 11))
        z = random_feasible(rng, n, d)
        sol = solve_inner(z)
        ref, _ = primal_el_cvx(z)
        worst = max(worst, abs(sol.log_el - ref))
    assert worst <= 1e-6


def test_dropped_zero_column_reported():
    z = np.column_stack([[1.0, -2.0, 0.5], np.zeros(3)])
    sol = solve_inner(z)
    assert sol.dropped == (1,)
    assert sol.multipliers[1] == 0.0
    ref = solve_inner(z[:, :1])
    assert_allclose(sol.log_el, ref.log_el, atol=1e-12)


def test_collinear_columns_are_reduced():
    rng = np.random.default_rng(5)
    a = random_feasible(rng, 30, 2)
    z = np.column_stack([a, a[:, 0] + 2 * a[:, 1]])
    sol = solve_inner(z)
    ref = solve_inner(a)
    assert_allclose(sol.log_el, ref.log_el, atol=1e-9)
    assert_allclose(sol.weights, ref.weights, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(4, 40), d=st.integers(1, 3))
def test_solution_invariants(seed, n, d):
    rng = np.random.default_rng(seed)
    z = random_feasible(rng, n, d)
    sol = solve_inner(z)
    u = 1.0 + z @ sol.multipliers
    assert np.all(sol.weights > 0)
    assert abs(sol.weights.sum() - 1) <= 1e-10
    assert np.max(np.abs(sol.weights * n * u - 1)) <= 1e-10
    assert np.linalg.norm(z.T @ (1 / u)) / n <= 1e-10
    assert_allclose(sol.log_el, np.sum(np.log(sol.weights)), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(6, 30))
def test_adding_a_constraint_never_increases_log_el(seed, n):
    rng = np.random.default_rng(seed)
    z = random_feasible(rng, n, 2)
    base = solve_inner(z[:, :1])
    full = solve_inner(z)
    assert full.log_el <= base.log_el + 1e-10


def test_warm_start_agrees():
    rng = np.random.default_rng(1)
    z = random_feasible(rng, 25, 3)
    cold = solve_inner(z)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        warm = solve_inner(z, t0=cold.multipliers * 1.1)
    assert_allclose(warm.multipliers, cold.multipliers, atol=1e-9)
    assert warm.newton_iters <= cold.newton_iters
