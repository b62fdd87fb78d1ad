"""Acceptance criteria 1-11 at their stated scales and tolerances.

Each test records one pass/fail line (collected in the terminal summary)
before asserting.  Simulation criteria run 2000 replications with the
default experiment seed 0.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from epi.dist import sigma2_aux_only, sigma2_general
from epi.el_core import solve_inner
from epi.harness import ExperimentSpec, generate, run_experiment
from epi.infer import (
    lambda_matrix,
    moments_from_matrices,
    safety_certificate,
    sigma_hat,
    sigma_hat_general,
    sigma_hat_just_identified,
)
from epi.model import save_dataset

from oracles import primal_el_cvx, scalar_dual_root

pytestmark = pytest.mark.acceptance

REPS = 2000


def timed(spec, **kw):
    t0 = time.perf_counter()
    res = run_experiment(spec, **kw)
    return res, time.perf_counter() - t0


def test_c01_wilks_calibration(acceptance_report):
    spec = ExperimentSpec("mean_inference", 200, 20000, methods=["epi_basis"], replications=REPS)
    res, secs = timed(spec)
    rate = res.value("epi_basis", "rejection_rate")
    ok = 0.085 <= rate <= 0.115 and res.n_failures == 0
    acceptance_report(1, "Wilks calibration", ok,
                      f"rejection rate {rate:.4f} in [0.085, 0.115], failures {res.n_failures}, {secs:.0f} s "
                      f"(target 120 s)")
    assert ok


@pytest.fixture(scope="module")
def linreg_run():
    spec = ExperimentSpec("linreg", 1500, 6000, params={"d": 5, "rho": 1.0}, methods=["epi_basis"],
                          C=[1.0, 1.1], basis_degree=3, replications=REPS)
    return timed(spec)


def test_c02_linreg_size(linreg_run, acceptance_report):
    res, secs = linreg_run
    param = res.spec.param_label + ";C=1"
    rate = res.value("epi_basis", "rejection_rate", param)
    ok = 0.08 <= rate <= 0.12
    acceptance_report(2, "linreg size, EPI(Basis)", ok,
                      f"rejection rate {rate:.4f} in [0.08, 0.12], fallback rate "
                      f"{res.value('epi_basis', 'fallback_rate'):.4f}, {secs:.0f} s (target 1800 s)")
    assert ok


def test_c03_linreg_power(linreg_run, acceptance_report):
    res, _ = linreg_run
    rate = res.value("epi_basis", "rejection_rate", res.spec.param_label + ";C=1.1")
    ok = 0.53 <= rate <= 0.63
    acceptance_report(3, "linreg power, EPI(Basis)", ok, f"rejection rate {rate:.4f} in [0.53, 0.63]")
    assert ok


def test_c04_safety_grid(acceptance_report):
    worst = {"epi_basis": 0.0, "epi_cf": 0.0}
    at3000 = []
    for dist in ("normal", "exp"):
        for m in (100, 1000, 3000):
            spec = ExperimentSpec("mean_inference", 100, m, params={"dist": dist},
                                  methods=["epi_basis", "epi_cf"], replications=REPS, inference=False)
            res = run_experiment(spec)
            for method in worst:
                worst[method] = max(worst[method], res.value(method, "rel_mse"))
            if m == 3000:
                at3000.append((dist, res.value("epi_basis", "rel_mse")))
    ok = max(worst.values()) <= 1.05 and all(v <= 0.9 for _, v in at3000)
    detail = (f"max rel MSE basis {worst['epi_basis']:.3f}, cf {worst['epi_cf']:.3f} (<= 1.05); basis at m=3000 "
              + ", ".join(f"{d} {v:.3f}" for d, v in at3000) + " (<= 0.9)")
    acceptance_report(4, "safety relative MSE", ok, detail)
    assert ok


def test_c05_coverage_asymmetry(acceptance_report):
    spec = ExperimentSpec("mean_inference", 100, 1000, params={"dist": "exp"},
                          methods=["ppi_power_tuned", "epi_basis"], replications=REPS)
    res = run_experiment(spec)
    miss = 1 - res.value("epi_basis", "coverage")
    gap = {mth: abs(res.value(mth, "miscoverage_lower") - res.value(mth, "miscoverage_upper"))
           for mth in ("epi_basis", "ppi_power_tuned")}
    ok = 0.08 <= miss <= 0.12 and gap["epi_basis"] < gap["ppi_power_tuned"]
    acceptance_report(5, "coverage with asymmetry", ok,
                      f"EPI(Basis) miscoverage {miss:.4f} in [0.08, 0.12]; |L-U| EPI {gap['epi_basis']:.4f} "
                      f"< power-tuned {gap['ppi_power_tuned']:.4f}")
    assert ok


def test_c06_overidentified_ordering(acceptance_report):
    spec = ExperimentSpec("overidentified", 100, 1000, params={"theta": 2.0},
                          methods=["supervised", "supervised_el", "epi_basis"], replications=REPS,
                          inference=False)
    res = run_experiment(spec, keep_raw=True)
    sq = {mth: np.array([r["methods"][mth]["sq_err"] for r in res.raw if r["ok"]])
          for mth in ("supervised", "supervised_el", "epi_basis")}

    def gap(a, b):
        d = sq[b] - sq[a]
        return d.mean(), d.std(ddof=1) / np.sqrt(d.size)

    g1, s1 = gap("epi_basis", "supervised_el")
    g2, s2 = gap("supervised_el", "supervised")
    ok = g1 > 2 * s1 and g2 > 2 * s2
    mse = {k: v.mean() for k, v in sq.items()}
    acceptance_report(6, "over-identified MSE ordering", ok,
                      f"MSE EPI {mse['epi_basis']:.5f} < sup EL {mse['supervised_el']:.5f} < mean "
                      f"{mse['supervised']:.5f}; gaps {g1:.5f} ({g1 / s1:.1f} SE), {g2:.5f} ({g2 / s2:.1f} SE)")
    assert ok


def test_c07_distribution_safety(acceptance_report):
    spec = ExperimentSpec("dist_learning", 1000, 10000, params={"d": 10, "sigma": 0.5},
                          methods=["ecdf", "epi_dist_cf"], replications=REPS)
    res = run_experiment(spec)
    ratios = [r["value"] for r in res.rows if r["method"] == "epi_dist_cf" and r["metric"] == "cdf_mse_ratio"]
    median = res.value("epi_dist_cf", "cdf_mse_ratio", res.spec.param_label + ";tau=0.5")
    ok = len(ratios) == 9 and max(ratios) <= 1.02 and median <= 0.9
    acceptance_report(7, "distribution-learning safety", ok,
                      f"max decile MSE ratio {max(ratios):.3f} (<= 1.02), median {median:.3f} (<= 0.9)")
    assert ok


def random_feasible(rng, n, d):
    z = rng.standard_normal((n, d)) * rng.uniform(0.5, 3.0, size=d)
    return z - rng.dirichlet(np.ones(n)) @ z


def test_c08_oracle_equivalence(acceptance_report):
    rng = np.random.default_rng(8)
    worst_el = worst_t = 0.0
    for _ in range(200):
        d = int(rng.integers(1, 4))
        n = int(rng.integers(d + 2, 11))
        z = random_feasible(rng, n, d)
        worst_el = max(worst_el, abs(solve_inner(z).log_el - primal_el_cvx(z)[0]))
    for _ in range(200):
        z = random_feasible(rng, int(rng.integers(2, 11)), 1)[:, 0]
        t_ref, _ = scalar_dual_root(z)
        worst_t = max(worst_t, abs(solve_inner(z[:, None]).multipliers[0] - t_ref))
    ok = worst_el <= 1e-6 and worst_t <= 1e-8
    acceptance_report(8, "oracle equivalence", ok,
                      f"max |d log_el| {worst_el:.2e} (<= 1e-6), max |d t| {worst_t:.2e} (<= 1e-8)")
    assert ok


def random_plugins(rng, p, r, gamma):
    a = rng.standard_normal((p + r, p + r + 3))
    s = a @ a.T / (p + r)
    return moments_from_matrices(rng.standard_normal((p, p)) + 0.5 * np.eye(p), s[:p, :p], s[p:, p:], s[:p, p:],
                                 gamma)


def test_c09_formula_identities(acceptance_report):
    rng = np.random.default_rng(9)
    rel = lam = var = 0.0
    for _ in range(100):
        p, r = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        pm = random_plugins(rng, p, r, rng.uniform())
        a, b = sigma_hat_general(pm), sigma_hat_just_identified(pm)
        rel = max(rel, np.abs(a - b).max() / np.abs(b).max())
        pm0 = random_plugins(rng, p, r, 0.0)
        lam = max(lam, np.abs(np.linalg.eigvalsh(lambda_matrix(pm0)) - 1).max())
        c = rng.standard_normal((r, r + 2))
        cinv = np.linalg.inv(c @ c.T)
        rho, f, gamma = 0.1 * rng.standard_normal(r), rng.uniform(0.05, 0.95), rng.uniform()
        q = int(rng.integers(1, 3))
        v1 = sigma2_general(f, rho, cinv, gamma, rng.standard_normal(q), rng.standard_normal((q, r)), np.zeros((q, q)))
        var = max(var, abs(v1 - sigma2_aux_only(f, rho, cinv, gamma)))
    ok = rel <= 1e-10 and lam <= 1e-10 and var <= 1e-10
    acceptance_report(9, "formula identities", ok,
                      f"Sigma relative gap {rel:.2e}, |eig(Lambda)-1| at gamma=0 {lam:.2e}, sigma^2 gap {var:.2e}")
    assert ok


def test_c10_safety_certificate(acceptance_report):
    rng = np.random.default_rng(10)
    worst = np.inf
    for _ in range(100):
        p, r = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        pm = random_plugins(rng, p, r, rng.uniform())
        jinv = np.linalg.inv(pm.J_hat)
        sup = jinv @ pm.cov_g @ jinv.T
        gap = np.linalg.eigvalsh((sup + sup.T) / 2 - sigma_hat(pm)).min()
        assert abs(gap - safety_certificate(pm).min_eig_gap) <= 1e-8 * max(1.0, np.abs(sup).max())
        worst = min(worst, gap)
    ok = worst >= -1e-8
    acceptance_report(10, "safety certificate", ok, f"min eigenvalue of Sigma_sup - Sigma_h {worst:.2e} (>= -1e-8)")
    assert ok


def _cli(args):
    proc = subprocess.run([sys.executable, "-m", "epi"] + [str(a) for a in args], capture_output=True)
    assert proc.returncode == 0, proc.stderr.decode()
    return proc.stdout


def test_c11_cli_determinism(tmp_path, acceptance_report):
    ds = generate("mean_inference", {"dist": "exp"}, 100, 1000, np.random.default_rng(11)).dataset
    data = tmp_path / "data.csv"
    save_dataset(ds, data)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "mean", "aux": {"kind": "crossfit", "K": 5}}))
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps([
        {"scenario": "mean_inference", "n": 60, "m": 300, "replications": 16, "mc_draws": 20000},
        {"scenario": "dist_learning", "n": 200, "m": 800, "replications": 6},
    ]))
    commands = {
        "fit": ["fit", data, "--config", cfg],
        "ci": ["ci", data, "--config", cfg],
        "dist": ["dist", data, "--config", cfg, "--tau", "0.5", "0.9"],
        "selftest": ["selftest"],
    }
    mismatches = []
    for name, args in commands.items():
        for fmt in ("json", "csv"):
            outs = {_cli(args + ["--seed", "3", "--format", fmt, "--threads", str(w)]) for w in (1, 1, 2, 8)}
            if len(outs) != 1:
                mismatches.append(f"{name}/{fmt}")
    sim = set()
    for run, workers in enumerate((1, 1, 2, 8)):
        prefix = tmp_path / f"sim{run}"
        _cli(["simulate", spec, "--seed", "3", "--threads", workers, "--out", prefix])
        sim.add((prefix.with_suffix(".csv").read_bytes(), prefix.with_suffix(".json").read_bytes()))
    if len(sim) != 1:
        mismatches.append("simulate")
    ok = not mismatches
    acceptance_report(11, "CLI determinism", ok,
                      "byte-identical across repeated runs and 1/2/8 workers" if ok else f"differs: {mismatches}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
