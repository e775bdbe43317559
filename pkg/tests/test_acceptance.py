"""End-to-end acceptance criteria at full replication size.

Each test exercises one criterion through the real pipeline (preset config
-> ensemble -> report) at its stated tolerance and prints a PASS/FAIL line
on the live terminal.  Ensembles are shared per preset via session fixtures
so the suite stays within its runtime budget.
"""

import json
import time

import numpy as np
import pytest

from saclt import (
    clt_report,
    compute_theory,
    frozen_increment_covariance,
    load_config,
    mean_field,
    noise_covariance,
    optimal_covariance,
    poisson_solve,
    run_ensemble,
    solve_lyapunov_fast,
    solve_lyapunov_slow,
    conditional_noise_covariances,
    stationary_distribution,
    StepSchedule,
)
from saclt.cli import main
from saclt.engine import run_linear_recursion
from saclt.markov import TableFamily
from saclt.spectral import hurwitz_info, product_envelope_profile

from conftest import random_ergodic_kernel, random_hurwitz, random_spd

pytestmark = pytest.mark.acceptance

WORKERS = 4


@pytest.fixture(scope="session")
def preset_run():
    cache = {}

    def _run(name):
        if name not in cache:
            cfg = load_config(name)
            start = time.perf_counter()
            result = run_ensemble(cfg.ensemble_config(), workers=WORKERS)
            theory = compute_theory(cfg.problem, cfg.schedule)
            report = clt_report(result, theory, cfg.tolerances)
            elapsed = time.perf_counter() - start
            cache[name] = (cfg, result, theory, report, elapsed)
        return cache[name]

    return _run


@pytest.fixture
def announce(capsys):
    def _announce(criterion, passed, detail):
        with capsys.disabled():
            print(f"[{criterion}] {'PASS' if passed else 'FAIL'}: {detail}")

    return _announce


def test_a1_scalar_slow_raw_clt(preset_run, announce):
    cfg, result, theory, report, elapsed = preset_run("scalar_slow")
    target = report.targets[0]
    raw = target.raw
    assert raw.theory[0][0] == pytest.approx(2.0, rel=1e-12)
    ks_ok = raw.mahalanobis_ks < raw.ks_critical and all(
        c < raw.ks_critical for c in raw.per_coordinate_ks
    )
    ok = (
        raw.rel_error <= 0.10
        and ks_ok
        and target.count == 2000
        and elapsed < 120.0
    )
    announce(
        "A1",
        ok,
        f"raw var {raw.empirical[0][0]:.4f} vs 2.0 (rel err {raw.rel_error:.4f} <= 0.10), "
        f"KS {raw.mahalanobis_ks:.4f}/{max(raw.per_coordinate_ks):.4f} < {raw.ks_critical:.4f}, "
        f"runtime {elapsed:.1f}s < 120s",
    )
    assert raw.rel_error <= 0.10
    assert ks_ok
    assert elapsed < 120.0


def test_a2_scalar_fast_raw_clt(preset_run, announce):
    cfg, result, theory, report, elapsed = preset_run("scalar_fast")
    raw = report.targets[0].raw
    assert raw.theory[0][0] == pytest.approx(4.0, rel=1e-12)
    ok = raw.rel_error <= 0.15 and report.overall_pass
    announce(
        "A2",
        ok,
        f"raw var {raw.empirical[0][0]:.4f} vs 4.0 (rel err {raw.rel_error:.4f} <= 0.15)",
    )
    assert raw.rel_error <= 0.15
    assert report.overall_pass


def test_a3_averaging_optimality(preset_run, announce):
    cfg, result, theory, report, elapsed = preset_run("scalar_slow")
    avg = report.targets[0].averaged
    assert avg.theory[0][0] == pytest.approx(4.0, rel=1e-12)
    # sweep the fast-schedule scale: at the sqrt(n) scale the raw-limit
    # variance gamma* V(gamma*) is minimized at gamma* = 1/L = 1
    A = cfg.problem.jacobians[0]
    U = cfg.problem.noise_covariances[0]
    grid = np.geomspace(0.55, 8.0, 120)
    sweep = np.array([g * solve_lyapunov_fast(A, U, g).matrix[0, 0] for g in grid])
    grid_min = sweep.min()
    assert grid_min == pytest.approx(4.0, rel=1e-3)
    emp = avg.empirical[0][0]
    ok = avg.rel_error <= 0.10 and emp <= grid_min * 1.10
    announce(
        "A3",
        ok,
        f"avg var {emp:.4f} vs 4.0 (rel err {avg.rel_error:.4f} <= 0.10), "
        f"and <= fast-sweep minimum {grid_min:.4f} within MC error",
    )
    assert avg.rel_error <= 0.10
    assert emp <= grid_min * 1.10


def test_a4_double_well_multiple_targets(preset_run, announce):
    cfg, result, theory, report, elapsed = preset_run("double_well")
    shares = [t.share for t in report.targets]
    errors = [t.raw.rel_error for t in report.targets]
    for th in theory:
        assert th.raw.matrix[0, 0] == pytest.approx(0.0625, rel=1e-12)
    ok = (
        all(0.30 <= s <= 0.70 for s in shares)
        and all(e <= 0.12 for e in errors)
        and report.unclassified_count / report.replicates < 0.02
        and report.overall_pass
    )
    announce(
        "A4",
        ok,
        f"shares {shares[0]:.3f}/{shares[1]:.3f} in [0.30, 0.70], "
        f"per-target rel err {errors[0]:.4f}, {errors[1]:.4f} <= 0.12 vs 0.0625",
    )
    assert all(0.30 <= s <= 0.70 for s in shares)
    assert all(e <= 0.12 for e in errors)
    assert report.overall_pass


def test_a5_controlled_markov_averaged_clt(preset_run, announce):
    cfg, result, theory, report, elapsed = preset_run("two_state_markov")
    family = cfg.noise.family
    root = cfg.problem.roots[0]
    residual = abs(mean_field(family, root)[0])
    avg = report.targets[0].averaged
    expected = optimal_covariance(cfg.problem.jacobians[0], cfg.problem.noise_covariances[0])
    assert avg.theory[0][0] == pytest.approx(expected[0, 0], rel=1e-12)
    ok = residual <= 1e-10 and avg.rel_error <= 0.15 and report.overall_pass
    announce(
        "A5",
        ok,
        f"|h(theta*)| = {residual:.2e} <= 1e-10, avg var {avg.empirical[0][0]:.4f} vs "
        f"{avg.theory[0][0]:.4f} (rel err {avg.rel_error:.4f} <= 0.15)",
    )
    assert residual <= 1e-10
    assert avg.rel_error <= 0.15
    assert report.overall_pass


def test_a6_truncated_sa_stabilizes(preset_run, announce):
    cfg, result, theory, report, elapsed = preset_run("truncated_markov")
    fraction = report.late_truncation_fraction
    ok = fraction < 0.01 and report.overall_pass
    announce(
        "A6",
        ok,
        f"late-truncation fraction {fraction:.4f} < 0.01 "
        f"(replicates with any reset: {int((result.sigma_final > 0).sum())}/{result.replicates})",
    )
    assert fraction < 0.01
    assert report.overall_pass


def test_a7_exact_algebra_suites(announce):
    start = time.perf_counter()
    rng = np.random.default_rng(20240817)

    # Lyapunov residuals on 100 random Hurwitz instances, d <= 8
    worst_lyap = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 9))
        A = random_hurwitz(rng, d, margin=float(rng.uniform(0.3, 2.0)))
        U = random_spd(rng, d)
        bound = 1e-10 * (1.0 + np.linalg.norm(U, "fro"))
        slow = solve_lyapunov_slow(A, U)
        L = hurwitz_info(A).decay_rate
        fast = solve_lyapunov_fast(A, U, gamma_star=1.0 / L)
        worst_lyap = max(worst_lyap, slow.residual_norm / bound, fast.residual_norm / bound)
    assert worst_lyap <= 1.0

    # Poisson identity on 100 random ergodic chains, S <= 10
    worst_poisson = 0.0
    for _ in range(100):
        S = int(rng.integers(2, 11))
        Q = random_ergodic_kernel(rng, S)
        g = rng.normal(size=(S, int(rng.integers(1, 3))))
        sol = poisson_solve(Q, g)
        centered = g - (sol.pi @ g)[None, :]
        worst_poisson = max(
            worst_poisson,
            float(np.abs(centered - (sol.g_hat - sol.q_g_hat)).max()),
            float(np.abs(sol.pi @ sol.g_hat).max()),
        )
    assert worst_poisson <= 1e-10

    # noise covariance equals the stationary average of per-state slices
    worst_u = 0.0
    for _ in range(20):
        S = int(rng.integers(3, 9))
        fam = TableFamily(random_ergodic_kernel(rng, S), rng.normal(size=(S, 2)))
        theta = rng.normal(size=2)
        U = noise_covariance(fam, theta)
        F = conditional_noise_covariances(fam, theta)
        pi = stationary_distribution(fam.kernel(theta))
        worst_u = max(worst_u, float(np.abs(U - np.einsum("x,xij->ij", pi, F)).max()))
    assert worst_u <= 1e-10

    # Abel identity on 20 random linear trajectories
    worst_abel = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 4))
        A = random_hurwitz(rng, d, margin=0.5)
        sched = StepSchedule(float(rng.uniform(0.3, 2.0)), float(rng.uniform(0.55, 1.0)))
        steps = 400
        zeta = rng.normal(size=(steps + 1, d))
        gammas = sched.gamma_array(steps + 1)
        path = run_linear_recursion(A, gammas, rng.normal(size=d), zeta)
        n = steps
        lhs = A @ path[: n + 1].sum(axis=0)
        inv_g = 1.0 / gammas
        rhs = (
            -zeta[: n + 1].sum(axis=0)
            + path[n + 1] * inv_g[n]
            - path[0] * inv_g[0]
            + ((inv_g[:n] - inv_g[1 : n + 1])[:, None] * path[1 : n + 1]).sum(axis=0)
        )
        scale = max(float(np.abs(rhs).max()), 1.0)
        worst_abel = max(worst_abel, float(np.abs(lhs - rhs).max()) / scale)
    assert worst_abel <= 1e-9

    # ordered-product envelope stays bounded relative to its early segment
    schedule = StepSchedule(1.0, 0.7)
    for _ in range(2):
        d = int(rng.integers(1, 5))
        A = random_hurwitz(rng, d, margin=float(rng.uniform(0.5, 1.5)))
        L = hurwitz_info(A).decay_rate
        ratios = product_envelope_profile(A, schedule, 0.9 * L, n_max=10**4)
        assert ratios.max() <= 10.0 * ratios[: 10**2].max()

    elapsed = time.perf_counter() - start
    ok = elapsed < 30.0
    announce(
        "A7",
        ok,
        f"Lyapunov {worst_lyap:.2e} (x bound), Poisson {worst_poisson:.2e}, "
        f"U-identity {worst_u:.2e}, Abel {worst_abel:.2e}, runtime {elapsed:.1f}s < 30s",
    )
    assert elapsed < 30.0


def test_a8_frozen_chain_variance_oracle(announce):
    cfg = load_config("two_state_markov")
    family = cfg.noise.family
    root = cfg.problem.roots[0]
    U = noise_covariance(family, root)
    emp = frozen_increment_covariance(family, root, steps=1_000_000, seed=987654321)
    rel = abs(emp[0, 0] - U[0, 0]) / U[0, 0]
    ok = rel <= 0.03
    announce(
        "A8",
        ok,
        f"frozen-chain increment variance {emp[0, 0]:.6f} vs exact {U[0, 0]:.6f} "
        f"(rel err {rel:.4f} <= 0.03 over 1e6 steps)",
    )
    assert rel <= 0.03


def test_a9_determinism_across_runs_and_workers(tmp_path, announce):
    data = {
        "problem": {
            "kind": "linear",
            "jacobian": [[-1.0]],
            "target": [1.0],
            "theta0": [0.0],
            "noise": {"kind": "gaussian", "covariance": [[4.0]]},
        },
        "schedule": {"gamma_star": 1.0, "exponent_a": 0.7},
        "ensemble": {"replicates": 64, "horizon": 2000, "master_seed": 31415},
        "tolerances": {"raw_rel_error": 0.9, "avg_rel_error": 0.9, "check_normality": False,
                       "min_samples": 50},
        "report": {"dump_samples": True},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    outputs = []
    for tag, workers in (("w1a", "1"), ("w1b", "1"), ("w8", "8")):
        out = tmp_path / tag
        code = main(["clt-check", "--config", str(path), "--out", str(out),
                     "--workers", workers])
        assert code == 0
        outputs.append(
            ((out / "report.json").read_bytes(), (out / "samples.csv").read_bytes())
        )
    identical = outputs[0] == outputs[1] == outputs[2]
    announce(
        "A9",
        identical,
        "report.json and samples.csv byte-identical across reruns and workers 1 vs 8",
    )
    assert identical
