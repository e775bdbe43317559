import numpy as np
import pytest

import saclt.engine as eng
from saclt import (
    ControlledMarkovNoise,
    DoubleWellField,
    ExpandingBalls,
    GaussianNoise,
    IIDStateNoise,
    LinearField,
    NonFinite,
    NoTruncation,
    Problem,
    RobbinsMonroNoise,
    StepSchedule,
    TableFamily,
    TwoStateLogisticFamily,
    classify_limit,
    run_trajectory,
)
from saclt.engine import (
    SAState,
    bind_noise,
    derive_replicate_seed,
    field_eval_for,
    run_linear_recursion,
    sa_step,
    trajectory_rng,
)
from saclt.spectral import ordered_product


def scalar_linear_problem(target=1.0, rate=-1.0, theta0=0.0):
    return Problem(
        dim=1,
        mean_field=LinearField([[rate]], [target]),
        theta0=[theta0],
        roots=(np.array([target]),),
        jacobians=(np.array([[rate]]),),
        noise_covariances=(np.array([[4.0]]),),
    )


def double_well_problem(theta0=0.0, sigma2=0.25):
    jac = np.array([[-2.0]])
    cov = np.array([[sigma2]])
    return Problem(
        dim=1,
        mean_field=DoubleWellField(),
        theta0=[theta0],
        roots=(np.array([-1.0]), np.array([1.0])),
        jacobians=(jac, jac),
        noise_covariances=(cov, cov),
    )


def run_generic(monkeypatch, *args, **kwargs):
    """Force the pure-Python step path through the public entry point."""
    monkeypatch.setattr(eng, "_fast_kernel_call", lambda *a, **k: None)
    try:
        return run_trajectory(*args, **kwargs)
    finally:
        monkeypatch.undo()


class TestSaStep:
    def test_deterministic_euler_step(self):
        # zero noise, h(theta) = -theta, gamma_1 = 0.5: one explicit step
        problem = Problem(
            dim=1,
            mean_field=LinearField([[-1.0]], [0.0]),
            theta0=[1.0],
            roots=(np.array([0.0]),),
            jacobians=(np.array([[-1.0]]),),
            noise_covariances=(np.array([[0.0]]),),
        )
        noise = GaussianNoise([[0.0]])
        schedule = StepSchedule(0.5, 1.0)
        bound = bind_noise(noise, trajectory_rng(0), 1)
        state = SAState(0, np.array([1.0]), np.array([1.0]), 0)
        new = sa_step(state, schedule, bound, field_eval_for(problem, noise), NoTruncation())
        assert new.theta[0] == 0.5
        assert new.n == 1
        assert new.theta_bar[0] == pytest.approx(0.75)

    def test_truncation_resets_and_counts(self):
        # drift pushes theta to 2, outside the ball of radius 0.5: reset
        problem = Problem(
            dim=1,
            mean_field=LinearField([[1.0]], [0.0]),
            theta0=[1.0],
            roots=(np.array([0.0]),),
            jacobians=(np.array([[-1.0]]),),
            noise_covariances=(np.array([[0.0]]),),
        )
        noise = GaussianNoise([[0.0]])
        policy = ExpandingBalls(0.5, 2.0, center=[0.0], reset_point=[0.25])
        bound = bind_noise(noise, trajectory_rng(0), 1)
        state = SAState(0, np.array([1.0]), np.array([1.0]), 0)
        new = sa_step(
            state, StepSchedule(1.0, 1.0), bound, field_eval_for(problem, noise), policy
        )
        assert new.theta[0] == 0.25
        assert new.sigma == 1

    def test_accepted_step_keeps_sigma(self):
        problem = scalar_linear_problem()
        noise = GaussianNoise([[0.0]])
        policy = ExpandingBalls(10.0, 2.0, center=[0.0], reset_point=[0.0])
        bound = bind_noise(noise, trajectory_rng(0), 1)
        state = SAState(0, np.array([0.0]), np.array([0.0]), 0)
        new = sa_step(
            state, StepSchedule(1.0, 0.7), bound, field_eval_for(problem, noise), policy
        )
        assert new.sigma == 0


class TestRunTrajectory:
    def test_bit_identical_reruns(self):
        problem = scalar_linear_problem()
        noise = GaussianNoise([[4.0]])
        sched = StepSchedule(1.0, 0.7)
        a = run_trajectory(problem, sched, noise, NoTruncation(), 500, 42, [250, 500])
        b = run_trajectory(problem, sched, noise, NoTruncation(), 500, 42, [250, 500])
        assert np.array_equal(a.final.theta, b.final.theta)
        assert np.array_equal(a.final.theta_bar, b.final.theta_bar)
        for ca, cb in zip(a.checkpoints, b.checkpoints):
            assert np.array_equal(ca.theta, cb.theta)

    def test_checkpoint_structure(self):
        problem = scalar_linear_problem()
        traj = run_trajectory(
            problem, StepSchedule(1.0, 0.7), GaussianNoise([[4.0]]), NoTruncation(),
            100, 7, [10, 50, 100],
        )
        ns = [cp.n for cp in traj.checkpoints]
        assert ns == [10, 50, 100]
        assert traj.final.n == 100
        assert traj.seed == 7
        with pytest.raises(ValueError):
            run_trajectory(
                problem, StepSchedule(1.0, 0.7), GaussianNoise([[4.0]]), NoTruncation(),
                100, 7, [50, 50],
            )
        with pytest.raises(ValueError):
            run_trajectory(
                problem, StepSchedule(1.0, 0.7), GaussianNoise([[4.0]]), NoTruncation(),
                100, 7, [101],
            )

    def test_point_mass_kernel_gives_deterministic_chain(self):
        # cyclic deterministic kernel: the state path is forced
        Q = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        fam = TableFamily(Q, np.array([0.0, 1.0, 2.0]))
        problem = Problem(
            dim=1,
            mean_field=lambda th: th,
            theta0=[0.0],
            roots=(np.array([1.0]),),
            jacobians=(np.array([[-1.0]]),),
            noise_covariances=(np.array([[1.0]]),),
        )
        noise = ControlledMarkovNoise(fam, start_state=0)
        a = run_trajectory(problem, StepSchedule(1.0, 0.7), noise, NoTruncation(), 9, 5, [9])
        b = run_trajectory(problem, StepSchedule(1.0, 0.7), noise, NoTruncation(), 9, 6, [9])
        # different seeds, same forced path
        assert a.final.chain_state == b.final.chain_state == 0
        assert np.array_equal(a.final.theta, b.final.theta)

    def test_nonfinite_aborts_both_paths(self, monkeypatch):
        problem = double_well_problem(sigma2=1e6)
        noise = GaussianNoise([[1e6]])
        sched = StepSchedule(1.0, 0.7)
        with pytest.raises(NonFinite):
            run_trajectory(problem, sched, noise, NoTruncation(), 200, 3, [200])
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NonFinite):
                run_generic(monkeypatch, problem, sched, noise, NoTruncation(), 200, 3, [200])

    def test_sigma_zero_without_policy_and_monotone_with(self):
        problem = scalar_linear_problem()
        sched = StepSchedule(1.0, 0.7)
        grid = list(range(1, 201))
        plain = run_trajectory(
            problem, sched, GaussianNoise([[4.0]]), NoTruncation(), 200, 11, grid
        )
        assert all(cp.sigma == 0 for cp in plain.checkpoints)
        policy = ExpandingBalls(0.01, 2.0, center=[0.0], reset_point=[0.0])
        truncated = run_trajectory(
            problem, sched, GaussianNoise([[4.0]]), policy, 200, 11, grid
        )
        sigmas = [cp.sigma for cp in truncated.checkpoints]
        assert all(b >= a for a, b in zip(sigmas, sigmas[1:]))
        assert truncated.final.sigma >= 1


class TestPathEquivalence:
    """The compiled loops and the step-by-step path must agree bit for bit."""

    CASES = []

    def _cases(self):
        fam_table = TableFamily(
            np.array([[0.7, 0.3], [0.6, 0.4]]), np.array([0.0, 1.0])
        )
        fam_logistic = TwoStateLogisticFamily(epsilon=0.1, values=np.array([0.0, 1.0]))
        linear = scalar_linear_problem()
        cubic = double_well_problem()
        markov_problem = Problem(
            dim=1,
            mean_field=lambda th: th,
            theta0=[0.2],
            roots=(np.array([1.0 / 3.0]),),
            jacobians=(np.array([[-1.0]]),),
            noise_covariances=(np.array([[0.2]]),),
        )
        ball = ExpandingBalls(0.01, 2.0, center=[0.0], reset_point=[0.0])
        return [
            ("linear", linear, GaussianNoise([[4.0]]), NoTruncation()),
            ("linear+trunc", linear, GaussianNoise([[4.0]]), ball),
            ("cubic", cubic, GaussianNoise([[0.25]]), NoTruncation()),
            ("cubic+trunc", cubic, GaussianNoise([[0.25]]), ball),
            ("table ctrl", markov_problem, ControlledMarkovNoise(fam_table, 1), NoTruncation()),
            ("table rm", markov_problem, RobbinsMonroNoise(fam_table), NoTruncation()),
            ("table iid", markov_problem,
             IIDStateNoise(fam_table, np.array([2.0 / 3.0, 1.0 / 3.0])), NoTruncation()),
            ("logistic ctrl", markov_problem, ControlledMarkovNoise(fam_logistic), NoTruncation()),
            ("logistic rm", markov_problem, RobbinsMonroNoise(fam_logistic), NoTruncation()),
            ("logistic ctrl+trunc", markov_problem, ControlledMarkovNoise(fam_logistic), ball),
        ]

    def test_all_builtin_combinations(self, monkeypatch):
        sched = StepSchedule(1.0, 0.7)
        for name, problem, noise, policy in self._cases():
            fast = run_trajectory(problem, sched, noise, policy, 400, 2024, [200, 400])
            slow = run_generic(
                monkeypatch, problem, sched, noise, policy, 400, 2024, [200, 400]
            )
            assert np.array_equal(fast.final.theta, slow.final.theta), name
            assert np.array_equal(fast.final.theta_bar, slow.final.theta_bar), name
            assert fast.final.sigma == slow.final.sigma, name
            for cf, cs in zip(fast.checkpoints, slow.checkpoints):
                assert np.array_equal(cf.theta, cs.theta), name
                assert cf.sigma == cs.sigma, name

    def test_fallback_dispatch_leaves_the_stream_untouched(self, monkeypatch):
        # a custom callable takes the step-by-step path; the dispatch probe
        # must not have consumed any randomness before declining
        def drift(theta):
            return -(theta - 1.0)

        problem = Problem(
            dim=1,
            mean_field=drift,
            theta0=[0.0],
            roots=(np.array([1.0]),),
            jacobians=(np.array([[-1.0]]),),
            noise_covariances=(np.array([[4.0]]),),
        )
        sched = StepSchedule(1.0, 0.7)
        noise = GaussianNoise([[4.0]])
        dispatched = run_trajectory(problem, sched, noise, NoTruncation(), 300, 8, [300])
        forced = run_generic(monkeypatch, problem, sched, noise, NoTruncation(), 300, 8, [300])
        assert np.array_equal(dispatched.final.theta, forced.final.theta)
        # and the custom drift reproduces the built-in linear field exactly
        builtin = run_trajectory(
            scalar_linear_problem(), sched, noise, NoTruncation(), 300, 8, [300]
        )
        assert np.array_equal(dispatched.final.theta, builtin.final.theta)

    def test_multidimensional_linear_agreement(self, monkeypatch):
        A = np.array([[-1.0, 0.5], [0.0, -2.0]])
        target = np.array([1.0, -1.0])
        problem = Problem(
            dim=2,
            mean_field=LinearField(A, target),
            theta0=[0.0, 0.0],
            roots=(target,),
            jacobians=(A,),
            noise_covariances=(np.eye(2),),
        )
        noise = GaussianNoise(np.eye(2))
        sched = StepSchedule(1.0, 0.7)
        fast = run_trajectory(problem, sched, noise, NoTruncation(), 400, 17, [400])
        slow = run_generic(monkeypatch, problem, sched, noise, NoTruncation(), 400, 17, [400])
        # BLAS and the unrolled loop may differ in the last ulp for d > 1
        assert np.allclose(fast.final.theta, slow.final.theta, rtol=1e-12, atol=1e-14)


class TestRandomStream:
    def test_batched_draws_match_scalar_draws(self):
        # the engine relies on this numpy property for path equivalence
        a = trajectory_rng(99).random(500)
        g = trajectory_rng(99)
        assert np.array_equal(a, np.array([g.random() for _ in range(500)]))
        b = trajectory_rng(98).standard_normal((200, 3))
        g = trajectory_rng(98)
        assert np.array_equal(b, np.stack([g.standard_normal(3) for _ in range(200)]))

    def test_replicate_seeds_are_order_independent(self):
        seeds = [derive_replicate_seed(123, r) for r in range(10)]
        assert len(set(seeds)) == 10
        assert derive_replicate_seed(123, 7) == seeds[7]


class TestNoiselessAlgebra:
    def test_noiseless_linear_equals_ordered_product(self):
        A = np.array([[-1.2, 0.4], [0.1, -0.8]])
        target = np.array([0.5, -0.5])
        theta0 = np.array([2.0, 1.0])
        sched = StepSchedule(0.5, 0.7)
        problem = Problem(
            dim=2,
            mean_field=LinearField(A, target),
            theta0=theta0,
            roots=(target,),
            jacobians=(A,),
            noise_covariances=(np.zeros((2, 2)),),
        )
        n = 300
        traj = run_trajectory(
            problem, sched, GaussianNoise(np.zeros((2, 2))), NoTruncation(), n, 0, [n]
        )
        expected = ordered_product(A, sched, 1, n) @ (theta0 - target) + target
        assert np.allclose(traj.final.theta, expected, rtol=1e-10, atol=1e-13)

    def test_running_mean_matches_direct_summation(self):
        problem = scalar_linear_problem()
        sched = StepSchedule(1.0, 0.7)
        n = 300
        traj = run_trajectory(
            problem, sched, GaussianNoise([[4.0]]), NoTruncation(), n, 13, list(range(1, n + 1))
        )
        thetas = np.concatenate([[problem.theta0[0]], [cp.theta[0] for cp in traj.checkpoints]])
        direct = thetas.sum() / (n + 1)
        assert traj.final.theta_bar[0] == pytest.approx(direct, rel=1e-10)

    def test_abel_identity_on_random_linear_recursions(self, rng):
        # A sum x_k telescopes into boundary and step-difference terms
        for _ in range(5):
            d = int(rng.integers(1, 4))
            G = rng.uniform(-1.0, 1.0, size=(d, d))
            A = G - (np.max(np.linalg.eigvals(G).real) + 0.5) * np.eye(d)
            sched = StepSchedule(float(rng.uniform(0.3, 2.0)), float(rng.uniform(0.55, 1.0)))
            steps = 200
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
            assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-9 * np.abs(rhs).max())


class TestClassifyLimit:
    def test_examples(self):
        roots = [np.array([-1.0]), np.array([0.0]), np.array([1.0])]
        assert classify_limit(np.array([0.97]), roots, 0.2) == 2
        assert classify_limit(np.array([0.5]), roots, 0.2) is None

    def test_separation_precondition(self):
        roots = [np.array([0.0]), np.array([0.3])]
        with pytest.raises(ValueError):
            classify_limit(np.array([0.0]), roots, 0.2)


class TestMonteCarloOracles:
    def test_iid_gaussian_converges_for_nearly_all_seeds(self):
        # 1000 seeds, horizon 1e5: the final iterate concentrates near the root
        problem = scalar_linear_problem(target=1.0)
        noise = GaussianNoise([[4.0]])
        sched = StepSchedule(1.0, 0.7)
        hits = 0
        for seed in range(1000):
            traj = run_trajectory(problem, sched, noise, NoTruncation(), 100_000, seed, None)
            hits += abs(traj.final.theta[0] - 1.0) < 0.1
        assert hits >= 990

    def test_truncation_count_freezes(self):
        # tiny initial ball: resets happen early, then the ball is large
        # enough and the counter never moves again
        problem = scalar_linear_problem(target=1.0)
        noise = GaussianNoise([[4.0]])
        sched = StepSchedule(1.0, 0.7)
        policy = ExpandingBalls(0.01, 2.0, center=[0.0], reset_point=[0.0])
        horizon = 30_000
        frozen = 0
        some_truncation = 0
        for seed in range(300):
            traj = run_trajectory(
                problem, sched, noise, policy, horizon, seed, [horizon // 2, horizon]
            )
            some_truncation += traj.final.sigma > 0
            frozen += traj.checkpoints[0].sigma == traj.final.sigma
        assert some_truncation == 300
        assert frozen >= 297
