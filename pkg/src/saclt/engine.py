"""The recursion engine: plain, averaged and randomly truncated iterations.

One step of the recursion is

    theta_half = theta_n + gamma_{n+1} * H(theta_n, X_{n+1})

where X_{n+1} is drawn according to the noise dynamics.  Without truncation
``theta_{n+1} = theta_half``; with expanding-ball truncation the update is
accepted only while it stays inside the current ball ``K_sigma``, otherwise
the iterate is reset to the policy's reset point and the truncation counter
sigma is incremented (the ball then grows by the configured factor).  The
running mean tracks ``theta_bar_n = (theta_0 + ... + theta_n) / (n + 1)``
incrementally.

Reproducibility contract: all randomness of a trajectory flows from a
64-bit seed through a counter-based generator (Philox); an ensemble derives
the seed of replicate r by splitting the master seed with spawn key (r,),
so replicates are independent of scheduling order.  Identical (seed,
configuration) pairs produce bit-identical trajectories.  Built-in
mean-field/noise combinations run in compiled loops; any other callable
runs through :func:`sa_step`, which consumes the identical random stream.
Non-finite iterates abort the trajectory with :class:`NonFinite` rather
than being clamped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import _loops
from .markov import (
    IIDFamily,
    KernelFamily,
    TableFamily,
    TwoStateLogisticFamily,
    stationary_distribution,
)
from .schedules import StepSchedule

__all__ = [
    "NonFinite",
    "GaussianNoise",
    "IIDStateNoise",
    "RobbinsMonroNoise",
    "ControlledMarkovNoise",
    "NoiseSource",
    "NoTruncation",
    "ExpandingBalls",
    "TruncationPolicy",
    "LinearField",
    "DoubleWellField",
    "Problem",
    "SAState",
    "Checkpoint",
    "Trajectory",
    "trajectory_rng",
    "derive_replicate_seed",
    "bind_noise",
    "field_eval_for",
    "sa_step",
    "run_trajectory",
    "classify_limit",
    "run_linear_recursion",
]


class NonFinite(RuntimeError):
    """A trajectory produced a NaN or infinite iterate and was aborted."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


# ---------------------------------------------------------------------------
# noise sources


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """A deterministic square root L with L L^T = cov (Cholesky, eigen fallback)."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, Q = np.linalg.eigh(cov)
        if w.min() < -1e-10 * max(float(np.abs(w).max()), 1.0):
            raise ValueError(f"covariance is not positive semi-definite: min eig {w.min()}")
        return Q * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class GaussianNoise:
    """Additive i.i.d. Gaussian measurement noise: H(theta, xi) = h(theta) + xi."""

    covariance: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError(f"covariance must be square, got shape {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]


@dataclass(frozen=True)
class IIDStateNoise:
    """States drawn i.i.d. from a fixed distribution; observations from ``family``."""

    family: KernelFamily
    distribution: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.distribution, dtype=np.float64)
        if p.ndim != 1 or p.shape[0] != self.family.state_count:
            raise ValueError("distribution must have one entry per state")
        if p.min() < 0 or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("distribution must be a probability vector")
        object.__setattr__(self, "distribution", p)


@dataclass(frozen=True)
class RobbinsMonroNoise:
    """States resampled from the stationary law of Q_theta at every step."""

    family: KernelFamily


@dataclass(frozen=True)
class ControlledMarkovNoise:
    """A Markov chain whose kernel follows the current iterate: X' ~ Q_theta(X, .)."""

    family: KernelFamily
    start_state: int = 0

    def __post_init__(self):
        if not 0 <= self.start_state < self.family.state_count:
            raise ValueError(
                f"start_state {self.start_state} outside 0..{self.family.state_count - 1}"
            )


NoiseSource = Union[GaussianNoise, IIDStateNoise, RobbinsMonroNoise, ControlledMarkovNoise]


# ---------------------------------------------------------------------------
# truncation policies


@dataclass(frozen=True)
class NoTruncation:
    pass


@dataclass(frozen=True)
class ExpandingBalls:
    """Balls ``K_sigma = B(center, r0 * growth**sigma)``; resets go to ``reset_point``."""

    r0: float
    growth: float
    center: np.ndarray
    reset_point: np.ndarray

    def __post_init__(self):
        if not self.r0 > 0:
            raise ValueError(f"r0 must be positive, got {self.r0}")
        if not self.growth > 1:
            raise ValueError(f"growth must exceed 1, got {self.growth}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "reset_point", np.asarray(self.reset_point, dtype=np.float64))

    def radius(self, sigma: int) -> float:
        return self.r0 * self.growth ** float(sigma)

    def contains(self, sigma: int, theta: np.ndarray) -> bool:
        diff = theta - self.center
        radius = self.radius(sigma)
        return float(diff @ diff) <= radius * radius


TruncationPolicy = Union[NoTruncation, ExpandingBalls]


# ---------------------------------------------------------------------------
# built-in mean fields


@dataclass(frozen=True)
class LinearField:
    """h(theta) = matrix @ (theta - target)."""

    matrix: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.matrix, dtype=np.float64)
        t = np.asarray(self.target, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or t.shape != (A.shape[0],):
            raise ValueError(f"incompatible shapes: matrix {A.shape}, target {t.shape}")
        object.__setattr__(self, "matrix", A)
        object.__setattr__(self, "target", t)

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        return self.matrix @ (theta - self.target)


@dataclass(frozen=True)
class DoubleWellField:
    """Scalar h(theta) = theta - theta^3: stable roots at -1 and +1, unstable at 0."""

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        return theta - theta * theta * theta


@dataclass(frozen=True)
class Problem:
    """A mean field with its targets and the per-target noise covariances.

    ``roots`` are the stable zeros of the mean field; ``jacobians[i]`` is the
    Jacobian at ``roots[i]`` and ``noise_covariances[i]`` the asymptotic
    covariance of the martingale noise there (ground truth for the harness).
    """

    dim: int
    mean_field: Callable[[np.ndarray], np.ndarray]
    theta0: np.ndarray
    roots: tuple
    jacobians: tuple
    noise_covariances: tuple

    def __post_init__(self):
        theta0 = np.asarray(self.theta0, dtype=np.float64)
        if theta0.shape != (self.dim,):
            raise ValueError(f"theta0 must have shape ({self.dim},), got {theta0.shape}")
        roots = tuple(np.asarray(r, dtype=np.float64) for r in self.roots)
        jacobians = tuple(np.asarray(a, dtype=np.float64) for a in self.jacobians)
        covs = tuple(np.asarray(u, dtype=np.float64) for u in self.noise_covariances)
        if not (len(roots) == len(jacobians) == len(covs)):
            raise ValueError("roots, jacobians and noise_covariances must align")
        for r in roots:
            if r.shape != (self.dim,):
                raise ValueError(f"root shape {r.shape} does not match dim {self.dim}")
        object.__setattr__(self, "theta0", theta0)
        object.__setattr__(self, "roots", roots)
        object.__setattr__(self, "jacobians", jacobians)
        object.__setattr__(self, "noise_covariances", covs)


# ---------------------------------------------------------------------------
# state and trajectory records


@dataclass
class SAState:
    """One point of the recursion: iterate, running mean, truncation count, chain state."""

    n: int
    theta: np.ndarray
    theta_bar: np.ndarray
    sigma: int
    chain_state: Optional[int] = None


@dataclass(frozen=True)
class Checkpoint:
    n: int
    theta: np.ndarray
    theta_bar: np.ndarray
    sigma: int


@dataclass(frozen=True)
class Trajectory:
    checkpoints: tuple
    final: SAState
    seed: int


# ---------------------------------------------------------------------------
# randomness plumbing


def trajectory_rng(seed: int) -> np.random.Generator:
    """The counter-based generator a trajectory draws from."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def derive_replicate_seed(master_seed: int, replicate: int) -> int:
    """Split the master seed for replicate r; independent of evaluation order."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(replicate),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class _BoundGaussian:
    kind = "gaussian"

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.rng = rng

    def draw(self, theta, chain_state):
        return self.rng.standard_normal(self.dim)


class _BoundIIDStates:
    kind = "states"

    def __init__(self, cum: np.ndarray, rng: np.random.Generator):
        self.cum = cum
        self.rng = rng

    def draw(self, theta, chain_state):
        u = self.rng.random()
        return min(int(np.searchsorted(self.cum, u, side="right")), self.cum.shape[0] - 1)


class _BoundRobbinsMonro:
    kind = "states"

    def __init__(self, family: KernelFamily, rng: np.random.Generator):
        self.family = family
        self.rng = rng

    def draw(self, theta, chain_state):
        pi = stationary_distribution(self.family.kernel(theta))
        cum = np.cumsum(pi)
        u = self.rng.random()
        return min(int(np.searchsorted(cum, u, side="right")), cum.shape[0] - 1)


class _BoundControlled:
    kind = "states"

    def __init__(self, family: KernelFamily, rng: np.random.Generator):
        self.family = family
        self.rng = rng

    def draw(self, theta, chain_state):
        row = self.family.kernel(theta)[chain_state]
        cum = np.cumsum(row)
        u = self.rng.random()
        return min(int(np.searchsorted(cum, u, side="right")), cum.shape[0] - 1)


def bind_noise(noise: NoiseSource, rng: np.random.Generator, dim: int):
    """Attach a generator to a noise source, yielding per-step draws."""
    if isinstance(noise, GaussianNoise):
        return _BoundGaussian(dim, rng)
    if isinstance(noise, IIDStateNoise):
        return _BoundIIDStates(np.cumsum(noise.distribution), rng)
    if isinstance(noise, RobbinsMonroNoise):
        return _BoundRobbinsMonro(noise.family, rng)
    if isinstance(noise, ControlledMarkovNoise):
        return _BoundControlled(noise.family, rng)
    raise TypeError(f"unknown noise source {noise!r}")


@dataclass(frozen=True)
class _GaussianH:
    mean_field: Callable[[np.ndarray], np.ndarray]
    factor: np.ndarray

    def __call__(self, theta, xi):
        return np.asarray(self.mean_field(theta), dtype=np.float64) + self.factor @ xi


@dataclass(frozen=True)
class _ObservationH:
    family: KernelFamily

    def __call__(self, theta, x):
        return self.family.observation(theta, x)


def field_eval_for(problem: Problem, noise: NoiseSource) -> Callable:
    """The measurement map H(theta, x) induced by a problem/noise pairing."""
    if isinstance(noise, GaussianNoise):
        if noise.dim != problem.dim:
            raise ValueError(f"noise dim {noise.dim} != problem dim {problem.dim}")
        return _GaussianH(problem.mean_field, _psd_factor(noise.covariance))
    return _ObservationH(noise.family)


# ---------------------------------------------------------------------------
# the recursion


def sa_step(
    state: SAState,
    schedule: StepSchedule,
    noise,
    field_eval: Callable,
    policy: TruncationPolicy = NoTruncation(),
) -> SAState:
    """Advance one step: draw X, move by gamma*H, truncate if requested.

    ``noise`` is a bound noise source (see :func:`bind_noise`).  Raises
    :class:`NonFinite` when the new iterate is not finite.
    """
    n = state.n
    g = schedule.gamma(n + 1)
    x = noise.draw(state.theta, state.chain_state)
    h_value = np.asarray(field_eval(state.theta, x), dtype=np.float64)
    theta_half = state.theta + g * h_value
    sigma = state.sigma
    if isinstance(policy, ExpandingBalls) and not policy.contains(sigma, theta_half):
        theta_new = policy.reset_point.copy()
        sigma += 1
    else:
        theta_new = theta_half
    if not np.all(np.isfinite(theta_new)):
        raise NonFinite(f"non-finite iterate at step {n + 1}", step=n + 1)
    theta_bar = state.theta_bar + (theta_new - state.theta_bar) / (n + 2)
    chain = x if noise.kind == "states" else state.chain_state
    return SAState(n + 1, theta_new, theta_bar, sigma, chain)


def _validate_grid(checkpoint_grid, horizon: int) -> np.ndarray:
    if checkpoint_grid is None:
        grid = np.array([horizon], dtype=np.int64)
    else:
        grid = np.asarray(list(checkpoint_grid), dtype=np.int64)
    if grid.size and (grid.min() < 1 or grid.max() > horizon):
        raise ValueError(f"checkpoint indices must lie in [1, {horizon}]")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("checkpoint indices must be strictly increasing")
    return grid


def _trunc_params(policy: TruncationPolicy, dim: int):
    if isinstance(policy, ExpandingBalls):
        if policy.center.shape != (dim,) or policy.reset_point.shape != (dim,):
            raise ValueError("truncation center/reset must match the problem dimension")
        return True, policy.r0, policy.growth, policy.center, policy.reset_point
    return False, 1.0, 2.0, np.zeros(dim), np.zeros(dim)


def _fast_kernel_call(problem, schedule, noise, policy, horizon, rng, grid):
    """Dispatch to a compiled loop for the built-in combinations, else None.

    Nothing may be drawn from ``rng`` before the dispatch decision is final:
    a None return hands the untouched generator to the step-by-step path,
    which must see the exact stream the compiled path would have seen.
    """
    dim = problem.dim
    if isinstance(noise, GaussianNoise):
        gaussian_kind = (
            "linear"
            if isinstance(problem.mean_field, LinearField)
            else "cubic"
            if isinstance(problem.mean_field, DoubleWellField) and dim == 1
            else None
        )
        if gaussian_kind is None:
            return None
    else:
        family = getattr(noise, "family", None)
        table_like = isinstance(family, (TableFamily, IIDFamily))
        logistic = isinstance(family, TwoStateLogisticFamily)
        if not (table_like or logistic):
            return None
        if logistic and isinstance(noise, IIDStateNoise):
            return None

    trunc_on, r0, growth, center, reset = _trunc_params(policy, dim)
    gammas = schedule.gamma_array(horizon)
    k = grid.shape[0]
    cp_theta = np.empty((k, dim))
    cp_bar = np.empty((k, dim))
    cp_sigma = np.empty(k, dtype=np.int64)

    if isinstance(noise, GaussianNoise):
        normals = rng.standard_normal((horizon, dim))
        if gaussian_kind == "linear":
            out = _loops.sa_gaussian_linear(
                problem.mean_field.matrix,
                problem.mean_field.target,
                _psd_factor(noise.covariance),
                problem.theta0,
                gammas,
                normals,
                trunc_on,
                r0,
                growth,
                center,
                reset,
                grid,
                cp_theta,
                cp_bar,
                cp_sigma,
            )
        else:
            out = _loops.sa_gaussian_cubic(
                float(_psd_factor(noise.covariance)[0, 0]),
                float(problem.theta0[0]),
                gammas,
                normals,
                trunc_on,
                r0,
                growth,
                float(center[0]),
                float(reset[0]),
                grid,
                cp_theta,
                cp_bar,
                cp_sigma,
            )
        status, fail_step, theta, bar, sigma, chain = out
        return status, fail_step, np.atleast_1d(theta), np.atleast_1d(bar), sigma, None, cp_theta, cp_bar, cp_sigma

    uniforms = rng.random(horizon)
    if logistic:
        resample = isinstance(noise, RobbinsMonroNoise)
        start = noise.start_state if isinstance(noise, ControlledMarkovNoise) else 0
        out = _loops.sa_two_state_logistic(
            family.epsilon,
            float(family.values[0]),
            float(family.values[1]),
            resample,
            start,
            float(problem.theta0[0]),
            gammas,
            uniforms,
            trunc_on,
            r0,
            growth,
            float(center[0]),
            float(reset[0]),
            grid,
            cp_theta,
            cp_bar,
            cp_sigma,
        )
        status, fail_step, theta, bar, sigma, chain = out
        return status, fail_step, np.atleast_1d(theta), np.atleast_1d(bar), sigma, int(chain), cp_theta, cp_bar, cp_sigma

    # theta-independent kernel: controlled, stationary-resampled and fixed-law
    # dynamics all reduce to sampling rows of a constant cumulative matrix
    probe_theta = np.zeros(dim)
    if isinstance(noise, ControlledMarkovNoise):
        cum_rows = np.cumsum(family.kernel(probe_theta), axis=1)
        start = noise.start_state
    elif isinstance(noise, RobbinsMonroNoise):
        pi = stationary_distribution(family.kernel(probe_theta))
        cum_rows = np.tile(np.cumsum(pi), (family.state_count, 1))
        start = 0
    else:
        cum_rows = np.tile(np.cumsum(noise.distribution), (family.state_count, 1))
        start = 0
    out = _loops.sa_states_table(
        cum_rows,
        family.values,
        start,
        problem.theta0,
        gammas,
        uniforms,
        trunc_on,
        r0,
        growth,
        center,
        reset,
        grid,
        cp_theta,
        cp_bar,
        cp_sigma,
    )
    status, fail_step, theta, bar, sigma, chain = out
    return status, fail_step, theta, bar, sigma, int(chain), cp_theta, cp_bar, cp_sigma


def run_trajectory(
    problem: Problem,
    schedule: StepSchedule,
    noise: NoiseSource,
    policy: TruncationPolicy,
    horizon: int,
    seed: int,
    checkpoint_grid: Optional[Sequence[int]] = None,
) -> Trajectory:
    """Run the recursion for ``horizon`` steps from ``problem.theta0``.

    Identical (seed, configuration) pairs give bit-identical trajectories.
    Raises :class:`NonFinite` if the iterate leaves the finite range.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    grid = _validate_grid(checkpoint_grid, horizon)
    rng = trajectory_rng(seed)

    fast = _fast_kernel_call(problem, schedule, noise, policy, horizon, rng, grid)
    if fast is not None:
        status, fail_step, theta, bar, sigma, chain, cp_theta, cp_bar, cp_sigma = fast
        if status == _loops.NONFINITE:
            raise NonFinite(f"non-finite iterate at step {fail_step}", step=int(fail_step))
        checkpoints = tuple(
            Checkpoint(int(grid[i]), cp_theta[i].copy(), cp_bar[i].copy(), int(cp_sigma[i]))
            for i in range(grid.shape[0])
        )
        final = SAState(horizon, theta, bar, int(sigma), chain)
        return Trajectory(checkpoints, final, int(seed))

    bound = bind_noise(noise, rng, problem.dim)
    fe = field_eval_for(problem, noise)
    chain0 = noise.start_state if isinstance(noise, ControlledMarkovNoise) else None
    state = SAState(0, problem.theta0.copy(), problem.theta0.copy(), 0, chain0)
    checkpoints = []
    next_cp = 0
    for _ in range(horizon):
        state = sa_step(state, schedule, bound, fe, policy)
        if next_cp < grid.shape[0] and state.n == grid[next_cp]:
            checkpoints.append(
                Checkpoint(state.n, state.theta.copy(), state.theta_bar.copy(), state.sigma)
            )
            next_cp += 1
    return Trajectory(tuple(checkpoints), state, int(seed))


def classify_limit(final_theta, roots, radius: float) -> Optional[int]:
    """Index of the unique root within ``radius`` of ``final_theta``, else None.

    Roots must be pairwise separated by more than twice the radius so the
    assignment cannot be ambiguous.
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    roots = [np.asarray(r, dtype=np.float64) for r in roots]
    for i in range(len(roots)):
        for j in range(i + 1, len(roots)):
            if np.linalg.norm(roots[i] - roots[j]) <= 2.0 * radius:
                raise ValueError(
                    f"roots {i} and {j} are closer than twice the classification radius"
                )
    final_theta = np.asarray(final_theta, dtype=np.float64)
    for i, r in enumerate(roots):
        if np.linalg.norm(final_theta - r) <= radius:
            return i
    return None


def run_linear_recursion(A, gammas, x0, zeta) -> np.ndarray:
    """Iterates of ``x_{k+1} = x_k + gamma_{k+1} (A x_k + zeta_{k+1})``.

    ``zeta`` has one row per step; returns the full path including ``x0``
    (shape (n+1, d)).  Deterministic helper for algebraic identities on
    linear recursions with injected noise.
    """
    A = np.asarray(A, dtype=np.float64)
    x = np.asarray(x0, dtype=np.float64).copy()
    zeta = np.asarray(zeta, dtype=np.float64)
    gammas = np.asarray(gammas, dtype=np.float64)
    if zeta.ndim == 1:
        zeta = zeta[:, None]
    n = zeta.shape[0]
    if gammas.shape[0] < n:
        raise ValueError(f"need {n} step sizes, got {gammas.shape[0]}")
    path = np.empty((n + 1, x.shape[0]))
    path[0] = x
    for k in range(n):
        x = x + gammas[k] * (A @ x + zeta[k])
        path[k + 1] = x
    return path
