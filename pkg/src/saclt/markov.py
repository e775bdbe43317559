"""Finite-state controlled Markov kernels and their Poisson machinery.

A :class:`KernelFamily` maps a parameter vector theta to a row-stochastic
transition matrix ``Q_theta`` over S states together with a per-state
observation ``H(theta, x)``.  With everything finite the quantities the
verification harness needs as ground truth are exactly computable:

* the stationary distribution ``pi_theta`` and the mean field
  ``h(theta) = sum_x pi_theta(x) H(theta, x)``,
* the Poisson-equation solution ``g_hat`` with
  ``g - pi g = g_hat - Q g_hat`` (normalized so ``pi . g_hat = 0``; the
  solution is unique up to an additive constant and the noise covariance
  below does not depend on the choice),
* the per-state conditional covariance of the martingale increments and
  its stationary average

  ``U = sum_x pi(x) (g_hat(x) g_hat(x)^T - (Q g_hat)(x) (Q g_hat)(x)^T)``.

Ergodicity is checked on demand: the second-largest eigenvalue modulus of
``Q`` must stay below ``1 - 1e-8``.
"""

from __future__ import annotations

import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from . import _loops

__all__ = [
    "NonErgodic",
    "SingularFundamental",
    "NotPositiveDefiniteWarning",
    "KernelFamily",
    "IIDFamily",
    "TwoStateLogisticFamily",
    "TableFamily",
    "PoissonSolution",
    "FamilyMeanField",
    "stationary_distribution",
    "poisson_solve",
    "mean_field",
    "mean_field_jacobian",
    "conditional_noise_covariances",
    "noise_covariance",
    "resampled_noise_covariance",
    "find_scalar_root",
    "frozen_increment_covariance",
]

ERGODICITY_TOL = 1e-8


class NonErgodic(ValueError):
    """The kernel is reducible or periodic to tolerance; pi is not unique."""


class SingularFundamental(RuntimeError):
    """The fundamental-matrix system is too ill-conditioned to trust."""


class NotPositiveDefiniteWarning(UserWarning):
    """The asymptotic noise covariance is singular (degenerate limit direction)."""


def _check_stochastic(Q) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError(f"kernel must be a square matrix, got shape {Q.shape}")
    if Q.min() < -1e-12:
        raise ValueError(f"kernel has a negative entry: {Q.min()}")
    rows = Q.sum(axis=1)
    if np.abs(rows - 1.0).max() > 1e-12:
        raise ValueError(f"kernel rows must sum to 1, worst deviation {np.abs(rows - 1.0).max():.3e}")
    return Q


def stationary_distribution(Q) -> np.ndarray:
    """The unique probability vector with ``pi Q = pi``.

    Solved as the null space of ``Q^T - I`` (via SVD) with sum-to-one
    normalization.  Raises :class:`NonErgodic` when the second-largest
    eigenvalue modulus exceeds ``1 - 1e-8`` or the null vector is not
    strictly positive.
    """
    Q = _check_stochastic(Q)
    S = Q.shape[0]
    if S == 1:
        return np.array([1.0])
    moduli = np.sort(np.abs(np.linalg.eigvals(Q)))[::-1]
    if moduli[1] > 1.0 - ERGODICITY_TOL:
        raise NonErgodic(
            f"second-largest eigenvalue modulus {moduli[1]} exceeds {1.0 - ERGODICITY_TOL}"
        )
    _, _, vt = np.linalg.svd(Q.T - np.eye(S))
    pi = vt[-1]
    pi = pi / pi.sum()
    if pi.min() <= 0.0:
        raise NonErgodic(f"stationary vector has a non-positive entry: {pi.min()}")
    residual = float(np.abs(pi @ Q - pi).sum())
    if residual > 1e-12:
        raise SingularFundamental(f"stationary residual {residual:.3e} exceeds 1e-12")
    return pi


@dataclass(frozen=True)
class PoissonSolution:
    """Per-state Poisson-equation data for an observation table ``g``.

    ``g_hat`` (S x d) satisfies ``g(x) - mean = g_hat(x) - (Q g_hat)(x)``
    for every state, with ``pi . g_hat = 0`` and ``mean = pi g``.
    """

    g_hat: np.ndarray
    q_g_hat: np.ndarray
    mean: np.ndarray
    pi: np.ndarray


def poisson_solve(Q, g) -> PoissonSolution:
    """Solve the Poisson equation through the fundamental matrix.

    ``g_hat = Z (g - 1 (pi g))`` with ``Z = (I - Q + 1 pi^T)^{-1}``.
    Accepts ``g`` of shape (S,) or (S, d).
    """
    Q = _check_stochastic(Q)
    pi = stationary_distribution(Q)
    g = np.asarray(g, dtype=np.float64)
    squeeze = g.ndim == 1
    if squeeze:
        g = g[:, None]
    if g.shape[0] != Q.shape[0]:
        raise ValueError(f"observation table has {g.shape[0]} rows, kernel has {Q.shape[0]} states")
    S = Q.shape[0]
    mean = pi @ g
    centered = g - mean[None, :]
    M = np.eye(S) - Q + np.outer(np.ones(S), pi)
    try:
        g_hat = np.linalg.solve(M, centered)
    except np.linalg.LinAlgError as exc:
        raise SingularFundamental(f"fundamental matrix is singular: {exc}") from exc
    q_g_hat = Q @ g_hat
    identity_residual = np.abs(centered - (g_hat - q_g_hat)).max()
    if identity_residual > 1e-10 * (1.0 + np.abs(g).max()):
        raise SingularFundamental(
            f"Poisson identity residual {identity_residual:.3e}; fundamental system ill-conditioned"
        )
    if squeeze:
        return PoissonSolution(g_hat[:, 0], q_g_hat[:, 0], mean, pi)
    return PoissonSolution(g_hat, q_g_hat, mean, pi)


class KernelFamily(ABC):
    """A theta-indexed family of finite-state kernels with observations.

    Implementations must be deterministic and side-effect free in
    ``kernel`` and ``observation_table``; the engine relies on that for
    reproducibility.  ``lipschitz_hint`` is a diagnostic smoothness
    estimate only and enters no computation.

    User-supplied families carry an uncheckable obligation: the averaged
    limit theory assumes the kernel and the Poisson solution vary smoothly
    (Hoelder, exponent above 1/2) in theta.  The built-in families satisfy
    this by construction; nothing here certifies it for custom subclasses.
    """

    state_count: int
    dim: int
    lipschitz_hint: Optional[float] = None
    #: kernels that do not depend on theta allow exact roots and fast sampling
    theta_independent_kernel: bool = False

    @abstractmethod
    def kernel(self, theta: np.ndarray) -> np.ndarray:
        """Row-stochastic S x S matrix at ``theta``."""

    @abstractmethod
    def observation_table(self, theta: np.ndarray) -> np.ndarray:
        """S x d matrix whose row x is ``H(theta, x)``."""

    def observation(self, theta: np.ndarray, x: int) -> np.ndarray:
        return self.observation_table(theta)[x]

    def mean_field_jacobian(self, theta: np.ndarray) -> Optional[np.ndarray]:
        """Analytic Jacobian of the mean field, when the family knows it."""
        return None


@dataclass(frozen=True)
class IIDFamily(KernelFamily):
    """Theta-independent rows: every row of Q equals ``distribution``.

    Observation is ``H(theta, x) = values[x] - theta``, so the mean field is
    ``pi . values - theta`` with Jacobian -I.
    """

    distribution: np.ndarray = field(default=None)
    values: np.ndarray = field(default=None)
    lipschitz_hint: Optional[float] = None
    theta_independent_kernel = True

    def __post_init__(self):
        p = np.asarray(self.distribution, dtype=np.float64)
        if p.ndim != 1 or p.min() < 0 or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("distribution must be a probability vector")
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != p.shape[0]:
            raise ValueError("values must have one row per state")
        object.__setattr__(self, "distribution", p)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "state_count", p.shape[0])
        object.__setattr__(self, "dim", v.shape[1])

    def kernel(self, theta) -> np.ndarray:
        return np.tile(self.distribution, (self.state_count, 1))

    def observation_table(self, theta) -> np.ndarray:
        return self.values - np.asarray(theta, dtype=np.float64)[None, :]

    def mean_field_jacobian(self, theta) -> np.ndarray:
        return -np.eye(self.dim)


def _sigmoid(t: float) -> float:
    return 1.0 / (1.0 + np.exp(-t))


@dataclass(frozen=True)
class TwoStateLogisticFamily(KernelFamily):
    """Two states whose switching rates follow a logistic curve in theta.

    Off-diagonals are ``q01 = eps + (1 - 2 eps) * sigmoid(theta)`` and
    ``q10 = eps + (1 - 2 eps) * sigmoid(-theta)``, so both stay inside
    (eps, 1 - eps) and ``q01 + q10 = 1``; the stationary law is therefore
    ``(q10, q01)`` in closed form.  Observation is scalar,
    ``H(theta, x) = values[x] - theta``.
    """

    epsilon: float = 0.1
    values: np.ndarray = field(default=None)
    lipschitz_hint: Optional[float] = None
    state_count = 2
    dim = 1
    theta_independent_kernel = False

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in (0, 1/2), got {self.epsilon}")
        v = np.asarray(self.values if self.values is not None else [0.0, 1.0], dtype=np.float64)
        if v.shape != (2,):
            raise ValueError("values must hold exactly two scalars")
        object.__setattr__(self, "values", v)

    def switch_up_probability(self, theta_scalar: float) -> float:
        """q01 at a scalar theta."""
        return self.epsilon + (1.0 - 2.0 * self.epsilon) * _sigmoid(theta_scalar)

    def kernel(self, theta) -> np.ndarray:
        t = float(np.asarray(theta).reshape(-1)[0])
        q01 = self.switch_up_probability(t)
        q10 = self.epsilon + (1.0 - 2.0 * self.epsilon) * _sigmoid(-t)
        return np.array([[1.0 - q01, q01], [q10, 1.0 - q10]])

    def observation_table(self, theta) -> np.ndarray:
        t = float(np.asarray(theta).reshape(-1)[0])
        return (self.values - t)[:, None]

    def mean_field_jacobian(self, theta) -> np.ndarray:
        # h(t) = (1-p) v0 + p v1 - t with p = eps + (1-2 eps) sigmoid(t)
        t = float(np.asarray(theta).reshape(-1)[0])
        s = _sigmoid(t)
        dp = (1.0 - 2.0 * self.epsilon) * s * (1.0 - s)
        return np.array([[(self.values[1] - self.values[0]) * dp - 1.0]])


@dataclass(frozen=True)
class TableFamily(KernelFamily):
    """An explicit theta-independent kernel with observation ``values[x] - theta``."""

    transition: np.ndarray = field(default=None)
    values: np.ndarray = field(default=None)
    lipschitz_hint: Optional[float] = None
    theta_independent_kernel = True

    def __post_init__(self):
        Q = _check_stochastic(self.transition)
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != Q.shape[0]:
            raise ValueError("values must have one row per state")
        object.__setattr__(self, "transition", Q)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "state_count", Q.shape[0])
        object.__setattr__(self, "dim", v.shape[1])

    def kernel(self, theta) -> np.ndarray:
        return self.transition

    def observation_table(self, theta) -> np.ndarray:
        return self.values - np.asarray(theta, dtype=np.float64)[None, :]

    def mean_field_jacobian(self, theta) -> np.ndarray:
        return -np.eye(self.dim)


def mean_field(family: KernelFamily, theta) -> np.ndarray:
    """``h(theta) = sum_x pi_theta(x) H(theta, x)``."""
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    pi = stationary_distribution(family.kernel(theta))
    return pi @ family.observation_table(theta)


@dataclass(frozen=True)
class FamilyMeanField:
    """The mean field of a kernel family as a picklable callable."""

    family: KernelFamily

    def __call__(self, theta) -> np.ndarray:
        return mean_field(self.family, theta)


def mean_field_jacobian(family: KernelFamily, theta, step: float = 1e-6) -> np.ndarray:
    """Jacobian of the mean field: analytic when the family provides one,
    otherwise a central finite difference (diagnostic accuracy)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    analytic = family.mean_field_jacobian(theta)
    if analytic is not None:
        return np.asarray(analytic, dtype=np.float64)
    d = family.dim
    J = np.empty((d, d))
    for i in range(d):
        delta = step * (1.0 + abs(theta[i]))
        up = theta.copy()
        dn = theta.copy()
        up[i] += delta
        dn[i] -= delta
        J[:, i] = (mean_field(family, up) - mean_field(family, dn)) / (2.0 * delta)
    return J


def conditional_noise_covariances(family: KernelFamily, theta) -> np.ndarray:
    """Per-state conditional covariance of the martingale increments.

    Returns an (S, d, d) array whose slice x is

    ``F(x) = sum_y Q(x,y) g_hat(y) g_hat(y)^T - (Q g_hat)(x) (Q g_hat)(x)^T``.

    Each slice is a conditional covariance, hence symmetric PSD; a
    point-mass row makes its slice exactly zero.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    Q = family.kernel(theta)
    sol = poisson_solve(Q, family.observation_table(theta))
    g_hat = np.atleast_2d(sol.g_hat.T).T
    q_g_hat = np.atleast_2d(sol.q_g_hat.T).T
    second = np.einsum("xy,yi,yj->xij", Q, g_hat, g_hat)
    outer = np.einsum("xi,xj->xij", q_g_hat, q_g_hat)
    F = second - outer
    return 0.5 * (F + np.transpose(F, (0, 2, 1)))


def noise_covariance(family: KernelFamily, theta_star) -> np.ndarray:
    """Asymptotic covariance of the martingale noise at ``theta_star``.

    ``U = sum_x pi(x) (g_hat(x) g_hat(x)^T - (Q g_hat)(x) (Q g_hat)(x)^T)``;
    by stationarity this equals ``sum_x pi(x) F(x)``.  Emits
    :class:`NotPositiveDefiniteWarning` when U is singular, which makes the
    Gaussian limit degenerate in some direction.
    """
    theta_star = np.atleast_1d(np.asarray(theta_star, dtype=np.float64))
    Q = family.kernel(theta_star)
    sol = poisson_solve(Q, family.observation_table(theta_star))
    g_hat = np.atleast_2d(sol.g_hat.T).T
    q_g_hat = np.atleast_2d(sol.q_g_hat.T).T
    U = np.einsum("x,xi,xj->ij", sol.pi, g_hat, g_hat) - np.einsum(
        "x,xi,xj->ij", sol.pi, q_g_hat, q_g_hat
    )
    U = 0.5 * (U + U.T)
    w = np.linalg.eigvalsh(U)
    if w.min() <= 1e-12 * max(float(np.abs(w).max()), np.finfo(np.float64).tiny):
        warnings.warn(
            f"noise covariance is singular (min eigenvalue {w.min():.3e})",
            NotPositiveDefiniteWarning,
        )
    return U


def resampled_noise_covariance(
    family: KernelFamily, theta, distribution=None
) -> np.ndarray:
    """Noise covariance when states are drawn fresh at every step.

    Under stationary resampling (or a fixed law) the increments are
    conditionally independent, so no Poisson correction appears: the limit
    covariance is the centered second moment of ``H(theta, .)`` under the
    sampling law.  Equivalent to :func:`noise_covariance` with the kernel
    replaced by its rank-one stationary projection.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    if distribution is None:
        p = stationary_distribution(family.kernel(theta))
    else:
        p = np.asarray(distribution, dtype=np.float64)
        if p.shape != (family.state_count,) or p.min() < 0 or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("distribution must be a probability vector over the states")
    table = family.observation_table(theta)
    centered = table - (p @ table)[None, :]
    U = np.einsum("x,xi,xj->ij", p, centered, centered)
    return 0.5 * (U + U.T)


def find_scalar_root(family: KernelFamily, lo: float, hi: float) -> float:
    """Locate the scalar root of the mean field by bracketed root finding.

    The bracket must change sign; the result satisfies |h(root)| <= 1e-10
    for smooth families.
    """
    if family.dim != 1:
        raise ValueError(f"scalar root finding needs dim=1, family has dim={family.dim}")

    def h(t: float) -> float:
        return float(mean_field(family, np.array([t]))[0])

    root = brentq(h, lo, hi, xtol=1e-14, rtol=8.9e-16)
    return float(root)


def frozen_increment_covariance(
    family: KernelFamily,
    theta,
    steps: int,
    seed: int,
    start_state: int = 0,
) -> np.ndarray:
    """Empirical covariance of the martingale increments along a frozen chain.

    Simulates ``steps`` transitions of the chain with the kernel held at
    ``theta`` and returns the sample covariance of
    ``e_{n+1} = g_hat(X_{n+1}) - (Q g_hat)(X_n)``.  Links the analytic
    noise covariance to the noise the engine actually injects.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    Q = family.kernel(theta)
    sol = poisson_solve(Q, family.observation_table(theta))
    g_hat = np.atleast_2d(sol.g_hat.T).T
    q_g_hat = np.atleast_2d(sol.q_g_hat.T).T
    if not 0 <= start_state < family.state_count:
        raise ValueError(f"start_state {start_state} outside 0..{family.state_count - 1}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    uniforms = rng.random(steps)
    states = _loops.simulate_chain(np.cumsum(Q, axis=1), start_state, uniforms)
    increments = g_hat[states[1:]] - q_g_hat[states[:-1]]
    centered = increments - increments.mean(axis=0, keepdims=True)
    return centered.T @ centered / (increments.shape[0] - 1)
