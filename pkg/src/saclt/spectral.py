"""Hurwitz spectra, Lyapunov equations, and optimal-gain covariances.

The two Lyapunov equations solved here determine the limiting covariance of
the scaled iterate error:

* slow schedules:  ``V A^T + A V = -U``
* fast (1/n) schedules:  ``V (I + 2 g* A^T) + (I + 2 g* A) V = -2 g* U``

with A the Jacobian of the mean field at the target and U the asymptotic
noise covariance.  Both are solved through the d^2-dimensional Kronecker-sum
linearization (d stays small here, so no Schur reduction is needed), then
symmetrized, residual-checked and positivity-checked.

The module also provides the optimal gain ``-g*^{-1} A^{-1}``, the averaged
limit covariance ``A^{-1} U A^{-T}``, and a testable bound on ordered
products ``(I + gamma_n A_n) ... (I + gamma_k A_k)`` against the envelope
``exp(-L' * sum gamma_j)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .schedules import RegimeTag, StepSchedule

__all__ = [
    "NotHurwitz",
    "SingularSystem",
    "RegimeViolation",
    "HurwitzInfo",
    "AsymptoticCovariance",
    "ProductBound",
    "hurwitz_info",
    "solve_lyapunov_slow",
    "solve_lyapunov_fast",
    "optimal_gain",
    "optimal_covariance",
    "scaled_optimal_covariance",
    "ordered_product",
    "hurwitz_product_bound_check",
    "product_envelope_profile",
]

# Smallest eigenvalue of a solved covariance must exceed this times its
# spectral norm, otherwise the solve is rejected.
_PD_RTOL = 1e-12

MatrixSequence = Union[np.ndarray, Callable[[int], np.ndarray]]


class NotHurwitz(ValueError):
    """A matrix has an eigenvalue with non-negative real part.

    Carries the offending eigenvalue; the asymptotic theory does not apply
    because the target is not attractive.
    """

    def __init__(self, message: str, eigenvalue: Optional[complex] = None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class SingularSystem(RuntimeError):
    """The Lyapunov linearization is numerically defective (near-marginal stability)."""


class RegimeViolation(ValueError):
    """The fast-schedule equation was requested although 2*L*gamma_star <= 1."""


def _as_square(matrix, name: str = "matrix") -> np.ndarray:
    A = np.asarray(matrix, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    return A


def _check_sym_psd(U, name: str = "U") -> np.ndarray:
    U = _as_square(U, name)
    scale = max(float(np.abs(U).max()), 1.0)
    if not np.allclose(U, U.T, rtol=0.0, atol=1e-10 * scale):
        raise ValueError(f"{name} must be symmetric")
    U = 0.5 * (U + U.T)
    w = np.linalg.eigvalsh(U)
    if w.min() < -1e-10 * scale:
        raise ValueError(f"{name} must be positive semi-definite, min eigenvalue {w.min()}")
    return U


@dataclass(frozen=True)
class HurwitzInfo:
    """Spectrum of a Hurwitz matrix; ``decay_rate`` is L > 0 with max Re(eig) = -L."""

    matrix: np.ndarray
    decay_rate: float
    eigenvalues: np.ndarray


def hurwitz_info(matrix) -> HurwitzInfo:
    """Eigenvalues and decay rate of ``matrix``; raises :class:`NotHurwitz` otherwise."""
    A = _as_square(matrix)
    eigenvalues = np.linalg.eigvals(A)
    worst = eigenvalues[int(np.argmax(eigenvalues.real))]
    if worst.real >= 0:
        raise NotHurwitz(
            f"eigenvalue {worst} has non-negative real part; matrix is not Hurwitz",
            eigenvalue=complex(worst),
        )
    return HurwitzInfo(matrix=A, decay_rate=float(-worst.real), eigenvalues=eigenvalues)


@dataclass(frozen=True)
class AsymptoticCovariance:
    """A solved limiting covariance with its defining-equation residual."""

    matrix: np.ndarray
    regime: RegimeTag
    residual_norm: float


def _solve_stable_lyapunov(B: np.ndarray, rhs: np.ndarray, regime: RegimeTag) -> AsymptoticCovariance:
    """Unique V with ``V B^T + B V = -rhs`` via the Kronecker-sum linearization."""
    d = B.shape[0]
    eye = np.eye(d)
    K = np.kron(B, eye) + np.kron(eye, B)
    try:
        v = np.linalg.solve(K, -rhs.reshape(-1))
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"Kronecker-sum system is singular: {exc}") from exc
    V = v.reshape(d, d)
    V = 0.5 * (V + V.T)
    residual = float(np.linalg.norm(V @ B.T + B @ V + rhs, "fro"))
    if residual > 1e-8 * (1.0 + np.linalg.norm(rhs, "fro")):
        raise SingularSystem(
            f"Lyapunov residual {residual:.3e} too large; system nearly defective"
        )
    w = np.linalg.eigvalsh(V)
    if w.min() <= _PD_RTOL * max(float(np.abs(w).max()), np.finfo(np.float64).tiny):
        raise SingularSystem(
            f"solution is not positive definite (min eigenvalue {w.min():.3e})"
        )
    return AsymptoticCovariance(matrix=V, regime=regime, residual_norm=residual)


def solve_lyapunov_slow(A, U) -> AsymptoticCovariance:
    """Solve ``V A^T + A V = -U`` for the slow-schedule limiting covariance."""
    info = hurwitz_info(A)
    U = _check_sym_psd(U)
    if U.shape != info.matrix.shape:
        raise ValueError(f"shape mismatch: A is {info.matrix.shape}, U is {U.shape}")
    return _solve_stable_lyapunov(info.matrix, U, RegimeTag.SLOW)


def solve_lyapunov_fast(A, U, gamma_star: float) -> AsymptoticCovariance:
    """Solve ``V (I + 2 g* A^T) + (I + 2 g* A) V = -2 g* U`` (1/n schedules).

    Requires ``2 * L * gamma_star > 1`` so that ``I + 2 g* A`` is stable;
    otherwise the fast-rate limit is not claimed and
    :class:`RegimeViolation` is raised.
    """
    info = hurwitz_info(A)
    U = _check_sym_psd(U)
    if U.shape != info.matrix.shape:
        raise ValueError(f"shape mismatch: A is {info.matrix.shape}, U is {U.shape}")
    if not gamma_star > 0:
        raise ValueError(f"gamma_star must be positive, got {gamma_star}")
    if 2.0 * info.decay_rate * gamma_star <= 1.0:
        raise RegimeViolation(
            f"2*L*gamma_star = {2.0 * info.decay_rate * gamma_star} <= 1; "
            "the fast-schedule covariance equation has no stable solution"
        )
    d = info.matrix.shape[0]
    B = np.eye(d) + 2.0 * gamma_star * info.matrix
    return _solve_stable_lyapunov(B, 2.0 * gamma_star * U, RegimeTag.FAST)


def _stable_inverse(A: np.ndarray) -> np.ndarray:
    if np.linalg.cond(A) > 1e14:
        raise np.linalg.LinAlgError("matrix is numerically singular")
    return np.linalg.inv(A)


def optimal_gain(A, gamma_star: float) -> np.ndarray:
    """The gain matrix ``-gamma_star^{-1} A^{-1}`` that minimizes the fast-rate covariance."""
    A = _as_square(A)
    if not gamma_star > 0:
        raise ValueError(f"gamma_star must be positive, got {gamma_star}")
    return -_stable_inverse(A) / gamma_star


def optimal_covariance(A, U) -> np.ndarray:
    """``A^{-1} U A^{-T}``: the limiting covariance of the averaged iterate."""
    A = _as_square(A)
    U = _check_sym_psd(U)
    Ainv = _stable_inverse(A)
    M = Ainv @ U @ Ainv.T
    return 0.5 * (M + M.T)


def scaled_optimal_covariance(A, U, gamma_star: float) -> np.ndarray:
    """``gamma_star^{-1} A^{-1} U A^{-T}``: the raw-scale covariance at the optimal gain."""
    if not gamma_star > 0:
        raise ValueError(f"gamma_star must be positive, got {gamma_star}")
    return optimal_covariance(A, U) / gamma_star


def _matrix_at(matrices: MatrixSequence, j: int) -> np.ndarray:
    if callable(matrices):
        return _as_square(matrices(j), f"matrices({j})")
    return _as_square(matrices, "matrices")


def _gamma_at(steps, j: int) -> float:
    # steps is a StepSchedule or an explicit array of gamma_1, gamma_2, ...
    if isinstance(steps, StepSchedule):
        return steps.gamma(j)
    return float(np.asarray(steps, dtype=np.float64)[j - 1])


def ordered_product(matrices: MatrixSequence, steps, k: int, n: int) -> np.ndarray:
    """``(I + gamma_n A_n) ... (I + gamma_k A_k)``, the identity when k = n + 1.

    ``matrices`` is either a constant matrix or a callable j -> A_j;
    ``steps`` is a :class:`StepSchedule` or an explicit step array.
    """
    if k > n + 1:
        raise ValueError(f"need k <= n + 1, got k={k}, n={n}")
    probe = _matrix_at(matrices, k if k <= n else max(n, 1))
    d = probe.shape[0]
    P = np.eye(d)
    for j in range(k, n + 1):
        P = (np.eye(d) + _gamma_at(steps, j) * _matrix_at(matrices, j)) @ P
    return P


@dataclass(frozen=True)
class ProductBound:
    """Spectral norm of an ordered product next to its exponential envelope."""

    lhs: float
    rhs_envelope: float

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs_envelope


def hurwitz_product_bound_check(
    matrices: MatrixSequence,
    steps,
    decay_margin: float,
    k: int,
    n: int,
) -> ProductBound:
    """Compare ``|product|_2`` with ``exp(-L' * sum_{j=k}^n gamma_j)``.

    ``decay_margin`` is L' and must lie in (0, L) for the bound to stay
    uniform over n (caller's promise; the matrices only need to converge to
    a Hurwitz limit).
    """
    P = ordered_product(matrices, steps, k, n)
    lhs = float(np.linalg.norm(P, 2))
    gsum = sum(_gamma_at(steps, j) for j in range(k, n + 1))
    return ProductBound(lhs=lhs, rhs_envelope=float(np.exp(-decay_margin * gsum)))


def product_envelope_profile(
    matrices: MatrixSequence,
    steps,
    decay_margin: float,
    n_max: int,
    k: int = 1,
) -> np.ndarray:
    """``lhs / envelope`` for every n in k..n_max, built incrementally.

    Useful for boundedness assertions: the ratio must stay bounded in n when
    ``decay_margin`` < L.
    """
    if k < 1 or n_max < k:
        raise ValueError(f"need 1 <= k <= n_max, got k={k}, n_max={n_max}")
    probe = _matrix_at(matrices, k)
    d = probe.shape[0]
    P = np.eye(d)
    ratios = np.empty(n_max - k + 1)
    gsum = 0.0
    for j in range(k, n_max + 1):
        g = _gamma_at(steps, j)
        P = (np.eye(d) + g * _matrix_at(matrices, j)) @ P
        gsum += g
        ratios[j - k] = np.linalg.norm(P, 2) / np.exp(-decay_margin * gsum)
    return ratios
