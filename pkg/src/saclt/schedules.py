"""Polynomial step-size schedules and their regime classification.

A schedule is the deterministic sequence ``gamma_n = gamma_star / (n +
offset)**exponent_a`` for n >= 1, with decay exponent in (1/2, 1].  Two
regimes matter for decreasing-step stochastic iterations:

* ``SLOW`` (exponent < 1): the scaled error admits a Gaussian limit whose
  covariance solves a continuous-time Lyapunov equation, and iterate
  averaging attains the sqrt(n) rate with the optimal covariance.
* ``FAST`` (exponent = 1): the 1/n schedule attains the maximal rate, but
  only when ``gamma_star > 1/(2L)`` where -L is the largest real part of
  the Jacobian spectrum at the target.  At or below the bound the schedule
  is classified ``INVALID`` (the comparison is strict).

Averaging additionally requires ``n * gamma_n -> inf`` together with two
vanishing normalized partial sums; :func:`check_averaging_condition`
evaluates those sums numerically and reports the analytic verdict for the
polynomial family.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Optional

import numpy as np

__all__ = [
    "RegimeTag",
    "StepSchedule",
    "ScheduleRegime",
    "AveragingDiagnostics",
    "classify_sa_regime",
    "check_averaging_condition",
]


class RegimeTag(Enum):
    """Step-size regime of a schedule relative to a decay rate L."""

    SLOW = "slow"
    FAST = "fast"
    INVALID = "invalid"


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes ``gamma_n = gamma_star / (n + offset)**exponent_a``, n >= 1.

    ``offset`` shifts the index so the first steps can be kept below 1 for
    stiff Jacobians; it does not change the asymptotics.  The exponent is
    restricted to (1/2, 1], which makes the steps square-summable but not
    summable.
    """

    gamma_star: float
    exponent_a: float
    offset: int = 0

    def __post_init__(self) -> None:
        if not self.gamma_star > 0:
            raise ValueError(f"gamma_star must be positive, got {self.gamma_star}")
        if not 0.5 < self.exponent_a <= 1.0:
            raise ValueError(f"exponent_a must lie in (1/2, 1], got {self.exponent_a}")
        if int(self.offset) != self.offset or self.offset < 0:
            raise ValueError(f"offset must be a non-negative integer, got {self.offset}")

    def gamma(self, n: int) -> float:
        """Step size at index ``n`` (1-based)."""
        if n < 1:
            raise ValueError(f"step index must be >= 1, got {n}")
        return self.gamma_star / float(n + self.offset) ** self.exponent_a

    def gamma_array(self, horizon: int) -> np.ndarray:
        """``gamma_1 .. gamma_horizon`` as a read-only float64 vector.

        Entries equal :meth:`gamma` bit-for-bit (numpy's vectorized power
        can differ from scalar ``pow`` in the last ulp, which would break
        the bit-reproducibility contract between the compiled and the
        step-by-step evaluation paths), so the values are built scalar-wise
        and cached per (schedule, horizon).
        """
        if horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {horizon}")
        return _gamma_values(self.gamma_star, self.exponent_a, self.offset, horizon)

    def to_dict(self) -> dict:
        return {
            "gamma_star": self.gamma_star,
            "exponent_a": self.exponent_a,
            "offset": self.offset,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StepSchedule":
        return cls(
            gamma_star=float(data["gamma_star"]),
            exponent_a=float(data["exponent_a"]),
            offset=int(data.get("offset", 0)),
        )


@lru_cache(maxsize=16)
def _gamma_values(gamma_star: float, exponent_a: float, offset: int, horizon: int) -> np.ndarray:
    out = np.array(
        [gamma_star / float(n + offset) ** exponent_a for n in range(1, horizon + 1)]
    )
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ScheduleRegime:
    """Outcome of :func:`classify_sa_regime`.

    ``gamma_star_lower_bound`` is 1/(2L) when the exponent equals 1 (the
    scale must exceed it strictly), and None otherwise.
    """

    tag: RegimeTag
    reason: str
    gamma_star_lower_bound: Optional[float] = None


def classify_sa_regime(schedule: StepSchedule, decay_rate: float) -> ScheduleRegime:
    """Classify ``schedule`` against the step-size conditions for decay rate L.

    ``decay_rate`` is L > 0, the negated largest eigenvalue real part of the
    Jacobian at the target.  Exponents below 1 are always admissible
    (``SLOW``); exponent 1 requires ``gamma_star > 1/(2L)`` strictly.
    """
    if not decay_rate > 0:
        raise ValueError(f"decay rate L must be positive, got {decay_rate}")
    a = schedule.exponent_a
    if a < 1.0:
        return ScheduleRegime(RegimeTag.SLOW, f"exponent {a} lies in (1/2, 1)")
    bound = 1.0 / (2.0 * decay_rate)
    if schedule.gamma_star > bound:
        return ScheduleRegime(
            RegimeTag.FAST,
            f"exponent 1 and gamma_star={schedule.gamma_star} > 1/(2L)={bound}",
            gamma_star_lower_bound=bound,
        )
    return ScheduleRegime(
        RegimeTag.INVALID,
        f"exponent 1 requires gamma_star > 1/(2L)={bound}, got {schedule.gamma_star}",
        gamma_star_lower_bound=bound,
    )


@dataclass(frozen=True)
class AveragingDiagnostics:
    """Numerical evidence for the averaging step-size condition.

    ``ratio_sums[i]`` holds ``(1/sqrt(n)) * sum_{k<=n} gamma_k**-0.5 *
    |1 - gamma_k/gamma_{k+1}|`` and ``step_sums[i]`` holds
    ``(1/sqrt(n)) * sum_{k<=n} gamma_k``, both evaluated at
    ``n = checkpoints[i]``.  For the polynomial family both sums vanish iff
    the exponent is < 1 (``analytic_ok``); no numerical test can decide the
    general little-o condition, so the sums are exposed as diagnostics for
    monotone-decay assertions only.
    """

    analytic_ok: bool
    checkpoints: np.ndarray
    ratio_sums: np.ndarray
    step_sums: np.ndarray


def check_averaging_condition(schedule: StepSchedule, horizon: int) -> AveragingDiagnostics:
    """Evaluate the averaging partial sums at log-spaced checkpoints up to ``horizon``."""
    if horizon < 10:
        raise ValueError(f"horizon must be >= 10, got {horizon}")
    g = schedule.gamma_array(horizon + 1)
    ratio = np.abs(1.0 - g[:-1] / g[1:]) / np.sqrt(g[:-1])
    cum_ratio = np.cumsum(ratio)
    cum_step = np.cumsum(g[:-1])
    pts = np.unique(
        np.append(np.geomspace(10, horizon, num=60).astype(np.int64), horizon)
    )
    scale = 1.0 / np.sqrt(pts.astype(np.float64))
    return AveragingDiagnostics(
        analytic_ok=schedule.exponent_a < 1.0,
        checkpoints=pts,
        ratio_sums=cum_ratio[pts - 1] * scale,
        step_sums=cum_step[pts - 1] * scale,
    )
