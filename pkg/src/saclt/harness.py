"""Monte-Carlo ensembles and the empirical CLT report.

An ensemble runs R independent trajectories from seeds split off a master
seed, classifies each replicate to a limiting target by its final iterate,
and forms the two scaled errors

    Z = gamma_n^{-1/2} (theta_n - theta*)        (raw scale)
    W = sqrt(n) (theta_bar_n - theta*)           (averaged scale)

conditioned on the classified target.  The report compares their empirical
covariances against the theoretical limits (Lyapunov solution for Z, the
averaged covariance ``A^{-1} U A^{-T}`` for W), and tests Gaussianity via
Kolmogorov-Smirnov distances of the whitened samples.

Classification at a finite horizon approximates conditioning on the limit
event, which is unobservable; the unclassified rate is itself reported.
Replicates are embarrassingly parallel: results are merged by replicate
index, so any worker count produces the identical report.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context
from typing import Optional, Sequence

import numpy as np
from scipy.stats import chi2, kstest, kstwobign, norm

from .engine import (
    ExpandingBalls,
    NoiseSource,
    NonFinite,
    Problem,
    TruncationPolicy,
    classify_limit,
    derive_replicate_seed,
    run_trajectory,
)
from .schedules import RegimeTag, StepSchedule, classify_sa_regime
from .spectral import (
    AsymptoticCovariance,
    hurwitz_info,
    optimal_covariance,
    solve_lyapunov_fast,
    solve_lyapunov_slow,
)

__all__ = [
    "TooFewSamples",
    "MissingTheory",
    "Tolerances",
    "EnsembleConfig",
    "EnsembleResult",
    "TargetTheory",
    "NormalityDiagnostics",
    "run_ensemble",
    "empirical_covariance",
    "normality_diagnostics",
    "ks_critical_value",
    "compute_theory",
    "clt_report",
    "CltReport",
]

FAILED = -2
UNCLASSIFIED = -1


class TooFewSamples(ValueError):
    """Not enough samples for the requested statistic."""


class MissingTheory(KeyError):
    """A target was observed for which no theoretical covariance is available."""


@dataclass(frozen=True)
class Tolerances:
    """Verdict thresholds; defaults suit slow schedules at R=2000, n=1e5.

    Fast schedules and Markov dynamics converge more slowly in distribution,
    so presets for those use 0.15 instead of 0.10.  A covariance verdict
    passes iff the relative Frobenius error is within tolerance and the
    per-target sample count reaches ``min_samples``.
    """

    raw_rel_error: float = 0.10
    avg_rel_error: float = 0.10
    ks_alpha: float = 0.01
    min_samples: int = 100
    check_raw: bool = True
    check_avg: bool = True
    check_normality: bool = True
    max_failure_rate: float = 0.01
    max_unclassified_rate: Optional[float] = None
    target_share_range: Optional[tuple] = None
    max_late_truncation_fraction: Optional[float] = None
    # KS is the single implemented goodness-of-fit statistic (its critical
    # values are distribution free); the knob exists for config clarity only
    normality_statistic: str = "ks"

    def __post_init__(self):
        if self.normality_statistic != "ks":
            raise ValueError(
                f"only the 'ks' normality statistic is implemented, "
                f"got {self.normality_statistic!r}"
            )

    def to_dict(self) -> dict:
        return {
            "raw_rel_error": self.raw_rel_error,
            "avg_rel_error": self.avg_rel_error,
            "ks_alpha": self.ks_alpha,
            "min_samples": self.min_samples,
            "check_raw": self.check_raw,
            "check_avg": self.check_avg,
            "check_normality": self.check_normality,
            "max_failure_rate": self.max_failure_rate,
            "max_unclassified_rate": self.max_unclassified_rate,
            "target_share_range": list(self.target_share_range)
            if self.target_share_range is not None
            else None,
            "max_late_truncation_fraction": self.max_late_truncation_fraction,
            "normality_statistic": self.normality_statistic,
        }


@dataclass(frozen=True)
class EnsembleConfig:
    """Everything one Monte-Carlo run needs; all randomness flows from master_seed."""

    problem: Problem
    schedule: StepSchedule
    noise: NoiseSource
    policy: TruncationPolicy
    replicates: int
    horizon: int
    master_seed: int
    radius: float

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError(f"replicates must be >= 1, got {self.replicates}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must fit in 64 bits")
        for i, A in enumerate(self.problem.jacobians):
            hurwitz_info(A)  # raises NotHurwitz with the offending eigenvalue
        # fail fast on ambiguous classification geometry
        classify_limit(self.problem.roots[0], self.problem.roots, self.radius)


@dataclass
class EnsembleResult:
    """Per-replicate outcomes plus the scaled errors, keyed by replicate index."""

    config: EnsembleConfig
    seeds: np.ndarray
    final_theta: np.ndarray
    final_theta_bar: np.ndarray
    sigma_half: np.ndarray
    sigma_final: np.ndarray
    failed: np.ndarray
    target_index: np.ndarray
    raw_scaled: np.ndarray
    avg_scaled: np.ndarray

    @property
    def replicates(self) -> int:
        return self.seeds.shape[0]

    @property
    def failure_count(self) -> int:
        return int(self.failed.sum())

    @property
    def unclassified_count(self) -> int:
        return int((self.target_index == UNCLASSIFIED).sum())

    def target_count(self, j: int) -> int:
        return int((self.target_index == j).sum())

    def raw_samples(self, j: int) -> np.ndarray:
        return self.raw_scaled[self.target_index == j]

    def avg_samples(self, j: int) -> np.ndarray:
        return self.avg_scaled[self.target_index == j]


def _run_chunk(payload, pairs):
    problem, schedule, noise, policy, horizon, grid = payload
    out = []
    for replicate, seed in pairs:
        try:
            traj = run_trajectory(problem, schedule, noise, policy, horizon, seed, grid)
        except NonFinite:
            out.append((replicate, None))
            continue
        sigma_half = traj.checkpoints[0].sigma if len(traj.checkpoints) > 1 else 0
        out.append(
            (
                replicate,
                (
                    traj.final.theta,
                    traj.final.theta_bar,
                    sigma_half,
                    traj.final.sigma,
                ),
            )
        )
    return out


def run_ensemble(config: EnsembleConfig, workers: int = 1) -> EnsembleResult:
    """Run R trajectories, classify them and form the scaled errors.

    The result is a deterministic function of the configuration alone:
    replicate r always uses the seed split off (master_seed, r), and merging
    is keyed by replicate index, so the worker count cannot change anything.
    """
    R = config.replicates
    horizon = config.horizon
    half = horizon // 2
    grid = [half, horizon] if 0 < half < horizon else [horizon]
    payload = (config.problem, config.schedule, config.noise, config.policy, horizon, grid)
    seeds = np.array(
        [derive_replicate_seed(config.master_seed, r) for r in range(R)], dtype=np.uint64
    )
    pairs = [(r, int(seeds[r])) for r in range(R)]

    if workers is None:
        workers = os.cpu_count() or 1
    workers = max(1, min(int(workers), R))

    results: dict = {}
    if workers == 1:
        for replicate, outcome in _run_chunk(payload, pairs):
            results[replicate] = outcome
    else:
        # the first replicate runs in the parent so compiled loops are warm
        # before the pool forks
        for replicate, outcome in _run_chunk(payload, pairs[:1]):
            results[replicate] = outcome
        rest = pairs[1:]
        chunk = max(1, math.ceil(len(rest) / (workers * 4)))
        chunks = [rest[i : i + chunk] for i in range(0, len(rest), chunk)]
        try:
            ctx = get_context("fork")
        except ValueError:  # platforms without fork re-import in each worker
            ctx = get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            for part in pool.map(_run_chunk, [payload] * len(chunks), chunks):
                for replicate, outcome in part:
                    results[replicate] = outcome

    d = config.problem.dim
    final_theta = np.full((R, d), np.nan)
    final_bar = np.full((R, d), np.nan)
    sigma_half_arr = np.zeros(R, dtype=np.int64)
    sigma_final_arr = np.zeros(R, dtype=np.int64)
    failed = np.zeros(R, dtype=bool)
    for r in range(R):
        outcome = results[r]
        if outcome is None:
            failed[r] = True
            continue
        theta, bar, s_half, s_final = outcome
        final_theta[r] = theta
        final_bar[r] = bar
        sigma_half_arr[r] = s_half
        sigma_final_arr[r] = s_final

    target_index = np.full(R, FAILED, dtype=np.int64)
    roots = config.problem.roots
    for r in range(R):
        if failed[r]:
            continue
        j = classify_limit(final_theta[r], roots, config.radius)
        target_index[r] = UNCLASSIFIED if j is None else j

    gamma_n = config.schedule.gamma(horizon)
    raw_scaled = np.full((R, d), np.nan)
    avg_scaled = np.full((R, d), np.nan)
    for j, root in enumerate(roots):
        mask = target_index == j
        if not mask.any():
            continue
        raw_scaled[mask] = (final_theta[mask] - root[None, :]) / np.sqrt(gamma_n)
        avg_scaled[mask] = np.sqrt(float(horizon)) * (final_bar[mask] - root[None, :])

    return EnsembleResult(
        config=config,
        seeds=seeds,
        final_theta=final_theta,
        final_theta_bar=final_bar,
        sigma_half=sigma_half_arr,
        sigma_final=sigma_final_arr,
        failed=failed,
        target_index=target_index,
        raw_scaled=raw_scaled,
        avg_scaled=avg_scaled,
    )


def empirical_covariance(samples: np.ndarray) -> np.ndarray:
    """Mean-centered second-moment matrix with 1/(N-1) normalization.

    Bitwise-constant samples give the exact zero matrix, so deterministic
    (noise-free) ensembles report exactly zero covariance.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    n = samples.shape[0]
    if n < 2:
        raise TooFewSamples(f"need at least 2 samples, got {n}")
    if np.all(samples == samples[0]):
        return np.zeros((samples.shape[1], samples.shape[1]))
    centered = samples - samples.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (n - 1)
    return 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class NormalityDiagnostics:
    """KS distances of whitened samples: squared norms vs chi^2_d, coordinates vs N(0,1)."""

    mahalanobis_ks: float
    per_coordinate_ks: tuple
    sample_count: int


def _pd_inverse_sqrt(V: np.ndarray) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    w, Q = np.linalg.eigh(0.5 * (V + V.T))
    if w.min() <= 1e-12 * max(float(np.abs(w).max()), np.finfo(np.float64).tiny):
        raise ValueError(f"covariance is not positive definite (min eigenvalue {w.min():.3e})")
    return (Q / np.sqrt(w)) @ Q.T


def normality_diagnostics(samples: np.ndarray, V: np.ndarray) -> NormalityDiagnostics:
    """KS statistics of ``samples`` against the centered Gaussian with covariance V."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    n, d = samples.shape
    if n < 100:
        raise TooFewSamples(f"need at least 100 samples for normality checks, got {n}")
    whitened = samples @ _pd_inverse_sqrt(V)
    squared = np.einsum("ij,ij->i", whitened, whitened)
    mahal = float(kstest(squared, chi2(d).cdf).statistic)
    coords = tuple(float(kstest(whitened[:, j], norm.cdf).statistic) for j in range(d))
    return NormalityDiagnostics(mahal, coords, n)


def ks_critical_value(alpha: float, n: int) -> float:
    """Asymptotic KS critical value at level alpha for n samples (about 1.63/sqrt(n) at 1%)."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    return float(kstwobign.isf(alpha)) / math.sqrt(n)


@dataclass(frozen=True)
class TargetTheory:
    """Theoretical limits at one root: raw-scale Lyapunov solution and averaged covariance."""

    root: np.ndarray
    jacobian: np.ndarray
    noise_covariance: np.ndarray
    decay_rate: float
    regime: RegimeTag
    raw: Optional[AsymptoticCovariance]
    averaged: np.ndarray


def compute_theory(problem: Problem, schedule: StepSchedule) -> tuple:
    """Per-root theoretical covariances for the given schedule."""
    out = []
    for root, A, U in zip(problem.roots, problem.jacobians, problem.noise_covariances):
        info = hurwitz_info(A)
        regime = classify_sa_regime(schedule, info.decay_rate)
        if regime.tag is RegimeTag.SLOW:
            raw = solve_lyapunov_slow(A, U)
        elif regime.tag is RegimeTag.FAST:
            raw = solve_lyapunov_fast(A, U, schedule.gamma_star)
        else:
            raw = None
        out.append(
            TargetTheory(
                root=root,
                jacobian=info.matrix,
                noise_covariance=np.asarray(U, dtype=np.float64),
                decay_rate=info.decay_rate,
                regime=regime.tag,
                raw=raw,
                averaged=optimal_covariance(A, U),
            )
        )
    return tuple(out)


@dataclass(frozen=True)
class ScaleReport:
    """Empirical-vs-theory comparison on one scale (raw or averaged)."""

    empirical: np.ndarray
    theory: np.ndarray
    rel_error: float
    pass_covariance: bool
    mahalanobis_ks: Optional[float] = None
    per_coordinate_ks: Optional[tuple] = None
    ks_critical: Optional[float] = None
    pass_normality: Optional[bool] = None


@dataclass(frozen=True)
class TargetReport:
    index: int
    root: np.ndarray
    count: int
    share: float
    raw: Optional[ScaleReport]
    averaged: Optional[ScaleReport]

    @property
    def passed(self) -> bool:
        for section in (self.raw, self.averaged):
            if section is None:
                continue
            if not section.pass_covariance:
                return False
            if section.pass_normality is False:
                return False
        return True


@dataclass(frozen=True)
class CltReport:
    targets: tuple
    tolerances: Tolerances
    replicates: int
    horizon: int
    master_seed: int
    radius: float
    failure_count: int
    unclassified_count: int
    truncation_active: bool
    late_truncation_fraction: Optional[float]
    checks: dict

    @property
    def overall_pass(self) -> bool:
        return all(self.checks.values()) and all(t.passed for t in self.targets)

    def to_dict(self) -> dict:
        def arr(a):
            return np.asarray(a, dtype=np.float64).tolist()

        def scale_section(section: Optional[ScaleReport]):
            if section is None:
                return None
            return {
                "empirical": arr(section.empirical),
                "theory": arr(section.theory),
                "rel_error": section.rel_error,
                "pass_covariance": section.pass_covariance,
                "mahalanobis_ks": section.mahalanobis_ks,
                "per_coordinate_ks": list(section.per_coordinate_ks)
                if section.per_coordinate_ks is not None
                else None,
                "ks_critical": section.ks_critical,
                "pass_normality": section.pass_normality,
            }

        return {
            "ensemble": {
                "replicates": self.replicates,
                "horizon": self.horizon,
                "master_seed": self.master_seed,
                "radius": self.radius,
                "failures": self.failure_count,
                "failure_rate": self.failure_count / self.replicates,
                "unclassified": self.unclassified_count,
                "unclassified_rate": self.unclassified_count / self.replicates,
                "truncation_active": self.truncation_active,
                "late_truncation_fraction": self.late_truncation_fraction,
            },
            "targets": [
                {
                    "index": t.index,
                    "root": arr(t.root),
                    "count": t.count,
                    "share": t.share,
                    "raw": scale_section(t.raw),
                    "averaged": scale_section(t.averaged),
                    "passed": t.passed,
                }
                for t in self.targets
            ],
            "tolerances": self.tolerances.to_dict(),
            "checks": dict(self.checks),
            "overall_pass": self.overall_pass,
        }

    def to_text(self) -> str:
        lines = []
        lines.append(
            f"ensemble: R={self.replicates} horizon={self.horizon} "
            f"master_seed={self.master_seed} failures={self.failure_count} "
            f"unclassified={self.unclassified_count}"
        )
        if self.truncation_active:
            lines.append(f"late truncation fraction: {self.late_truncation_fraction:.6g}")
        header = (
            f"{'target':>6} {'count':>6} {'share':>7} "
            f"{'raw err':>10} {'raw ks':>9} {'avg err':>10} {'avg ks':>9} {'verdict':>8}"
        )
        lines.append(header)
        for t in self.targets:
            def fmt(section, attr):
                if section is None:
                    return "-"
                value = getattr(section, attr)
                return "-" if value is None else f"{value:.4f}"

            lines.append(
                f"{t.index:>6} {t.count:>6} {t.share:>7.3f} "
                f"{fmt(t.raw, 'rel_error'):>10} {fmt(t.raw, 'mahalanobis_ks'):>9} "
                f"{fmt(t.averaged, 'rel_error'):>10} {fmt(t.averaged, 'mahalanobis_ks'):>9} "
                f"{'pass' if t.passed else 'FAIL':>8}"
            )
        for name, ok in self.checks.items():
            lines.append(f"check {name}: {'pass' if ok else 'FAIL'}")
        lines.append(f"overall: {'pass' if self.overall_pass else 'FAIL'}")
        return "\n".join(lines)


def _scale_report(
    samples: np.ndarray,
    theory_matrix: np.ndarray,
    rel_tol: float,
    tolerances: Tolerances,
) -> ScaleReport:
    empirical = empirical_covariance(samples)
    denom = np.linalg.norm(theory_matrix, "fro")
    rel_error = float(np.linalg.norm(empirical - theory_matrix, "fro") / denom)
    pass_cov = rel_error <= rel_tol and samples.shape[0] >= tolerances.min_samples
    mahal = coords = crit = pass_norm = None
    if tolerances.check_normality:
        if samples.shape[0] >= 100:
            diag = normality_diagnostics(samples, theory_matrix)
            crit = ks_critical_value(tolerances.ks_alpha, diag.sample_count)
            mahal = diag.mahalanobis_ks
            coords = diag.per_coordinate_ks
            pass_norm = mahal < crit and all(c < crit for c in coords)
        else:
            pass_norm = False
    return ScaleReport(
        empirical=empirical,
        theory=theory_matrix,
        rel_error=rel_error,
        pass_covariance=pass_cov,
        mahalanobis_ks=mahal,
        per_coordinate_ks=coords,
        ks_critical=crit,
        pass_normality=pass_norm,
    )


def clt_report(
    result: EnsembleResult,
    theory: Sequence[TargetTheory],
    tolerances: Tolerances,
) -> CltReport:
    """Compare the ensemble's scaled errors against the theoretical limits."""
    R = result.replicates
    observed = sorted({int(j) for j in result.target_index if j >= 0})
    for j in observed:
        if j >= len(theory) or theory[j] is None:
            raise MissingTheory(f"no theory provided for observed target {j}")

    targets = []
    for j, th in enumerate(theory):
        count = result.target_count(j)
        share = count / R
        raw_section = avg_section = None
        if count >= 2:
            if tolerances.check_raw:
                if th.raw is None:
                    raise MissingTheory(
                        f"raw-scale theory unavailable for target {j} "
                        f"(schedule regime {th.regime.value})"
                    )
                raw_section = _scale_report(
                    result.raw_samples(j), th.raw.matrix, tolerances.raw_rel_error, tolerances
                )
            if tolerances.check_avg:
                avg_section = _scale_report(
                    result.avg_samples(j), th.averaged, tolerances.avg_rel_error, tolerances
                )
        elif count > 0 and (tolerances.check_raw or tolerances.check_avg):
            raise TooFewSamples(
                f"target {j} captured {count} replicate(s); need >= 2 for covariances"
            )
        targets.append(
            TargetReport(
                index=j,
                root=th.root,
                count=count,
                share=share,
                raw=raw_section,
                averaged=avg_section,
            )
        )

    truncating = isinstance(result.config.policy, ExpandingBalls)
    late_fraction = None
    if truncating:
        ok_mask = ~result.failed
        late = (result.sigma_final > result.sigma_half) & ok_mask
        late_fraction = float(late.sum()) / R

    checks = {"failure_rate": result.failure_count / R <= tolerances.max_failure_rate}
    if tolerances.max_unclassified_rate is not None:
        checks["unclassified_rate"] = (
            result.unclassified_count / R <= tolerances.max_unclassified_rate
        )
    if tolerances.target_share_range is not None:
        lo, hi = tolerances.target_share_range
        checks["target_shares"] = all(lo <= t.share <= hi for t in targets)
    if tolerances.max_late_truncation_fraction is not None:
        checks["late_truncation"] = (
            truncating and late_fraction <= tolerances.max_late_truncation_fraction
        )

    return CltReport(
        targets=tuple(targets),
        tolerances=tolerances,
        replicates=R,
        horizon=result.config.horizon,
        master_seed=int(result.config.master_seed),
        radius=result.config.radius,
        failure_count=result.failure_count,
        unclassified_count=result.unclassified_count,
        truncation_active=truncating,
        late_truncation_fraction=late_fraction,
        checks=checks,
    )
