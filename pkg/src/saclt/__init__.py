"""Decreasing-step stochastic iteration engine with an empirical CLT harness.

Subpackages by task: :mod:`saclt.schedules` (step sizes and regimes),
:mod:`saclt.spectral` (Lyapunov equations, optimal gain), :mod:`saclt.markov`
(finite-state kernel families, Poisson machinery, exact noise covariances),
:mod:`saclt.engine` (the recursion, truncation, trajectories),
:mod:`saclt.harness` (ensembles, covariance comparison, normality checks),
:mod:`saclt.config` / :mod:`saclt.cli` (JSON configs, presets, commands).
"""

from .schedules import (
    AveragingDiagnostics,
    RegimeTag,
    ScheduleRegime,
    StepSchedule,
    check_averaging_condition,
    classify_sa_regime,
)
from .spectral import (
    AsymptoticCovariance,
    HurwitzInfo,
    NotHurwitz,
    RegimeViolation,
    SingularSystem,
    hurwitz_info,
    hurwitz_product_bound_check,
    optimal_covariance,
    optimal_gain,
    scaled_optimal_covariance,
    solve_lyapunov_fast,
    solve_lyapunov_slow,
)
from .markov import (
    IIDFamily,
    KernelFamily,
    NonErgodic,
    PoissonSolution,
    TableFamily,
    TwoStateLogisticFamily,
    conditional_noise_covariances,
    find_scalar_root,
    frozen_increment_covariance,
    mean_field,
    noise_covariance,
    poisson_solve,
    resampled_noise_covariance,
    stationary_distribution,
)
from .engine import (
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
    Trajectory,
    classify_limit,
    run_trajectory,
)
from .harness import (
    CltReport,
    EnsembleConfig,
    MissingTheory,
    Tolerances,
    TooFewSamples,
    clt_report,
    compute_theory,
    empirical_covariance,
    ks_critical_value,
    normality_diagnostics,
    run_ensemble,
)
from .config import ConfigError, ExperimentConfig, load_config, parse_config, preset_names

__version__ = "0.1.0"
