"""Experiment configuration: strict JSON schema, presets, problem assembly.

A configuration file fully determines an experiment; unknown keys are
rejected everywhere so a config cannot silently drift from the schema.
Top-level sections::

    problem         what to solve: "linear" | "double_well" | "markov"
    schedule        {gamma_star, exponent_a, offset}
    truncation      {"kind": "none"} or {"kind": "expanding_balls", r0, growth, center}
    ensemble        {replicates, horizon, master_seed[, checkpoint_grid]}
    classification  {radius}                      (optional, default 0.5)
    tolerances      verdict thresholds            (optional, regime-aware defaults)
    simulate        {seeds[, checkpoint_grid]}    (optional, for the simulate command)
    report          {dump_samples}                (optional)

Problem kinds:

* ``linear``: mean field A (theta - target) with Gaussian noise.
* ``double_well``: scalar theta - theta^3 with Gaussian noise; stable
  roots at -1 and +1.
* ``markov``: a finite-state kernel family ("iid", "two_state_logistic" or
  "custom") driving the noise as a controlled chain, stationary resampling
  ("robbins_monro") or fixed-law i.i.d. draws.  Roots, Jacobians and the
  asymptotic noise covariance are resolved exactly from the family.

Named presets ship with the package (see :func:`preset_names`); anywhere a
config path is accepted, a bare preset name works too.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import markov
from .engine import (
    ControlledMarkovNoise,
    DoubleWellField,
    ExpandingBalls,
    GaussianNoise,
    IIDStateNoise,
    LinearField,
    NoiseSource,
    NoTruncation,
    Problem,
    RobbinsMonroNoise,
    TruncationPolicy,
)
from .harness import EnsembleConfig, Tolerances
from .schedules import StepSchedule

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "preset_names",
    "preset_text",
]


class ConfigError(ValueError):
    """The configuration is malformed or violates a module precondition."""


def _require_mapping(obj, where: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object, got {type(obj).__name__}")
    return obj


def _take(data: dict, where: str, required: tuple, optional: tuple = ()) -> dict:
    unknown = set(data) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    missing = [k for k in required if k not in data]
    if missing:
        raise ConfigError(f"missing key(s) in {where}: {missing}")
    return data


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    return float(value)


def _integer(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    return value


def _boolean(value, where: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{where} must be a boolean, got {value!r}")
    return value


def _vector(value, where: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where} must be a flat list of numbers: {exc}") from exc
    if arr.ndim != 1:
        raise ConfigError(f"{where} must be a flat list of numbers")
    return arr


def _matrix(value, where: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where} must be a nested (row-major) list of numbers: {exc}") from exc
    if arr.ndim != 2:
        raise ConfigError(f"{where} must be a nested (row-major) list of numbers")
    return arr


def _parse_gaussian_noise(data, where: str, dim: int) -> GaussianNoise:
    data = _require_mapping(data, where)
    _take(data, where, ("kind",), ("covariance", "sigma2"))
    if data["kind"] != "gaussian":
        raise ConfigError(f"{where}.kind must be 'gaussian', got {data['kind']!r}")
    if ("covariance" in data) == ("sigma2" in data):
        raise ConfigError(f"{where} needs exactly one of 'covariance' or 'sigma2'")
    if "sigma2" in data:
        sigma2 = _number(data["sigma2"], f"{where}.sigma2")
        if sigma2 < 0:
            raise ConfigError(f"{where}.sigma2 must be non-negative")
        cov = sigma2 * np.eye(dim)
    else:
        cov = _matrix(data["covariance"], f"{where}.covariance")
        if cov.shape != (dim, dim):
            raise ConfigError(f"{where}.covariance must be {dim}x{dim}, got {cov.shape}")
    try:
        return GaussianNoise(cov)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_family(data, where: str) -> markov.KernelFamily:
    data = _require_mapping(data, where)
    name = data.get("name")
    try:
        if name == "iid":
            _take(data, where, ("name", "distribution", "values"))
            return markov.IIDFamily(
                distribution=_vector(data["distribution"], f"{where}.distribution"),
                values=np.asarray(data["values"], dtype=np.float64),
            )
        if name == "two_state_logistic":
            _take(data, where, ("name",), ("epsilon", "values"))
            return markov.TwoStateLogisticFamily(
                epsilon=_number(data.get("epsilon", 0.1), f"{where}.epsilon"),
                values=_vector(data.get("values", [0.0, 1.0]), f"{where}.values"),
            )
        if name == "custom":
            _take(data, where, ("name", "kernel", "values"))
            return markov.TableFamily(
                transition=_matrix(data["kernel"], f"{where}.kernel"),
                values=np.asarray(data["values"], dtype=np.float64),
            )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(
        f"{where}.name must be one of 'iid', 'two_state_logistic', 'custom', got {name!r}"
    )


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully validated experiment; ``raw`` echoes the source dictionary."""

    raw: dict
    problem: Problem
    noise: NoiseSource
    policy: TruncationPolicy
    schedule: StepSchedule
    replicates: int
    horizon: int
    master_seed: int
    checkpoint_grid: Optional[tuple]
    radius: float
    tolerances: Tolerances
    simulate_seeds: tuple
    simulate_grid: Optional[tuple]
    dump_samples: bool
    problem_kind: str

    def ensemble_config(self, master_seed: Optional[int] = None) -> EnsembleConfig:
        return EnsembleConfig(
            problem=self.problem,
            schedule=self.schedule,
            noise=self.noise,
            policy=self.policy,
            replicates=self.replicates,
            horizon=self.horizon,
            master_seed=self.master_seed if master_seed is None else master_seed,
            radius=self.radius,
        )


def _build_linear(data: dict):
    _take(data, "problem", ("kind", "jacobian", "target", "noise", "theta0"))
    A = _matrix(data["jacobian"], "problem.jacobian")
    target = _vector(data["target"], "problem.target")
    d = target.shape[0]
    if A.shape != (d, d):
        raise ConfigError(f"problem.jacobian must be {d}x{d}, got {A.shape}")
    theta0 = _vector(data["theta0"], "problem.theta0")
    if theta0.shape != (d,):
        raise ConfigError(f"problem.theta0 must have length {d}")
    noise = _parse_gaussian_noise(data["noise"], "problem.noise", d)
    problem = Problem(
        dim=d,
        mean_field=LinearField(A, target),
        theta0=theta0,
        roots=(target,),
        jacobians=(A,),
        noise_covariances=(noise.covariance,),
    )
    return problem, noise


def _build_double_well(data: dict):
    _take(data, "problem", ("kind", "noise", "theta0"))
    theta0 = _vector(data["theta0"], "problem.theta0")
    if theta0.shape != (1,):
        raise ConfigError("problem.theta0 must have length 1 for the double well")
    noise = _parse_gaussian_noise(data["noise"], "problem.noise", 1)
    jac = np.array([[-2.0]])
    problem = Problem(
        dim=1,
        mean_field=DoubleWellField(),
        theta0=theta0,
        roots=(np.array([-1.0]), np.array([1.0])),
        jacobians=(jac, jac),
        noise_covariances=(noise.covariance, noise.covariance),
    )
    return problem, noise


def _build_markov(data: dict):
    _take(
        data,
        "problem",
        ("kind", "family", "dynamics", "theta0"),
        ("chain_start", "root_bracket"),
    )
    family = _parse_family(data["family"], "problem.family")
    theta0 = _vector(data["theta0"], "problem.theta0")
    if theta0.shape != (family.dim,):
        raise ConfigError(f"problem.theta0 must have length {family.dim}")
    dynamics = data["dynamics"]
    chain_start = _integer(data.get("chain_start", 0), "problem.chain_start")
    try:
        if dynamics == "controlled":
            noise = ControlledMarkovNoise(family, start_state=chain_start)
        elif dynamics == "robbins_monro":
            noise = RobbinsMonroNoise(family)
        elif dynamics == "iid":
            if not family.theta_independent_kernel:
                raise ConfigError(
                    "problem.dynamics 'iid' needs a theta-independent kernel family"
                )
            pi = markov.stationary_distribution(family.kernel(np.zeros(family.dim)))
            noise = IIDStateNoise(family, pi)
        else:
            raise ConfigError(
                "problem.dynamics must be 'controlled', 'robbins_monro' or 'iid', "
                f"got {dynamics!r}"
            )
    except (ValueError, markov.NonErgodic) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"problem: {exc}") from exc

    # locate the root exactly: theta-independent kernels give it in closed
    # form, otherwise a bracketed scalar search on the exact mean field
    if family.theta_independent_kernel:
        pi = markov.stationary_distribution(family.kernel(np.zeros(family.dim)))
        root = pi @ family.values
    else:
        if family.dim != 1:
            raise ConfigError("theta-dependent kernels support scalar theta only")
        bracket = _vector(data.get("root_bracket", [-100.0, 100.0]), "problem.root_bracket")
        if bracket.shape != (2,):
            raise ConfigError("problem.root_bracket must hold two numbers")
        try:
            root = np.array([markov.find_scalar_root(family, bracket[0], bracket[1])])
        except ValueError as exc:
            raise ConfigError(f"problem.root_bracket: {exc}") from exc
    jac = markov.mean_field_jacobian(family, root)
    # the limiting noise covariance depends on the dynamics: a controlled
    # chain carries serial correlation (Poisson correction), while fresh
    # per-step draws do not
    if dynamics == "controlled":
        U = markov.noise_covariance(family, root)
    elif dynamics == "robbins_monro":
        U = markov.resampled_noise_covariance(family, root)
    else:
        U = markov.resampled_noise_covariance(family, root, distribution=noise.distribution)
    problem = Problem(
        dim=family.dim,
        mean_field=markov.FamilyMeanField(family),
        theta0=theta0,
        roots=(np.asarray(root, dtype=np.float64),),
        jacobians=(jac,),
        noise_covariances=(U,),
    )
    return problem, noise


def _parse_truncation(data, theta0: np.ndarray) -> TruncationPolicy:
    if data is None:
        return NoTruncation()
    data = _require_mapping(data, "truncation")
    kind = data.get("kind")
    if kind == "none":
        _take(data, "truncation", ("kind",))
        return NoTruncation()
    if kind == "expanding_balls":
        _take(data, "truncation", ("kind", "r0", "growth", "center"))
        center = _vector(data["center"], "truncation.center")
        if center.shape != theta0.shape:
            raise ConfigError("truncation.center must match theta0 in length")
        try:
            policy = ExpandingBalls(
                r0=_number(data["r0"], "truncation.r0"),
                growth=_number(data["growth"], "truncation.growth"),
                center=center,
                reset_point=theta0,
            )
        except ValueError as exc:
            raise ConfigError(f"truncation: {exc}") from exc
        if not policy.contains(0, theta0):
            raise ConfigError("theta0 must lie inside the initial truncation ball")
        return policy
    raise ConfigError(f"truncation.kind must be 'none' or 'expanding_balls', got {kind!r}")


def _parse_tolerances(data, defaults: Tolerances) -> Tolerances:
    if data is None:
        return defaults
    data = _require_mapping(data, "tolerances")
    _take(
        data,
        "tolerances",
        (),
        (
            "raw_rel_error",
            "avg_rel_error",
            "ks_alpha",
            "min_samples",
            "check_raw",
            "check_avg",
            "check_normality",
            "max_failure_rate",
            "max_unclassified_rate",
            "target_share_range",
            "max_late_truncation_fraction",
            "normality_statistic",
        ),
    )
    kwargs = {}
    for key in ("raw_rel_error", "avg_rel_error", "ks_alpha", "max_failure_rate"):
        if key in data:
            kwargs[key] = _number(data[key], f"tolerances.{key}")
    if "min_samples" in data:
        kwargs["min_samples"] = _integer(data["min_samples"], "tolerances.min_samples")
    for key in ("check_raw", "check_avg", "check_normality"):
        if key in data:
            kwargs[key] = _boolean(data[key], f"tolerances.{key}")
    if "max_unclassified_rate" in data and data["max_unclassified_rate"] is not None:
        kwargs["max_unclassified_rate"] = _number(
            data["max_unclassified_rate"], "tolerances.max_unclassified_rate"
        )
    if "target_share_range" in data and data["target_share_range"] is not None:
        rng = _vector(data["target_share_range"], "tolerances.target_share_range")
        if rng.shape != (2,) or not 0 <= rng[0] <= rng[1] <= 1:
            raise ConfigError("tolerances.target_share_range must be [lo, hi] within [0, 1]")
        kwargs["target_share_range"] = (float(rng[0]), float(rng[1]))
    if (
        "max_late_truncation_fraction" in data
        and data["max_late_truncation_fraction"] is not None
    ):
        kwargs["max_late_truncation_fraction"] = _number(
            data["max_late_truncation_fraction"], "tolerances.max_late_truncation_fraction"
        )
    if "normality_statistic" in data:
        if not isinstance(data["normality_statistic"], str):
            raise ConfigError("tolerances.normality_statistic must be a string")
        kwargs["normality_statistic"] = data["normality_statistic"]
    try:
        return dataclasses.replace(defaults, **kwargs)
    except ValueError as exc:
        raise ConfigError(f"tolerances: {exc}") from exc


def _parse_grid(value, where: str, horizon: int) -> Optional[tuple]:
    if value is None:
        return None
    if not isinstance(value, list) or not all(
        isinstance(v, int) and not isinstance(v, bool) for v in value
    ):
        raise ConfigError(f"{where} must be a list of integers")
    grid = tuple(value)
    if any(v < 1 or v > horizon for v in grid):
        raise ConfigError(f"{where} entries must lie in [1, {horizon}]")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError(f"{where} must be strictly increasing")
    return grid


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a configuration dictionary and assemble the experiment."""
    data = _require_mapping(data, "config")
    _take(
        data,
        "config",
        ("problem", "schedule", "ensemble"),
        ("truncation", "classification", "tolerances", "simulate", "report"),
    )

    problem_data = _require_mapping(data["problem"], "problem")
    kind = problem_data.get("kind")
    if kind == "linear":
        problem, noise = _build_linear(problem_data)
    elif kind == "double_well":
        problem, noise = _build_double_well(problem_data)
    elif kind == "markov":
        problem, noise = _build_markov(problem_data)
    else:
        raise ConfigError(
            f"problem.kind must be 'linear', 'double_well' or 'markov', got {kind!r}"
        )

    sched_data = _require_mapping(data["schedule"], "schedule")
    _take(sched_data, "schedule", ("gamma_star", "exponent_a"), ("offset",))
    try:
        schedule = StepSchedule(
            gamma_star=_number(sched_data["gamma_star"], "schedule.gamma_star"),
            exponent_a=_number(sched_data["exponent_a"], "schedule.exponent_a"),
            offset=_integer(sched_data.get("offset", 0), "schedule.offset"),
        )
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from exc

    ens = _require_mapping(data["ensemble"], "ensemble")
    _take(ens, "ensemble", ("replicates", "horizon", "master_seed"), ("checkpoint_grid",))
    replicates = _integer(ens["replicates"], "ensemble.replicates")
    horizon = _integer(ens["horizon"], "ensemble.horizon")
    master_seed = _integer(ens["master_seed"], "ensemble.master_seed")
    if replicates < 1 or horizon < 1:
        raise ConfigError("ensemble.replicates and ensemble.horizon must be >= 1")
    if not 0 <= master_seed < 2**64:
        raise ConfigError("ensemble.master_seed must fit in 64 bits")
    checkpoint_grid = _parse_grid(ens.get("checkpoint_grid"), "ensemble.checkpoint_grid", horizon)

    policy = _parse_truncation(data.get("truncation"), problem.theta0)

    radius = 0.5
    if data.get("classification") is not None:
        cls = _require_mapping(data["classification"], "classification")
        _take(cls, "classification", ("radius",))
        radius = _number(cls["radius"], "classification.radius")
        if not radius > 0:
            raise ConfigError("classification.radius must be positive")

    slow_defaults = kind != "markov" and schedule.exponent_a < 1.0
    base = Tolerances() if slow_defaults else Tolerances(raw_rel_error=0.15, avg_rel_error=0.15)
    tolerances = _parse_tolerances(data.get("tolerances"), base)

    simulate_seeds: tuple = (master_seed,)
    simulate_grid = None
    if data.get("simulate") is not None:
        sim = _require_mapping(data["simulate"], "simulate")
        _take(sim, "simulate", (), ("seeds", "checkpoint_grid"))
        if "seeds" in sim:
            if not isinstance(sim["seeds"], list) or not all(
                isinstance(s, int) and not isinstance(s, bool) for s in sim["seeds"]
            ):
                raise ConfigError("simulate.seeds must be a list of integers")
            simulate_seeds = tuple(sim["seeds"])
        simulate_grid = _parse_grid(sim.get("checkpoint_grid"), "simulate.checkpoint_grid", horizon)

    dump_samples = False
    if data.get("report") is not None:
        rep = _require_mapping(data["report"], "report")
        _take(rep, "report", (), ("dump_samples",))
        dump_samples = _boolean(rep.get("dump_samples", False), "report.dump_samples")

    cfg = ExperimentConfig(
        raw=data,
        problem=problem,
        noise=noise,
        policy=policy,
        schedule=schedule,
        replicates=replicates,
        horizon=horizon,
        master_seed=master_seed,
        checkpoint_grid=checkpoint_grid,
        radius=radius,
        tolerances=tolerances,
        simulate_seeds=simulate_seeds,
        simulate_grid=simulate_grid,
        dump_samples=dump_samples,
        problem_kind=kind,
    )
    try:
        cfg.ensemble_config()  # exercises the harness-level invariants early
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def preset_names() -> tuple:
    files = resources.files("saclt").joinpath("presets")
    return tuple(sorted(p.name[: -len(".json")] for p in files.iterdir() if p.name.endswith(".json")))


def preset_text(name: str) -> str:
    path = resources.files("saclt").joinpath("presets").joinpath(f"{name}.json")
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {list(preset_names())}")
    return path.read_text(encoding="utf-8")


def load_config(path_or_name) -> ExperimentConfig:
    """Load a config from a JSON file path, or by bundled preset name."""
    path = Path(path_or_name)
    if path.is_file():
        text = path.read_text(encoding="utf-8")
    else:
        text = preset_text(str(path_or_name))
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path_or_name}: {exc}") from exc
    return parse_config(data)
