"""Config-driven command-line front end.

Commands::

    saclt conditions --config CFG            check the limit-theory hypotheses
    saclt lyapunov   --config CFG [--out D]  solve the theoretical covariances
    saclt simulate   --config CFG [--out D]  write trajectory checkpoint CSVs
    saclt clt-check  --config CFG [--out D]  full pipeline: ensemble -> report
    saclt poisson    --config CFG [--out D]  dump the kernel-family quantities

``--config`` accepts a JSON file path or a bundled preset name
(see ``saclt.config.preset_names``).  Exit codes: 0 success / all checks
pass, 1 a requested condition or verdict failed, 2 configuration or runtime
error.  Reports are written as JSON (stable key order, full precision) plus
an aligned-column text rendering; no command mutates its input config.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import markov
from .config import ConfigError, ExperimentConfig, load_config, preset_names
from .harness import clt_report, compute_theory, run_ensemble
from .schedules import RegimeTag, check_averaging_condition, classify_sa_regime
from .spectral import (
    NotHurwitz,
    RegimeViolation,
    SingularSystem,
    hurwitz_info,
    optimal_gain,
    scaled_optimal_covariance,
)
from .engine import run_trajectory

__all__ = ["main", "console_main"]


def _json_text(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _listify(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def _write(out_dir: Path, name: str, text: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(text, encoding="utf-8")
    return path


def _fmt17(x: float) -> str:
    return f"{float(x):.17g}"


def cmd_conditions(cfg: ExperimentConfig) -> int:
    lines = []
    ok = True
    for i, (root, A) in enumerate(zip(cfg.problem.roots, cfg.problem.jacobians)):
        try:
            info = hurwitz_info(A)
        except NotHurwitz as exc:
            print(f"root {i}: not Hurwitz ({exc})", file=sys.stderr)
            return 1
        regime = classify_sa_regime(cfg.schedule, info.decay_rate)
        eigs = ", ".join(f"{z.real:+.6g}{z.imag:+.6g}j" for z in info.eigenvalues)
        lines.append(f"root {i}: theta*={_listify(root)} L={info.decay_rate:.12g} eig=[{eigs}]")
        lines.append(f"root {i}: regime={regime.tag.value} ({regime.reason})")
        if cfg.schedule.exponent_a == 1.0:
            bound = 1.0 / (2.0 * info.decay_rate)
            holds = cfg.schedule.gamma_star > bound
            lines.append(
                f"root {i}: fast-rate bound gamma_star > 1/(2L): "
                f"{cfg.schedule.gamma_star:.6g} > {bound:.6g} -> {holds}"
            )
        if cfg.tolerances.check_raw and regime.tag is RegimeTag.INVALID:
            ok = False
        if cfg.tolerances.check_avg and regime.tag is not RegimeTag.SLOW:
            ok = False

    diag = check_averaging_condition(cfg.schedule, max(1000, min(cfg.horizon, 10**6)))
    lines.append(
        f"averaging condition: analytic={diag.analytic_ok} "
        f"ratio_sum[{diag.checkpoints[-1]}]={diag.ratio_sums[-1]:.6g} "
        f"step_sum[{diag.checkpoints[-1]}]={diag.step_sums[-1]:.6g}"
    )
    if cfg.tolerances.check_avg and not diag.analytic_ok:
        ok = False
    checked = []
    if cfg.tolerances.check_raw:
        checked.append("raw-scale limit")
    if cfg.tolerances.check_avg:
        checked.append("averaged limit")
    lines.append(f"checked hypotheses: {', '.join(checked) if checked else 'none'}")
    lines.append(f"conditions: {'pass' if ok else 'FAIL'}")
    print("\n".join(lines))
    return 0 if ok else 1


def _theory_payload(cfg: ExperimentConfig) -> dict:
    targets = []
    for i, th in enumerate(compute_theory(cfg.problem, cfg.schedule)):
        entry = {
            "index": i,
            "root": _listify(th.root),
            "jacobian": _listify(th.jacobian),
            "decay_rate": th.decay_rate,
            "noise_covariance": _listify(th.noise_covariance),
            "regime": th.regime.value,
            "raw": _listify(th.raw.matrix) if th.raw is not None else None,
            "raw_residual": th.raw.residual_norm if th.raw is not None else None,
            "averaged": _listify(th.averaged),
            "optimal_gain": _listify(optimal_gain(th.jacobian, cfg.schedule.gamma_star)),
            "optimal_covariance_scaled": _listify(
                scaled_optimal_covariance(
                    th.jacobian, th.noise_covariance, cfg.schedule.gamma_star
                )
            ),
        }
        targets.append(entry)
    return {"schedule": cfg.schedule.to_dict(), "targets": targets}


def cmd_lyapunov(cfg: ExperimentConfig, out_dir: Path) -> int:
    try:
        payload = _theory_payload(cfg)
    except (NotHurwitz, SingularSystem, RegimeViolation) as exc:
        print(f"spectral error: {exc}", file=sys.stderr)
        return 2
    path = _write(out_dir, "theory.json", _json_text(payload))
    for entry in payload["targets"]:
        raw = entry["raw"]
        print(
            f"root {entry['index']}: regime={entry['regime']} "
            f"raw={raw} averaged={entry['averaged']}"
        )
    print(f"wrote {path}")
    return 0


def _trajectory_csv(traj, dim: int) -> str:
    cols = ["n"]
    cols += [f"theta_{i}" for i in range(dim)]
    cols += [f"theta_bar_{i}" for i in range(dim)]
    cols.append("sigma")
    rows = [",".join(cols)]
    for cp in traj.checkpoints:
        cells = [str(cp.n)]
        cells += [_fmt17(v) for v in cp.theta]
        cells += [_fmt17(v) for v in cp.theta_bar]
        cells.append(str(cp.sigma))
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"


def _default_sim_grid(horizon: int) -> tuple:
    pts = np.unique(np.append(np.geomspace(1, horizon, num=200).astype(np.int64), horizon))
    return tuple(int(p) for p in pts)


def cmd_simulate(cfg: ExperimentConfig, out_dir: Path, seed_override: Optional[int]) -> int:
    seeds = (seed_override,) if seed_override is not None else cfg.simulate_seeds
    grid = cfg.simulate_grid or cfg.checkpoint_grid or _default_sim_grid(cfg.horizon)
    for seed in seeds:
        traj = run_trajectory(
            cfg.problem, cfg.schedule, cfg.noise, cfg.policy, cfg.horizon, seed, grid
        )
        path = _write(out_dir, f"trajectory_{seed}.csv", _trajectory_csv(traj, cfg.problem.dim))
        print(f"wrote {path}")
    return 0


def _samples_csv(result) -> str:
    d = result.raw_scaled.shape[1]
    cols = ["replicate", "target"]
    cols += [f"Z_{i}" for i in range(d)]
    cols += [f"W_{i}" for i in range(d)]
    rows = [",".join(cols)]
    for r in range(result.replicates):
        cells = [str(r), str(int(result.target_index[r]))]
        cells += [_fmt17(v) for v in result.raw_scaled[r]]
        cells += [_fmt17(v) for v in result.avg_scaled[r]]
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"


def cmd_clt_check(
    cfg: ExperimentConfig,
    out_dir: Path,
    workers: Optional[int],
    seed_override: Optional[int],
) -> int:
    ensemble_cfg = cfg.ensemble_config(master_seed=seed_override)
    try:
        theory = compute_theory(cfg.problem, cfg.schedule)
    except (NotHurwitz, SingularSystem, RegimeViolation) as exc:
        print(f"spectral error: {exc}", file=sys.stderr)
        return 2
    # workers=None resolves to the available core count; results are
    # worker-count invariant by construction
    result = run_ensemble(ensemble_cfg, workers=workers)
    report = clt_report(result, theory, cfg.tolerances)
    payload = report.to_dict()
    payload["config"] = cfg.raw
    _write(out_dir, "report.json", _json_text(payload))
    text = report.to_text()
    _write(out_dir, "report.txt", text + "\n")
    if cfg.dump_samples:
        _write(out_dir, "samples.csv", _samples_csv(result))
    print(text)
    return 0 if report.overall_pass else 1


def cmd_poisson(cfg: ExperimentConfig, out_dir: Path, theta_arg: Optional[str]) -> int:
    if cfg.problem_kind != "markov":
        print("poisson requires a markov problem", file=sys.stderr)
        return 2
    family = cfg.noise.family
    if theta_arg is not None:
        theta = np.array([float(v) for v in theta_arg.split(",")], dtype=np.float64)
        if theta.shape != (family.dim,):
            print(f"--theta must have {family.dim} component(s)", file=sys.stderr)
            return 2
    else:
        theta = cfg.problem.roots[0]
    try:
        Q = family.kernel(theta)
        sol = markov.poisson_solve(Q, family.observation_table(theta))
        U = markov.noise_covariance(family, theta)
    except (markov.NonErgodic, markov.SingularFundamental) as exc:
        print(f"markov error: {exc}", file=sys.stderr)
        return 2
    payload = {
        "theta": _listify(theta),
        "pi": _listify(sol.pi),
        "mean_field": _listify(sol.mean),
        "g_hat": _listify(sol.g_hat),
        "q_g_hat": _listify(sol.q_g_hat),
        "noise_covariance": _listify(U),
    }
    path = _write(out_dir, "poisson.json", _json_text(payload))
    print(_json_text(payload), end="")
    print(f"wrote {path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saclt",
        description="Stochastic-approximation CLT verification harness",
        epilog=f"bundled presets: {', '.join(preset_names())}",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("conditions", "lyapunov", "simulate", "clt-check", "poisson"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="config file path or preset name")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--workers", type=int, default=None, help="worker processes")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        if name == "poisson":
            p.add_argument("--theta", default=None, help="comma-separated evaluation point")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(args.out)
    try:
        if args.command == "conditions":
            return cmd_conditions(cfg)
        if args.command == "lyapunov":
            return cmd_lyapunov(cfg, out_dir)
        if args.command == "simulate":
            return cmd_simulate(cfg, out_dir, args.seed)
        if args.command == "clt-check":
            return cmd_clt_check(cfg, out_dir, args.workers, args.seed)
        if args.command == "poisson":
            return cmd_poisson(cfg, out_dir, args.theta)
    except Exception as exc:  # surface runtime failures as exit 2, not tracebacks
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    raise AssertionError("unreachable")


def console_main() -> None:
    sys.exit(main())
