#!/usr/bin/env python3
"""Sweep the 1/n schedule scale and compare against the averaged limit.

For the scalar problem with Jacobian -L and noise variance sigma^2, the raw
iterate under gamma_n = gamma*/n has limit variance V(gamma*) solving the
fast-schedule equation; rescaled to the sqrt(n) normalization this is
gamma* V(gamma*), minimized at gamma* = 1/L where it equals the averaged
limit sigma^2/L^2.  The sweep makes the ordering visible and optionally
verifies one grid point by Monte Carlo.

    python scripts/gain_sweep.py [--decay-rate L] [--sigma2 S] [--out FILE]
                                 [--mc] [--replicates R] [--horizon N]
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from saclt import (
    EnsembleConfig,
    GaussianNoise,
    LinearField,
    NoTruncation,
    Problem,
    StepSchedule,
    optimal_covariance,
    run_ensemble,
    solve_lyapunov_fast,
)
from saclt.harness import empirical_covariance


def run(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--decay-rate", type=float, default=1.0)
    parser.add_argument("--sigma2", type=float, default=4.0)
    parser.add_argument("--grid-points", type=int, default=60)
    parser.add_argument("--out", default="out/gain_sweep.csv")
    parser.add_argument("--mc", action="store_true", help="verify one point by Monte Carlo")
    parser.add_argument("--replicates", type=int, default=1000)
    parser.add_argument("--horizon", type=int, default=100_000)
    parser.add_argument("--seed", type=int, default=20230710)
    args = parser.parse_args(argv)

    L = args.decay_rate
    A = np.array([[-L]])
    U = np.array([[args.sigma2]])
    grid = np.geomspace(1.001 / (2 * L), 8.0 / L, args.grid_points)
    raw = np.array([solve_lyapunov_fast(A, U, g).matrix[0, 0] for g in grid])
    sqrt_n_scale = grid * raw
    averaged = optimal_covariance(A, U)[0, 0]

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["gamma_star,raw_variance,sqrt_n_variance"]
    for g, v, s in zip(grid, raw, sqrt_n_scale):
        lines.append(f"{g:.17g},{v:.17g},{s:.17g}")
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    best = int(np.argmin(sqrt_n_scale))
    print(f"averaged limit variance     : {averaged:.6g}  (= sigma^2 / L^2)")
    print(
        f"sweep minimum               : {sqrt_n_scale[best]:.6g} at gamma* = {grid[best]:.6g} "
        f"(theory: {1.0 / L:.6g})"
    )
    print(f"wrote {out_path}")

    if args.mc:
        gamma_star = grid[best]
        problem = Problem(
            dim=1,
            mean_field=LinearField(A, [0.0]),
            theta0=[1.0],
            roots=(np.array([0.0]),),
            jacobians=(A,),
            noise_covariances=(U,),
        )
        cfg = EnsembleConfig(
            problem=problem,
            schedule=StepSchedule(float(gamma_star), 1.0),
            noise=GaussianNoise(U),
            policy=NoTruncation(),
            replicates=args.replicates,
            horizon=args.horizon,
            master_seed=args.seed,
            radius=0.5,
        )
        result = run_ensemble(cfg, workers=None)
        emp = empirical_covariance(result.raw_samples(0))[0, 0]
        theory = solve_lyapunov_fast(A, U, float(gamma_star)).matrix[0, 0]
        print(
            f"Monte Carlo at gamma*={gamma_star:.4g}: raw variance {emp:.6g} "
            f"vs theory {theory:.6g} (rel err {abs(emp - theory) / theory:.4f})"
        )
    return 0


if __name__ == "__main__":
    sys.exit(run())
