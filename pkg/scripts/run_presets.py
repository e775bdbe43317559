#!/usr/bin/env python3
"""Run conditions, lyapunov and clt-check for every bundled preset.

Writes per-preset artifacts under --out and prints a summary table with the
three exit codes.  Exits non-zero if any preset fails any stage.

    python scripts/run_presets.py [--out out/presets] [--workers N]
"""

import argparse
import sys
from pathlib import Path

from saclt.cli import main as cli_main
from saclt.config import preset_names


def run(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/presets")
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--presets", nargs="*", default=None)
    args = parser.parse_args(argv)

    names = args.presets or list(preset_names())
    rows = []
    for name in names:
        out_dir = Path(args.out) / name
        codes = {}
        codes["conditions"] = cli_main(["conditions", "--config", name])
        codes["lyapunov"] = cli_main(["lyapunov", "--config", name, "--out", str(out_dir)])
        clt_args = ["clt-check", "--config", name, "--out", str(out_dir)]
        if args.workers is not None:
            clt_args += ["--workers", str(args.workers)]
        codes["clt-check"] = cli_main(clt_args)
        rows.append((name, codes))

    print()
    print(f"{'preset':<20} {'conditions':>10} {'lyapunov':>9} {'clt-check':>10}")
    worst = 0
    for name, codes in rows:
        print(
            f"{name:<20} {codes['conditions']:>10} {codes['lyapunov']:>9} "
            f"{codes['clt-check']:>10}"
        )
        worst = max(worst, *codes.values())
    return worst


if __name__ == "__main__":
    sys.exit(run())
