"""Run the replicate-study grid and write per-cell reports.

Covers both outcome kinds, the three effect scenarios, and both
randomization designs with the four-estimator roster. Desk-scale by
default; raise --replicates for tighter Monte Carlo error.
"""

from __future__ import annotations

import argparse
import os
import sys

from adaptive_tmle.cli import cmd_simulate
from adaptive_tmle.config import RunConfig


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--replicates", type=int, default=200)
    parser.add_argument("--seed", type=int, default=20260816)
    parser.add_argument("--workers", type=int, default=max(1, (os.cpu_count() or 1) - 1))
    parser.add_argument("--outdir", default="results/grid")
    parser.add_argument("--null", action="store_true", help="run the exact-null variant of every cell")
    args = parser.parse_args()

    for outcome_kind in ("binary", "continuous"):
        for scenario in ("linear", "interactive", "polynomial", "treatment_only"):
            for design in ("simple", "stratified"):
                cell_dir = os.path.join(args.outdir, f"{outcome_kind}_{scenario}_{design}")
                config = RunConfig(
                    command="simulate",
                    outcome_kind=(outcome_kind,),
                    scenario=(scenario,),
                    n=(500,),
                    design=(design,),
                    null_effect=args.null or scenario == "treatment_only",
                    replicates=args.replicates,
                    seed=args.seed,
                    workers=args.workers,
                    outdir=cell_dir,
                )
                paths = cmd_simulate(config)
                print(f"{outcome_kind}/{scenario}/{design}: {paths['metrics.csv']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
