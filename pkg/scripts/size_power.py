"""Size or power study for one built-in design.

    python3 scripts/size_power.py --design table1-model1 --reps 500 --B 199
    python3 scripts/size_power.py --design table3-model2 --reps 2000 --B 399 --estimate-only

Writes ``<out>.csv`` with one row per (K, level) and prints the table.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from mixorder.simulation import SimulationConfig, estimate_runtime, simulate


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--design", default="table1-model1")
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--reps", type=int, default=500)
    ap.add_argument("--B", type=int, default=199)
    ap.add_argument("--K", type=int, default=3)
    ap.add_argument("--an", default=None, help="sqrt, one or a number; default from the design")
    ap.add_argument("--stat", default="em", choices=("em", "lrt", "lrt-homo"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default=None)
    ap.add_argument("--estimate-only", action="store_true",
                    help="time a short pilot and print the extrapolated runtime")
    args = ap.parse_args(argv)
    cfg = SimulationConfig(design=args.design, n=args.n, reps=args.reps, B=args.B, K=args.K,
                           a_n=args.an, kind=args.stat, seed=args.seed)
    print(estimate_runtime(cfg, args.jobs).format(), flush=True)
    if args.estimate_only:
        return 0

    def progress(done, total):
        if done % 25 == 0 or done == total:
            print(f"  {done}/{total} replications", flush=True)

    table = simulate(cfg, n_jobs=args.jobs, progress=progress)
    print(table.format())
    out = Path(args.out or f"results/{args.design}_n{args.n}_r{args.reps}_B{args.B}")
    out.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(out.with_suffix(".csv"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
