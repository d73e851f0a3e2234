"""Upper quantiles of the limiting null distribution for a built-in design.

    python3 scripts/limit_quantiles.py --design normal-d1
    python3 scripts/limit_quantiles.py --design table1-model1 --variant homo --draws 50000

For the univariate one-component null the chi-square(2) quantiles are
printed alongside as a reference.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from mixorder import asymptotics
from mixorder.mixture import write_csv
from mixorder.simulation import get_design

LEVELS = (0.10, 0.05, 0.01)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--design", default="normal-d1")
    ap.add_argument("--variant", choices=asymptotics.VARIANTS, default="hetero")
    ap.add_argument("--n-mc", type=int, default=100_000, help="draws for the information matrix")
    ap.add_argument("--draws", type=int, default=20_000, help="draws from the limit")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)

    params = get_design(args.design).params
    info_rng, draw_rng = np.random.default_rng(args.seed).spawn(2)
    system = asymptotics.estimate_information(params, args.n_mc, info_rng, args.variant)
    simulate = (asymptotics.simulate_limit_homo if args.variant == "homo"
                else asymptotics.simulate_limit_hetero)
    sample = simulate(system, args.draws, draw_rng)
    reference = params.d == 1 and params.M == 1 and args.variant == "hetero"
    rows = []
    for lv in LEVELS:
        q = sample.quantile(lv)
        line = f"level {lv:.2f}: {q:.4f}"
        if reference:
            line += f"   chi2(2): {stats.chi2(2).ppf(1 - lv):.4f}"
        print(line)
        rows.append((lv, q))
    if reference:
        ks = stats.kstest(sample.values, stats.chi2(2).cdf).statistic
        print(f"KS distance to chi2(2): {ks:.4f}")
    out = Path(args.out or f"results/limit_{args.design}_{args.variant}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, ("level", "quantile"), rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
