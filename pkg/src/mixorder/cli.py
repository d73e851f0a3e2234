"""Command line front end.

Subcommands: ``test`` (sequential order test on a CSV), ``simulate`` (size and
power studies of the built-in designs), ``limit`` (quantiles of the limiting
null distribution), ``derivcheck`` (derivative self checks) and
``preprocess-rat`` (log, median-center and average the six expression columns).

Every option can also come from a ``--config`` file of ``key = value`` lines
that starts with ``schema_version = 1``; flags given on the command line win.
Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import asymptotics, mvn
from .bootstrap import DEFAULT_LEVELS, KINDS, bootstrap_test, resolve_jobs
from .em import EMConfig, e_step, fit_mle_homoscedastic, fit_pmle, resolve_a_n
from .emtest import EMTestConfig
from .errors import ArgumentError, DataError, MixOrderError
from .mixture import Dataset, information_criteria, read_csv_table, read_dataset, write_csv
from .simulation import DESIGNS, SimulationConfig, estimate_runtime, get_design, simulate

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

TEST_HEADER = ("M0", "statistic", "p_value", "crit_10", "crit_5", "crit_1", "loglik", "AIC",
               "BIC", "n_failed")
LIMIT_HEADER = ("level", "quantile")
CLUSTER_HEADER = ("row", "cluster", "posterior")


# ---------------------------------------------------------------------------
# argument types


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text}")
    return value


def _probability(text):
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"expected a number in (0, 1), got {text}")
    return value


def _float_list(text):
    try:
        return tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text}") from None


def _name_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _a_n_rule(text):
    try:
        resolve_a_n(text, 100)
    except ArgumentError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


# ---------------------------------------------------------------------------
# parser


def _common_test_options(p, with_m0=True):
    if with_m0:
        p.add_argument("--m0", type=_positive_int, default=None, help="null number of components")
    p.add_argument("--stat", choices=KINDS, default="em", help="test statistic")
    p.add_argument("--B", type=_positive_int, default=199, help="bootstrap replicates")
    p.add_argument("--K", type=_positive_int, default=3, help="EM-test iterations")
    p.add_argument("--tau-set", type=_float_list, default=(0.1, 0.3, 0.5))
    p.add_argument("--an", type=_a_n_rule, default=None, help="sqrt, one or a number")
    p.add_argument("--eps1", type=_probability, default=0.05, help="LRT weight bound")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--jobs", type=int, default=None, help="workers (default MIXORDER_JOBS or 1)")


def _data_options(p, required):
    p.add_argument("--data", required=required, default=None, help="CSV file with a header row")
    p.add_argument("--x-cols", type=_name_list, default=None, help="outcome column names")
    p.add_argument("--z-cols", type=_name_list, default=None, help="covariate column names")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixorder", description=__doc__.split("\n\n")[0])
    parser.add_argument("--config", default=None, help="key = value file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("test", help="sequential test of the number of components")
    _data_options(p, required=False)
    _common_test_options(p, with_m0=False)
    p.add_argument("--max-m", type=_positive_int, default=4, help="largest null order tried")
    p.add_argument("--level", type=_probability, default=0.05, help="stop at the first p > level")
    p.add_argument("--out", default=None, help="report CSV")
    p.add_argument("--clusters", default=None, help="CSV of cluster assignments")

    p = sub.add_parser("simulate", help="size or power study of a built-in design")
    p.add_argument("--design", default="table1-model1", help=f"one of {', '.join(DESIGNS)}")
    p.add_argument("--n", type=_positive_int, default=200)
    p.add_argument("--reps", type=_nonneg_int, default=500)
    _common_test_options(p)
    p.add_argument("--out", default=None, help="result CSV")
    p.add_argument("--estimate-only", action="store_true", help="print the runtime estimate only")

    p = sub.add_parser("limit", help="quantiles of the limiting null distribution")
    _data_options(p, required=False)
    p.add_argument("--design", default=None, help="null design (used when --data is absent)")
    p.add_argument("--m0", type=_positive_int, default=None)
    p.add_argument("--variant", choices=asymptotics.VARIANTS, default="hetero")
    p.add_argument("--draws", type=_positive_int, default=20_000)
    p.add_argument("--n-mc", type=_positive_int, default=100_000)
    p.add_argument("--levels", type=_float_list, default=DEFAULT_LEVELS)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--an", type=_a_n_rule, default="sqrt")
    p.add_argument("--overlay-B", type=_nonneg_int, default=0,
                   help="with --data, also bootstrap the LRT this many times for comparison")
    p.add_argument("--out", default=None, help="quantile CSV")

    p = sub.add_parser("derivcheck", help="derivative identity and vanishing-score checks")
    p.add_argument("--cases", type=_positive_int, default=100)
    p.add_argument("--seed", type=_nonneg_int, default=0)

    p = sub.add_parser("preprocess-rat", help="log, median-center and average the six columns")
    p.add_argument("input", help="CSV with six positive expression columns")
    p.add_argument("--out", required=True, help="output CSV with columns z0, z1")
    return parser


# ---------------------------------------------------------------------------
# config file


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment; needs ``schema_version``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArgumentError(f"{path}:{line_no}: expected key = value")
        key, value = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key in out:
            raise ArgumentError(f"{path}:{line_no}: duplicate key {key!r}")
        out[key] = value
    version = out.pop("schema_version", None)
    if version is None:
        raise ArgumentError(f"{path}: missing schema_version")
    if version != str(SCHEMA_VERSION):
        raise ArgumentError(f"{path}: unsupported schema_version {version}")
    return out


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise AssertionError("parser has no subcommands")


def _apply_config(parser, argv, values: dict):
    """Re-parse ``argv`` with file values as defaults, converting them like flags."""
    first = parser.parse_args(argv)
    sub = _subparser(parser, first.command)
    actions = {a.dest: a for a in sub._actions if a.dest != "help"}
    defaults = {}
    for key, raw in values.items():
        if key not in actions:
            raise ArgumentError(f"unknown config key {key!r} for {first.command}")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise ArgumentError(f"config key {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise ArgumentError(f"config key {key!r} must be one of {list(action.choices)}")
        defaults[key] = value
    sub.set_defaults(**defaults)
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False
    return parser.parse_args(argv)


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        args = _apply_config(parser, argv, read_config(args.config))
    return args


# ---------------------------------------------------------------------------
# commands


def _test_config(args, n: int) -> EMTestConfig:
    rule = args.an if args.an is not None else "sqrt"
    return EMTestConfig(tau_set=args.tau_set, K=args.K, a_n=resolve_a_n(rule, n),
                        em=EMConfig(a_n_rule=rule))


def _load(args) -> Dataset:
    if args.data is None:
        raise ArgumentError("--data is required")
    return read_dataset(args.data, args.x_cols, args.z_cols)


def cmd_test(args, out=sys.stdout) -> int:
    """Test M0 = 1, 2, ... until the first non-rejection or ``--max-m``."""
    data = _load(args)
    config = _test_config(args, data.n)
    jobs = resolve_jobs(args.jobs)
    rows, selected = [], None
    print(f"{'M0':>3} {'stat':>9} {'p':>6} {'crit10':>8} {'crit5':>8} {'crit1':>8} "
          f"{'AIC':>10} {'BIC':>10}", file=out)
    for m0 in range(1, args.max_m + 1):
        res = bootstrap_test(data, m0, args.stat, args.B, config, args.seed, epsilon1=args.eps1,
                             n_jobs=jobs)
        fit = res.null_fit
        aic, bic, _ = information_criteria(fit.params, data, fit.loglik)
        crit = [res.critical_value(lv) for lv in DEFAULT_LEVELS]
        rows.append((m0, res.observed, res.p_value, *crit, fit.loglik, aic, bic, res.n_failed))
        print(f"{m0:>3} {res.observed:>9.3f} {res.p_value:>6.3f} {crit[0]:>8.3f} {crit[1]:>8.3f} "
              f"{crit[2]:>8.3f} {aic:>10.2f} {bic:>10.2f}", file=out)
        if res.p_value > args.level:
            selected = fit
            break
    if selected is None:
        print(f"every null up to M0={args.max_m} rejected at {args.level:g}", file=out)
    else:
        print(f"selected M={selected.params.M} (first p-value above {args.level:g})", file=out)
    if args.out:
        write_csv(args.out, TEST_HEADER, rows)
    if args.clusters and selected is not None:
        post = e_step(selected.params, data)
        write_csv(args.clusters, CLUSTER_HEADER,
                  [(i, int(np.argmax(p)), float(np.max(p))) for i, p in enumerate(post)])
    return EXIT_OK


def cmd_simulate(args, out=sys.stdout) -> int:
    cfg = SimulationConfig(design=args.design, n=args.n, reps=args.reps, B=args.B, kind=args.stat,
                           a_n=args.an, K=args.K, tau_set=args.tau_set, epsilon1=args.eps1,
                           seed=args.seed, M0=args.m0)
    jobs = resolve_jobs(args.jobs)
    if args.estimate_only:
        print(estimate_runtime(cfg, jobs).format(), file=out)
        return EXIT_OK
    table = simulate(cfg, n_jobs=jobs)
    print(table.format(), file=out)
    if args.out:
        table.write_csv(args.out)
    return EXIT_OK


def _limit_null(args):
    """Null parameters, covariate rows and the data (if any) for ``limit``."""
    if args.data is not None:
        data = _load(args)
        if args.m0 is None:
            raise ArgumentError("--m0 is required with --data")
        em = EMConfig(a_n_rule=args.an)
        fit = fit_mle_homoscedastic(data, args.m0, em) if args.variant == "homo" else fit_pmle(
            data, args.m0, em)
        return fit.params, data.z, data
    design = get_design(args.design or "normal-d1")
    params = design.params
    if args.m0 is not None and args.m0 != params.M:
        raise ArgumentError(f"design {design.name} has {params.M} components, not --m0 {args.m0}")
    return params, None, None


def cmd_limit(args, out=sys.stdout) -> int:
    params, z_rows, data = _limit_null(args)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    info_rng, draw_rng = rng.spawn(2)
    system = asymptotics.estimate_information(params, args.n_mc, info_rng, args.variant,
                                              z_rows=z_rows)
    if args.variant == "homo":
        sample = asymptotics.simulate_limit_homo(system, args.draws, draw_rng)
    else:
        sample = asymptotics.simulate_limit_hetero(system, args.draws, draw_rng)
    rows = [(lv, sample.quantile(lv)) for lv in args.levels]
    for lv, q in rows:
        print(f"level {lv:.3f}: {q:.4f}", file=out)
    if args.out:
        write_csv(args.out, LIMIT_HEADER, rows)
    if args.overlay_B and data is not None:
        kind = "lrt-homo" if args.variant == "homo" else "lrt"
        config = EMTestConfig(em=EMConfig(a_n_rule=args.an))
        res = bootstrap_test(data, params.M, kind, args.overlay_B, config, args.seed)
        for lv in args.levels:
            print(f"bootstrap level {lv:.3f}: {res.critical_value(lv):.4f}", file=out)
    return EXIT_OK


def cmd_derivcheck(args, out=sys.stdout) -> int:
    """Analytic derivatives against independent routes, and the split-density checks."""
    failures = 0
    errors = mvn.identity_errors(args.cases, args.seed)
    limits = {"v_vs_direct": 1e-10, "mu_fd": 1e-4, "v_fd": 1e-4}
    for name, err in errors.items():
        ok = err <= limits[name]
        failures += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: max relative error {err:.3e} "
              f"(limit {limits[name]:g})", file=out)
    rng = np.random.default_rng(args.seed)
    from .mixture import MixtureParams

    for d in (1, 2):
        for alpha in (0.3, 0.5):
            sigma = mvn.random_spd(d, rng)
            theta = MixtureParams(np.array([1.0]), rng.standard_normal((1, d)), sigma[None])
            for variant in asymptotics.VARIANTS:
                rep = asymptotics.check_vanishing_scores(theta, alpha, variant)
                worst = max(abs(c.value - c.expected) - c.tol for c in rep.checks)
                failures += not rep.ok
                print(f"{'PASS' if rep.ok else 'FAIL'} split {variant} d={d} alpha={alpha}: "
                      f"{len(rep.checks)} checks, largest vanishing value "
                      f"{rep.max_abs_vanishing():.2e}, worst margin {worst:.2e}", file=out)
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


def preprocess_rat(body: np.ndarray) -> np.ndarray:
    """Log, subtract column medians, then average columns 1-2 and 3-6."""
    body = np.asarray(body, float)
    if body.ndim != 2 or body.shape[1] != 6:
        raise DataError(f"expected 6 expression columns, got shape {body.shape}")
    bad = np.argwhere(~(body > 0))
    if bad.size:
        row, col = (int(t) for t in bad[0])
        raise DataError(f"nonpositive entry {body[row, col]!r} at data row {row + 1}, "
                        f"column {col + 1}; cannot take logs")
    logs = np.log(body)
    centered = logs - np.median(logs, axis=0)
    return np.column_stack([centered[:, :2].mean(axis=1), centered[:, 2:].mean(axis=1)])


def cmd_preprocess_rat(args, out=sys.stdout) -> int:
    _, body = read_csv_table(args.input)
    result = preprocess_rat(body)
    write_csv(args.out, ("z0", "z1"), [tuple(float(v) for v in row) for row in result])
    print(f"wrote {result.shape[0]} rows to {args.out}", file=out)
    return EXIT_OK


COMMANDS = {
    "test": cmd_test,
    "simulate": cmd_simulate,
    "limit": cmd_limit,
    "derivcheck": cmd_derivcheck,
    "preprocess-rat": cmd_preprocess_rat,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except MixOrderError as exc:
        print(f"mixorder: {exc}", file=sys.stderr)
        return exc.exit_code
    try:
        return COMMANDS[args.command](args, sys.stdout)
    except MixOrderError as exc:
        print(f"mixorder: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mixorder: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
