"""Built-in simulation designs and the size/power Monte Carlo harness."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bootstrap import DEFAULT_LEVELS, KINDS, bootstrap_test_all_k, resolve_jobs
from .em import EMConfig, resolve_a_n
from .emtest import EMTestConfig
from .errors import ArgumentError, MixOrderError
from .mixture import MixtureParams, sample, write_csv

_I2 = np.eye(2)


@dataclass(frozen=True)
class Design:
    """A data-generating model and the null order it is tested against."""

    name: str
    params: MixtureParams
    M0: int
    a_n: str
    note: str = ""

    @property
    def under_null(self) -> bool:
        return self.params.M == self.M0


def _params(alphas, mus, sigmas):
    return MixtureParams(np.array(alphas, float), np.array(mus, float), np.array(sigmas, float))


DESIGNS = {
    d.name: d
    for d in (
        Design("table1-model1", _params([1.0], [[0, 0]], [_I2]), 1, "sqrt", "size, M0=1"),
        Design("table1-model2", _params([1.0], [[0, 0]], [[[1, 0.5], [0.5, 1]]]), 1, "sqrt",
               "size, M0=1, correlated"),
        Design("table2-model1", _params([0.3, 0.7], [[-0.5, -0.5], [0.5, 0.5]], [_I2, _I2]), 1,
               "one", "power, M0=1"),
        Design("table2-model2", _params([0.3, 0.7], [[-1, -1], [1, 1]], [_I2, _I2]), 1, "one",
               "power, M0=1"),
        Design("table2-model3", _params([0.3, 0.7], [[-0.5, -0.5], [0.5, 0.5]], [2 * _I2, _I2]), 1,
               "one", "power, M0=1, unequal covariances"),
        Design("table4-model1", _params([0.7, 0.3], [[-1, -1], [1, 1]], [_I2, _I2]), 2, "one",
               "size, M0=2"),
        Design("table4-model2", _params([0.7, 0.3], [[-2, -2], [2, 2]], [_I2, _I2]), 2, "one",
               "size, M0=2, separated"),
        Design("table5-model1", _params([0.35, 0.35, 0.3], [[-2, -2], [0, 0], [2, 2]],
                                        [_I2, _I2, _I2]), 2, "one", "power, M0=2"),
        Design("table5-model2", _params([0.35, 0.35, 0.3], [[-2, -2], [0, 0], [2, 2]],
                                        [0.5 * _I2, _I2, 2 * _I2]), 2, "one",
               "power, M0=2, unequal covariances"),
        Design("normal-d1", _params([1.0], [[0.0]], [[[1.0]]]), 1, "sqrt",
               "univariate standard normal, for limit checks"),
    )
}
# result tables named after the parameter tables they use
ALIASES = {
    "table3-model1": "table2-model1",
    "table3-model2": "table2-model2",
    "table3-model3": "table2-model3",
    "table6-model1": "table5-model1",
    "table6-model2": "table5-model2",
}


def get_design(name: str) -> Design:
    key = ALIASES.get(name.strip().lower(), name.strip().lower())
    if key not in DESIGNS:
        known = ", ".join(sorted(DESIGNS) + sorted(ALIASES))
        raise ArgumentError(f"unknown design {name!r}; known designs: {known}")
    return DESIGNS[key]


@dataclass(frozen=True)
class SimulationConfig:
    """Knobs of a size/power study. Full scale is reps=2000, B=399."""

    design: str = "table1-model1"
    n: int = 200
    reps: int = 500
    B: int = 199
    kind: str = "em"
    a_n: str | float | None = None
    K: int = 3
    tau_set: tuple[float, ...] = (0.1, 0.3, 0.5)
    epsilon1: float = 0.05
    levels: tuple[float, ...] = DEFAULT_LEVELS
    seed: int = 0
    M0: int | None = None

    def __post_init__(self):
        get_design(self.design)
        if self.n < 2 or self.reps < 0 or self.B < 1:
            raise ArgumentError("need n >= 2, reps >= 0 and B >= 1")
        if self.kind not in KINDS:
            raise ArgumentError(f"unknown statistic {self.kind!r}; choose from {', '.join(KINDS)}")
        if any(not 0 < lv < 1 for lv in self.levels):
            raise ArgumentError("levels must lie in (0, 1)")

    @property
    def resolved_design(self) -> Design:
        return get_design(self.design)

    @property
    def m0(self) -> int:
        return self.M0 if self.M0 is not None else self.resolved_design.M0

    def test_config(self) -> EMTestConfig:
        rule = self.a_n if self.a_n is not None else self.resolved_design.a_n
        rule_value = rule if isinstance(rule, str) else float(rule)
        return EMTestConfig(tau_set=self.tau_set, K=self.K, a_n=resolve_a_n(rule_value, self.n),
                            em=EMConfig(a_n_rule=rule_value))


@dataclass(frozen=True)
class SimulationTable:
    """Rejection frequencies; ``rejections[k][level]`` counts rejecting replications."""

    config: SimulationConfig
    rejections: dict
    n_ok: int
    n_failed: int
    seconds: float
    p_values: np.ndarray = field(repr=False, default=None)

    HEADER = ("design", "n", "reps", "B", "stat", "K", "level", "rate", "mc_se", "n_ok", "n_failed")

    def rate(self, k: int, level: float) -> float:
        if self.n_ok == 0:
            return float("nan")
        return self.rejections[k][level] / self.n_ok

    def mc_se(self, k: int, level: float) -> float:
        r = self.rate(k, level)
        return math.sqrt(r * (1 - r) / self.n_ok) if self.n_ok else float("nan")

    def rows(self):
        cfg = self.config
        out = []
        if cfg.reps == 0:
            return out
        for k in sorted(self.rejections):
            for lv in cfg.levels:
                out.append((cfg.design, cfg.n, cfg.reps, cfg.B, cfg.kind, k, lv, self.rate(k, lv),
                            self.mc_se(k, lv), self.n_ok, self.n_failed))
        return out

    def write_csv(self, path) -> None:
        write_csv(path, self.HEADER, self.rows())

    def format(self) -> str:
        lines = [f"{'K':>3} {'level':>6} {'rate%':>7} {'se%':>6}"]
        for row in self.rows():
            lines.append(f"{row[5]:>3} {row[6]:>6.2f} {100 * row[7]:>7.2f} {100 * row[8]:>6.2f}")
        lines.append(f"replications ok={self.n_ok} failed={self.n_failed} "
                     f"time={self.seconds:.1f}s")
        return "\n".join(lines)


def replication_seeds(seed: int, rep: int) -> tuple[np.random.Generator, int]:
    """Data stream and bootstrap seed of replication ``rep``."""
    data_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep, 0)))
    boot_seed = int(np.random.SeedSequence(seed, spawn_key=(rep, 1)).generate_state(1)[0])
    return data_rng, boot_seed


def run_replication(cfg: SimulationConfig, rep: int):
    """p-values (one per k) of replication ``rep``, or None if it failed."""
    design = cfg.resolved_design
    data_rng, boot_seed = replication_seeds(cfg.seed, rep)
    data = sample(design.params, cfg.n, data_rng)
    try:
        results = bootstrap_test_all_k(data, cfg.m0, cfg.kind, cfg.B, cfg.test_config(),
                                       boot_seed, epsilon1=cfg.epsilon1, levels=cfg.levels,
                                       n_jobs=1)
    except MixOrderError:
        return None
    return {k: (res.p_value, {lv: res.reject(lv) for lv in cfg.levels})
            for k, res in results.items()}


def simulate(cfg: SimulationConfig, n_jobs: int | None = 1, progress=None) -> SimulationTable:
    """Size or power study; replications run in parallel, bootstraps serially inside.

    Results depend only on ``cfg`` (the seed included), not on ``n_jobs``.
    """
    n_jobs = resolve_jobs(n_jobs)
    start = time.perf_counter()
    ks = list(range(1, cfg.K + 1)) if cfg.kind == "em" else [cfg.K]
    if n_jobs == 1:
        outcomes = []
        for rep in range(cfg.reps):
            outcomes.append(run_replication(cfg, rep))
            if progress is not None:
                progress(rep + 1, cfg.reps)
    else:
        from joblib import Parallel, delayed

        outcomes = Parallel(n_jobs=n_jobs)(delayed(run_replication)(cfg, r) for r in range(cfg.reps))
    rejections = {k: {lv: 0 for lv in cfg.levels} for k in ks}
    p_values = np.full((cfg.reps, len(ks)), np.nan)
    n_failed = 0
    for rep, out in enumerate(outcomes):
        if out is None:
            n_failed += 1
            continue
        for i, k in enumerate(ks):
            p, rej = out[k]
            p_values[rep, i] = p
            for lv in cfg.levels:
                rejections[k][lv] += int(rej[lv])
    return SimulationTable(cfg, rejections, cfg.reps - n_failed, n_failed,
                           time.perf_counter() - start, p_values)


@dataclass(frozen=True)
class RuntimeEstimate:
    seconds_per_statistic: float
    statistics: int
    jobs: int

    @property
    def total_seconds(self) -> float:
        return self.seconds_per_statistic * self.statistics / self.jobs

    def format(self) -> str:
        hours = self.total_seconds / 3600
        return (f"{self.statistics} statistic evaluations at {1000 * self.seconds_per_statistic:.1f} ms "
                f"each on {self.jobs} worker(s): about {hours:.2f} h")


def estimate_runtime(cfg: SimulationConfig, n_jobs: int = 1, pilot: int = 5) -> RuntimeEstimate:
    """Extrapolate the cost of a study from ``pilot`` bootstrap replicates of one replication."""
    pilot_cfg = replace(cfg, reps=1, B=max(1, pilot))
    t0 = time.perf_counter()
    run_replication(pilot_cfg, 0)
    per_stat = (time.perf_counter() - t0) / (pilot_cfg.B + 1)
    return RuntimeEstimate(per_stat, cfg.reps * (cfg.B + 1), max(1, n_jobs))
