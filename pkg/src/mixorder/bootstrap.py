"""Parametric bootstrap p-values and critical values."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .em import FitResult, fit_mle_homoscedastic, fit_pmle
from .emtest import EMTestConfig, em_test_statistic, lrt_statistic_hetero, lrt_statistic_homo
from .errors import ArgumentError, MixOrderError, NumericError
from .mixture import Dataset, sample

KINDS = ("em", "lrt", "lrt-homo")
MAX_FAILURE_RATE = 0.01
DEFAULT_LEVELS = (0.10, 0.05, 0.01)


@dataclass(frozen=True)
class BootstrapResult:
    """Observed statistic against B bootstrap replicates.

    ``replicates`` holds NaN for failed replicates; they are left out of the
    p-value and the quantiles.
    """

    observed: float
    replicates: np.ndarray
    p_value: float
    critical_values: dict
    B: int
    seed: int
    kind: str = "em"
    n_failed: int = 0
    null_fit: FitResult | None = field(default=None, compare=False)

    def critical_value(self, level: float) -> float:
        return quantile(self.replicates[~np.isnan(self.replicates)], level)

    def reject(self, level: float) -> bool:
        """Reject when the observed statistic exceeds the (1 - level) quantile."""
        return bool(self.observed > self.critical_value(level))


def quantile(replicates, level: float) -> float:
    """The ceil((1 - level) B)-th smallest replicate."""
    values = np.sort(np.asarray(replicates, dtype=float).ravel())
    if values.size == 0:
        raise ArgumentError("need at least one replicate")
    if not 0.0 < level < 1.0:
        raise ArgumentError("level must lie in (0, 1)")
    # rounding first keeps 0.95 * 200 from landing just above 190
    rank = math.ceil(round((1.0 - level) * values.size, 9))
    return float(values[max(rank, 1) - 1])


def p_value(observed: float, replicates) -> float:
    values = np.asarray(replicates, dtype=float)
    return float(np.count_nonzero(values > observed) / values.size)


def resolve_jobs(n_jobs: int | None = None) -> int:
    """Worker count from the argument, else MIXORDER_JOBS, else 1."""
    if n_jobs is None:
        raw = os.environ.get("MIXORDER_JOBS", "1")
        try:
            n_jobs = int(raw)
        except ValueError:
            raise ArgumentError(f"MIXORDER_JOBS must be an integer, got {raw!r}") from None
    if n_jobs == 0 or n_jobs < -1:
        raise ArgumentError("jobs must be a positive integer or -1")
    return n_jobs


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Stream for replicate ``index``; depends only on (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def fit_null(data: Dataset, M0: int, kind: str, config: EMTestConfig) -> FitResult:
    if kind == "lrt-homo":
        return fit_mle_homoscedastic(data, M0, config.em)
    return fit_pmle(data, M0, config.em)


def statistic_values(data: Dataset, M0: int, kind: str, config: EMTestConfig,
                     epsilon1: float = 0.05, null_fit: FitResult | None = None) -> np.ndarray:
    """Statistic on ``data``; for the EM test one value per k = 1..K."""
    if kind == "em":
        res = em_test_statistic(data, M0, config, null_fit=null_fit)
        return np.array([res.statistic_at(k) for k in range(1, config.K + 1)])
    if kind == "lrt":
        return np.array([lrt_statistic_hetero(data, M0, epsilon1, config.em, null_fit).statistic])
    if kind == "lrt-homo":
        return np.array([lrt_statistic_homo(data, M0, config.em, null_fit).statistic])
    raise ArgumentError(f"unknown statistic {kind!r}; choose from {', '.join(KINDS)}")


def _one_replicate(index, null_params, n, z_rows, M0, kind, config, epsilon1, seed, width):
    rng = replicate_rng(seed, index)
    boot = sample(null_params, n, rng, z_rows=z_rows)
    try:
        return statistic_values(boot, M0, kind, config, epsilon1)
    except (MixOrderError, NumericError, ArithmeticError, np.linalg.LinAlgError):
        return np.full(width, np.nan)


def _replicates(null_params, data, M0, kind, config, epsilon1, B, seed, n_jobs, width):
    args = (null_params, data.n, data.z, M0, kind, config, epsilon1, seed, width)
    if n_jobs == 1:
        rows = [_one_replicate(b, *args) for b in range(B)]
    else:
        from joblib import Parallel, delayed

        rows = Parallel(n_jobs=n_jobs, batch_size="auto")(
            delayed(_one_replicate)(b, *args) for b in range(B)
        )
    return np.vstack(rows)


def _summarize(observed, reps, levels, B, seed, kind, null_fit):
    failed = np.isnan(reps)
    n_failed = int(failed.sum())
    if n_failed > MAX_FAILURE_RATE * B:
        raise NumericError(
            f"{n_failed} of {B} bootstrap replicates failed (more than {MAX_FAILURE_RATE:.0%})"
        )
    ok = reps[~failed]
    crit = {float(lv): quantile(ok, lv) for lv in levels}
    return BootstrapResult(observed, reps, p_value(observed, ok), crit, B, seed, kind, n_failed,
                           null_fit)


def bootstrap_test_all_k(data: Dataset, M0: int, kind: str = "em", B: int = 199,
                         config: EMTestConfig = EMTestConfig(), seed: int = 0, *,
                         epsilon1: float = 0.05, levels=DEFAULT_LEVELS,
                         n_jobs: int | None = 1) -> dict:
    """Bootstrap every EM-test iteration count k = 1..K from one set of replicates.

    Returns a dict mapping k to :class:`BootstrapResult`. For the LRT kinds
    the dict has the single key ``config.K``.
    """
    if B < 1:
        raise ArgumentError("B must be at least 1")
    if kind not in KINDS:
        raise ArgumentError(f"unknown statistic {kind!r}; choose from {', '.join(KINDS)}")
    n_jobs = resolve_jobs(n_jobs)
    data = data.sorted_rows()
    null_fit = fit_null(data, M0, kind, config)
    observed = statistic_values(data, M0, kind, config, epsilon1, null_fit)
    width = observed.size
    reps = _replicates(null_fit.params, data, M0, kind, config, epsilon1, B, seed, n_jobs, width)
    ks = range(1, config.K + 1) if kind == "em" else [config.K]
    return {
        k: _summarize(float(observed[i]), reps[:, i], levels, B, seed, kind, null_fit)
        for i, k in enumerate(ks)
    }


def bootstrap_test(data: Dataset, M0: int, kind: str = "em", B: int = 199,
                   config: EMTestConfig = EMTestConfig(), seed: int = 0, *,
                   epsilon1: float = 0.05, levels=DEFAULT_LEVELS,
                   n_jobs: int | None = 1) -> BootstrapResult:
    """Parametric bootstrap test of H0: M = M0 with the chosen statistic.

    Replicate b is drawn from the fitted null model with its own stream
    derived from (seed, b), reusing the observed covariate rows, so the result
    does not depend on ``n_jobs``.
    """
    results = bootstrap_test_all_k(data, M0, kind, B, config, seed, epsilon1=epsilon1,
                                   levels=levels, n_jobs=n_jobs)
    return results[config.K]
