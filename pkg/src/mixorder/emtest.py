"""EM test and likelihood ratio statistics for H0: M = M0 against M = M0 + 1.

Components are indexed from 0. Splitting component ``m`` of an M0-component
null fit produces an (M0 + 1)-component model whose components ``m`` and
``m + 1`` both descend from null component ``m``; the ones before keep their
index and the ones after shift up by one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .em import (
    ChainRunner,
    EMConfig,
    FitResult,
    _finish,
    default_starts,
    fit_mle_homoscedastic,
    fit_pmle,
    multistart,
    resolve_a_n,
)
from .errors import ArgumentError, NonConvergenceError, NumericError, PartitionError
from .mixture import Dataset, MixtureParams, PenaltySpec, canonicalize, one_component_mle_cov

TIE_TOL = 1e-8
# alternative fits near a duplicated component creep; their best chain gets
# this many times the usual iteration budget before giving up
LRT_PATIENCE = 10


# ---------------------------------------------------------------------------
# partitions


@dataclass(frozen=True)
class PartitionEstimate:
    """Cut points on one mean coordinate splitting the line into M0 boxes.

    ``coord`` is the coordinate that is cut (0 unless the fallback was used).
    """

    cut_points: np.ndarray
    coord: int = 0
    fallback: bool = False

    @property
    def n_boxes(self) -> int:
        return self.cut_points.shape[0] + 1

    def box(self, j: int) -> tuple[float, float]:
        cuts = np.concatenate([[-np.inf], self.cut_points, [np.inf]])
        return float(cuts[j]), float(cuts[j + 1])


def build_partitions(null_fit: FitResult | MixtureParams, allow_fallback: bool = True):
    """Midpoints between consecutive sorted first-coordinate means.

    When two fitted means tie on the first coordinate (within 1e-8) the cut is
    made on the coordinate whose fitted means are most spread out, and the
    result is flagged. With ``allow_fallback=False`` a tie raises instead.
    """
    params = null_fit.params if isinstance(null_fit, FitResult) else null_fit
    mus = params.mus
    if params.M == 1:
        return PartitionEstimate(np.empty(0))
    coord, fallback = 0, False
    first = np.sort(mus[:, 0])
    if np.min(np.diff(first)) <= TIE_TOL:
        if not allow_fallback:
            raise PartitionError("fitted means tie on the first coordinate")
        gaps = [np.min(np.diff(np.sort(mus[:, c]))) for c in range(params.d)]
        coord = int(np.argmax(gaps))
        if gaps[coord] <= TIE_TOL:
            raise PartitionError("fitted means tie on every coordinate")
        fallback = True
    values = np.sort(mus[:, coord])
    return PartitionEstimate(0.5 * (values[:-1] + values[1:]), coord, fallback)


def _ordered_null(params: MixtureParams, coord: int) -> MixtureParams:
    if coord == 0:
        return params
    order = np.argsort(params.mus[:, coord], kind="stable")
    return params.permute(order)


# ---------------------------------------------------------------------------
# configuration and results


@dataclass(frozen=True)
class EMTestConfig:
    """Settings of the EM test.

    Attributes:
        tau_set: starting mixing proportions; must contain 0.5.
        K: number of EM-test iterations (the restricted fit counts as the first).
        a_n: penalty strength for the (M0 + 1)-component model, as a rule or number.
        em: settings for the null fit; its ``a_n_rule`` is the null penalty.
        n_starts: random starts per restricted fit, in addition to the
            duplicated null component.
    """

    tau_set: tuple[float, ...] = (0.1, 0.3, 0.5)
    K: int = 3
    a_n: str | float = 1.0
    em: EMConfig = EMConfig()
    n_starts: int = 10

    def __post_init__(self):
        taus = tuple(float(t) for t in self.tau_set)
        if not taus or any(not 0.0 < t <= 0.5 for t in taus):
            raise ArgumentError("tau_set must be a nonempty subset of (0, 0.5]")
        if 0.5 not in taus:
            raise ArgumentError("tau_set must contain 0.5")
        if self.K < 1:
            raise ArgumentError("K must be at least 1")
        if self.n_starts < 0:
            raise ArgumentError("n_starts must be nonnegative")
        object.__setattr__(self, "tau_set", taus)


@dataclass(frozen=True)
class EMTestResult:
    """Outcome of :func:`em_test_statistic`.

    ``per_split[(m, tau0)]`` holds M^{m(k)}(tau0) for k = 1..K.
    """

    per_split: dict
    em_m_K: np.ndarray
    statistic: float
    null_fit: FitResult
    alt_params: MixtureParams
    partitions: PartitionEstimate
    K: int
    diagnostics: dict = field(default_factory=dict, compare=False)

    def statistic_at(self, k: int) -> float:
        """EM statistic after ``k`` iterations, for any k up to K."""
        if not 1 <= k <= self.K:
            raise ArgumentError(f"k must lie in 1..{self.K}")
        return max(traj[k - 1] for traj in self.per_split.values())

    def local_at(self, k: int) -> np.ndarray:
        m_count = self.em_m_K.shape[0]
        out = np.full(m_count, -np.inf)
        for (m, _), traj in self.per_split.items():
            out[m] = max(out[m], traj[k - 1])
        return out


# ---------------------------------------------------------------------------
# split embedding


def split_index(j: int, m: int) -> int:
    """Null component that alternative component ``j`` descends from."""
    return j if j <= m else j - 1


def split_params(null: MixtureParams, m: int, tau: float) -> MixtureParams:
    """Duplicate null component ``m`` with weights ``tau`` and ``1 - tau``."""
    src = [split_index(j, m) for j in range(null.M + 1)]
    alphas = null.alphas[src].copy()
    alphas[m] *= tau
    alphas[m + 1] *= 1.0 - tau
    return MixtureParams(alphas, null.mus[src], null.sigmas[src], null.gamma, null.homoscedastic)


def split_anchors(null: MixtureParams, m: int) -> np.ndarray:
    return null.sigmas[[split_index(j, m) for j in range(null.M + 1)]].copy()


def split_boxes(partitions: PartitionEstimate, m: int, m_alt: int):
    lo = np.empty(m_alt)
    hi = np.empty(m_alt)
    for j in range(m_alt):
        lo[j], hi[j] = partitions.box(split_index(j, m))
    return lo, hi


def perturbed_split(null: MixtureParams, m: int, tau: float, rng: np.random.Generator,
                    box=None, coord: int = 0) -> MixtureParams:
    """Split start that keeps the weighted mean of the pair at the null mean."""
    base = split_params(null, m, tau)
    mus = np.array(base.mus)
    sigmas = np.array(base.sigmas)
    chol = np.linalg.cholesky(null.sigmas[m])
    delta = rng.uniform(0.2, 1.5) * chol @ rng.standard_normal(null.d)
    mus[m] = null.mus[m] + (1.0 - tau) * delta
    mus[m + 1] = null.mus[m] - tau * delta
    if not null.homoscedastic:
        sigmas[m] = null.sigmas[m] * np.exp(rng.normal(0.0, 0.3))
        sigmas[m + 1] = null.sigmas[m] * np.exp(rng.normal(0.0, 0.3))
    if box is not None:
        for j in (m, m + 1):
            mus[j, coord] = np.clip(mus[j, coord], box[0][j], box[1][j])
    return MixtureParams(base.alphas, mus, sigmas, base.gamma, base.homoscedastic)


def _branch_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


# ---------------------------------------------------------------------------
# EM test


def _restricted_runner(data, null, m, tau0, partitions, a_n):
    m_alt = null.M + 1
    penalty = PenaltySpec(a_n, split_anchors(null, m))
    box = split_boxes(partitions, m, m_alt)
    runner = ChainRunner(data, m_alt, penalty=penalty, mode=K.MODE_FIXED_RATIO, m=m,
                         box=box, box_coord=partitions.coord)
    return runner, penalty, box


def _restricted_chain(data, null, m, tau0, partitions, a_n, config: EMTestConfig, rng):
    runner, penalty, box = _restricted_runner(data, null, m, tau0, partitions, a_n)
    starts = [split_params(null, m, tau0)]
    starts += [perturbed_split(null, m, tau0, rng, box, partitions.coord)
               for _ in range(config.n_starts)]
    best, _, diag = multistart(runner, starts, config.em, taus=[tau0] * len(starts))
    return best, penalty, diag


def restricted_initial_fit(data: Dataset, m: int, tau0: float, partitions: PartitionEstimate,
                           config: EMTestConfig, null_fit: FitResult) -> MixtureParams:
    """Penalized fit with the pair ratio fixed at ``tau0`` and means kept in their boxes."""
    if not 0.0 < tau0 <= 0.5:
        raise ArgumentError("tau0 must lie in (0, 0.5]")
    null = _ordered_null(null_fit.params, partitions.coord)
    if not 0 <= m < null.M:
        raise ArgumentError(f"m must lie in 0..{null.M - 1}")
    a_n = resolve_a_n(config.a_n, data.n)
    rng = _branch_rng(config.em.seed, 1, m, int(round(tau0 * 1e6)))
    best, _, _ = _restricted_chain(data.sorted_rows(), null, m, tau0, partitions, a_n, config, rng)
    return best.params


def gem_k_steps(start: MixtureParams, tau0: float, data: Dataset, anchors, a_n: float,
                K_steps: int, m: int = 0):
    """Run ``K_steps - 1`` unrestricted generalized EM updates from ``start``.

    Returns the final parameters, the final tau and the objective (penalized
    log-likelihood plus p(tau)) at each of the K_steps iterates, the start
    included.
    """
    runner = ChainRunner(data, start.M, penalty=PenaltySpec(a_n, anchors),
                         mode=K.MODE_TAU_UPDATE, m=m)
    res = runner.run(start, tau=tau0, max_iter=K_steps - 1, rel_tol=-1.0)
    return res.params, res.tau, res.history


def em_test_statistic(data: Dataset, M0: int, config: EMTestConfig = EMTestConfig(),
                      null_fit: FitResult | None = None) -> EMTestResult:
    """EM test statistic for H0: M = M0.

    The null model is fitted with ``config.em`` (penalty rule ``a_n_rule``,
    by default n^-1/2); the alternative uses ``config.a_n``.
    """
    if M0 < 1:
        raise ArgumentError("M0 must be at least 1")
    data = data.sorted_rows()
    if null_fit is None:
        null_fit = fit_pmle(data, M0, config.em)
    partitions = build_partitions(null_fit)
    null = _ordered_null(null_fit.params, partitions.coord)
    loglik_null = null_fit.loglik
    a_n = resolve_a_n(config.a_n, data.n)
    per_split = {}
    best_obj, alt_params = -np.inf, None
    max_decrease = 0.0
    for m in range(M0):
        anchors = split_anchors(null, m)
        gem = ChainRunner(data, M0 + 1, penalty=PenaltySpec(a_n, anchors),
                          mode=K.MODE_TAU_UPDATE, m=m)
        for t_idx, tau0 in enumerate(config.tau_set):
            rng = _branch_rng(config.em.seed, 1, m, int(round(tau0 * 1e6)))
            try:
                start, _, diag = _restricted_chain(data, null, m, tau0, partitions, a_n, config, rng)
                res = gem.run(start, tau=tau0, max_iter=config.K - 1, rel_tol=-1.0)
            except NumericError as exc:
                raise NumericError(f"EM test branch m={m}, tau0={tau0}: {exc}") from exc
            max_decrease = max(max_decrease, diag["max_decrease"], res.max_decrease,
                               abs(start.objective - res.history[0]))
            traj = 2.0 * (res.history - loglik_null)
            per_split[(m, tau0)] = traj
            if res.objective > best_obj:
                best_obj, alt_params = res.objective, res.params
    em_m_K = np.array([max(per_split[(m, t)][-1] for t in config.tau_set) for m in range(M0)])
    return EMTestResult(
        per_split=per_split,
        em_m_K=em_m_K,
        statistic=float(em_m_K.max()),
        null_fit=null_fit,
        alt_params=canonicalize(alt_params),
        partitions=partitions,
        K=config.K,
        diagnostics={"max_decrease": max_decrease, "partition_fallback": partitions.fallback},
    )


# ---------------------------------------------------------------------------
# likelihood ratio statistics


@dataclass(frozen=True)
class LRTResult:
    statistic: float
    null_fit: FitResult
    alt_fit: FitResult


def _split_starts(null: MixtureParams, seed: int, n_random: int, tau: float = 0.5):
    starts = []
    for m in range(null.M):
        starts.append(split_params(null, m, tau))
        rng = _branch_rng(seed, 2, m)
        starts += [perturbed_split(null, m, tau, rng) for _ in range(n_random)]
    return starts


def lrt_statistic_hetero(data: Dataset, M0: int, epsilon1: float = 0.05,
                         config: EMConfig = EMConfig(), null_fit: FitResult | None = None,
                         n_split_starts: int = 3) -> LRTResult:
    """Penalized LRT with alternative weights kept in [epsilon1, 1 - epsilon1].

    Both models use the penalty rule of ``config`` anchored at the
    one-component covariance MLE; the statistic compares unpenalized
    log-likelihoods.
    """
    if not 0.0 < epsilon1 < 1.0 / (M0 + 1):
        raise ArgumentError("epsilon1 must lie in (0, 1/(M0 + 1))")
    data = data.sorted_rows()
    if null_fit is None:
        null_fit = fit_pmle(data, M0, config)
    a_n = resolve_a_n(config.a_n_rule, data.n)
    penalty = PenaltySpec.shared(a_n, one_component_mle_cov(data), M0 + 1)
    runner = ChainRunner(data, M0 + 1, penalty=penalty, mode=K.MODE_WEIGHT_BOX, eps=epsilon1)
    starts = _split_starts(null_fit.params, config.seed, n_split_starts)
    starts += default_starts(data, M0 + 1, config.n_starts, config.seed)
    best, best_k, diag = multistart(runner, starts, config)
    if not best.converged:
        best = _continue(runner, best, config)
    alt = _finish(data, best, best_k, diag, penalty, config)
    return LRTResult(2.0 * (alt.loglik - null_fit.loglik), null_fit, alt)


def _continue(runner: ChainRunner, chain, config: EMConfig):
    more = runner.run(chain, tau=chain.tau, max_iter=(LRT_PATIENCE - 1) * config.max_iter,
                      rel_tol=config.rel_tol)
    more.history = np.concatenate([chain.history, more.history[1:]])
    more.iterations += chain.iterations
    return more


def lrt_statistic_homo(data: Dataset, M0: int, config: EMConfig = EMConfig(),
                       null_fit: FitResult | None = None, n_split_starts: int = 3) -> LRTResult:
    """LRT between common-covariance mixtures of orders M0 and M0 + 1, unpenalized."""
    data = data.sorted_rows()
    if null_fit is None:
        null_fit = fit_mle_homoscedastic(data, M0, config)
    starts = _split_starts(null_fit.params, config.seed, n_split_starts)
    try:
        alt = fit_mle_homoscedastic(data, M0 + 1, config, extra_starts=starts)
    except NonConvergenceError as exc:
        longer = replace(config, max_iter=LRT_PATIENCE * config.max_iter, n_starts=1,
                         screen_iter=0)
        alt = fit_mle_homoscedastic(data, M0 + 1, longer, extra_starts=[exc.best.params])
    return LRTResult(2.0 * (alt.loglik - null_fit.loglik), null_fit, alt)
