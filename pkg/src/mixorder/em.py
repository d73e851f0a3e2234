"""Penalized EM fitting of normal mixtures with multistart initialization.

The public :func:`e_step` and :func:`m_step_penalized` are plain numpy
versions of one EM cycle. The fitting drivers run the same updates through the
compiled loop in :mod:`mixorder._kernels`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp

from . import _kernels as K
from .errors import ArgumentError, DegenerateComponentError, NonConvergenceError, NumericError
from .mixture import (
    Dataset,
    MixtureParams,
    PenaltySpec,
    canonicalize,
    one_component_mle_cov,
    weighted_logpdf,
)

GUARD_RTOL = 1e-10


def resolve_a_n(rule, n: int) -> float:
    """Penalty strength from a rule: ``"sqrt"`` gives n^-1/2, ``"one"`` gives 1."""
    if isinstance(rule, str):
        key = rule.strip().lower()
        if key in ("sqrt", "n^-1/2", "n**-0.5"):
            return 1.0 / math.sqrt(n)
        if key in ("one", "1"):
            return 1.0
        try:
            rule = float(key)
        except ValueError:
            raise ArgumentError(f"unknown a_n rule {rule!r}") from None
    value = float(rule)
    if not value >= 0:
        raise ArgumentError("a_n must be nonnegative")
    return value


@dataclass(frozen=True)
class EMConfig:
    """Settings for multistart EM.

    Attributes:
        max_iter: iteration cap per chain.
        rel_tol: stop when the objective changes by less than this fraction.
        n_starts: number of starting values.
        a_n_rule: ``"sqrt"``, ``"one"`` or a nonnegative number.
        seed: root seed for the starting values.
        screen_iter: short-run length used to rank starts; 0 runs every start
            to convergence.
        n_keep: number of screened starts continued to convergence.
    """

    max_iter: int = 2000
    rel_tol: float = 1e-8
    n_starts: int = 20
    a_n_rule: str | float = "sqrt"
    seed: int = 0
    screen_iter: int = 30
    n_keep: int = 3

    def __post_init__(self):
        if self.max_iter < 1 or self.rel_tol <= 0 or self.n_starts < 1 or self.n_keep < 1:
            raise ArgumentError("need max_iter >= 1, rel_tol > 0, n_starts >= 1, n_keep >= 1")
        if self.screen_iter < 0:
            raise ArgumentError("screen_iter must be nonnegative")


@dataclass(frozen=True)
class FitResult:
    params: MixtureParams
    loglik: float
    penalized_loglik: float
    iterations: int
    converged: bool
    start_index: int
    penalty: PenaltySpec | None = None
    diagnostics: dict = field(default_factory=dict, compare=False)


@dataclass
class ChainResult:
    alphas: np.ndarray
    mus: np.ndarray
    sigmas: np.ndarray
    gamma: np.ndarray | None
    homoscedastic: bool
    loglik: float
    objective: float
    history: np.ndarray
    iterations: int
    converged: bool
    tau: float
    guard_events: int

    @property
    def params(self) -> MixtureParams:
        alphas = np.maximum(self.alphas, 0.0)
        return MixtureParams(alphas / alphas.sum(), self.mus, self.sigmas, self.gamma,
                             self.homoscedastic)

    @property
    def max_decrease(self) -> float:
        if self.history.size < 2:
            return 0.0
        return float(max(0.0, -np.min(np.diff(self.history))))


# ---------------------------------------------------------------------------
# reference E and M steps


def e_step(params: MixtureParams, data: Dataset) -> np.ndarray:
    """Posterior component probabilities, one row per observation."""
    logw = weighted_logpdf(params, data)
    norm = logsumexp(logw, axis=1, keepdims=True)
    bad = np.flatnonzero(~np.isfinite(norm[:, 0]))
    if bad.size:
        raise NumericError(f"observation {int(bad[0])} has zero density under every component")
    return np.exp(logw - norm)


def m_step_penalized(
    weights: np.ndarray,
    data: Dataset,
    penalty: PenaltySpec | None,
    homoscedastic: bool = False,
    previous: MixtureParams | None = None,
) -> MixtureParams:
    """Closed-form M-step.

    Weights are column means of ``weights``, means are weighted averages and
    each covariance is ``(2 a_n Omega_j + S_j) / (2 a_n + sum_i w_ij)``. With
    ``homoscedastic`` the shared covariance is the pooled weighted scatter over
    n and no penalty applies. With covariates the coefficient matrix and the
    means are updated by five rounds of block coordinate descent that start
    from ``previous`` and use its covariances as the metric.
    """
    w = np.asarray(weights, dtype=float)
    n, m_count = w.shape
    if n != data.n:
        raise ArgumentError("weight matrix must have one row per observation")
    colsum = w.sum(axis=0)
    a_n = 0.0 if (penalty is None or homoscedastic) else penalty.a_n
    if a_n == 0.0 and np.any(colsum < 1e-10):
        raise DegenerateComponentError(
            f"component {int(np.argmin(colsum))} has no posterior mass and no penalty"
        )
    alphas = colsum / n
    alphas = alphas / alphas.sum()
    x = data.x
    z = data.z
    gamma = None
    if z is None:
        mus = (w.T @ x) / colsum[:, None]
        resid_x = x
    else:
        if previous is None or previous.gamma is None:
            raise ArgumentError("covariate M-step needs previous parameters with gamma")
        gamma = previous.gamma.copy()
        precs = np.linalg.inv(previous.sigmas)
        d, p = gamma.shape
        for _ in range(5):
            resid_x = x - z @ gamma.T
            mus = (w.T @ resid_x) / colsum[:, None]
            lhs = np.zeros((d * p, d * p))
            rhs = np.zeros(d * p)
            for j in range(m_count):
                zz = (z * w[:, j : j + 1]).T @ z
                rz = ((x - mus[j]) * w[:, j : j + 1]).T @ z
                lhs += np.kron(zz, precs[j])
                rhs += (precs[j] @ rz).ravel(order="F")
            gamma = np.linalg.solve(lhs, rhs).reshape((d, p), order="F")
        resid_x = x - z @ gamma.T
    scat = np.stack(
        [(resid_x - mus[j]).T @ ((resid_x - mus[j]) * w[:, j : j + 1]) for j in range(m_count)]
    )
    if homoscedastic:
        pooled = scat.sum(axis=0) / n
        sigmas = np.broadcast_to(pooled, scat.shape).copy()
    else:
        anchors = penalty.anchors if penalty is not None else np.zeros_like(scat)
        if anchors.shape[0] != m_count:
            raise ArgumentError("need one anchor covariance per component")
        sigmas = (2 * a_n * anchors + scat) / (2 * a_n + colsum)[:, None, None]
    sigmas = 0.5 * (sigmas + np.swapaxes(sigmas, 1, 2))
    return MixtureParams(alphas, mus, sigmas, gamma, homoscedastic)


# ---------------------------------------------------------------------------
# compiled chains


_STATUS_MESSAGES = {
    K.STATUS_NOT_SPD: "a covariance lost positive definiteness",
    K.STATUS_ZERO_DENSITY: "an observation has zero density",
    K.STATUS_EMPTY_COMPONENT: "a component lost all posterior mass",
}


def guard_floors(anchors: np.ndarray) -> np.ndarray:
    d = anchors.shape[-1]
    return GUARD_RTOL * np.trace(anchors, axis1=1, axis2=2) / d


class ChainRunner:
    """Runs EM chains on one dataset under fixed settings.

    Everything that does not change between starts (contiguous data, anchors,
    box limits, guard floors) is prepared once here.

    Args:
        penalty: covariance penalty; ignored when ``shared`` is true.
        shared: one covariance for all components, no penalty.
        mode: one of the ``MODE_*`` constants of :mod:`mixorder._kernels`.
        m: first of the two paired components (0-based) for the ratio modes.
        tau_pen: 1 adds log(2 min(tau, 1 - tau)) to the objective, 0 adds nothing.
        box: per-component (lower, upper) limits on mean coordinate ``box_coord``.
        eps: weight floor for ``MODE_WEIGHT_BOX``.
        floor_anchor: covariance that scales the degeneracy guard when there
            are no penalty anchors.
    """

    def __init__(self, data: Dataset, m_count: int, *, penalty: PenaltySpec | None = None,
                 shared: bool = False, mode: int = K.MODE_FREE, m: int = 0, tau_pen: int = 1,
                 box=None, box_coord: int = 0, eps: float = 0.0, floor_anchor=None):
        d = data.d
        self.data = data
        self.x = np.ascontiguousarray(data.x)
        self.z = np.ascontiguousarray(data.z_or_empty())
        self.shared = shared
        if penalty is not None and not shared:
            anchors = np.ascontiguousarray(penalty.anchors, dtype=float)
            if anchors.shape[0] != m_count:
                raise ArgumentError("need one anchor covariance per component")
            self.a_n = float(penalty.a_n)
        else:
            base = floor_anchor if floor_anchor is not None else one_component_mle_cov(data)
            anchors = np.broadcast_to(base, (m_count, d, d)).copy()
            self.a_n = 0.0
        self.anchors = anchors
        self.logdet_anchor = np.array([np.linalg.slogdet(a)[1] for a in anchors])
        self.floors = guard_floors(anchors)
        if box is None:
            self.lo = np.full(m_count, -np.inf)
            self.hi = np.full(m_count, np.inf)
        else:
            self.lo = np.asarray(box[0], dtype=float)
            self.hi = np.asarray(box[1], dtype=float)
        self.mode, self.m, self.tau_pen = mode, m, tau_pen
        self.box_coord, self.eps = box_coord, float(eps)

    def objective(self, params: MixtureParams, tau: float = 0.5) -> float:
        """Objective of the chain at ``params`` without updating anything."""
        res = self.run(params, tau=tau, max_iter=0, rel_tol=1.0)
        return res.objective

    def run(self, start, *, tau: float = 0.5, max_iter: int = 2000,
            rel_tol: float = 1e-8) -> ChainResult:
        """Run from ``start`` (MixtureParams or ChainResult).

        ``rel_tol < 0`` disables early stopping, so exactly ``max_iter`` updates run.
        """
        alphas = np.array(start.alphas, dtype=float)
        mus = np.array(start.mus, dtype=float)
        sigmas = np.array(start.sigmas, dtype=float)
        gamma = start.gamma
        gamma = np.zeros((mus.shape[1], 0)) if gamma is None else np.array(gamma, dtype=float)
        if gamma.shape[1] != self.z.shape[1]:
            raise ArgumentError("covariate dimension of data and start differ")
        hist = np.full(max_iter + 1, np.nan)
        n_done, converged, status, tau_out, guard, loglik = K.em_loop(
            self.x, self.z, alphas, mus, sigmas, gamma, self.anchors, self.logdet_anchor,
            self.a_n, self.shared, self.mode, self.m, float(tau), self.tau_pen, self.lo, self.hi,
            self.box_coord, self.eps, self.floors, max_iter, float(rel_tol), hist,
        )
        if status != K.STATUS_OK:
            raise NumericError(_STATUS_MESSAGES[status])
        history = hist[: n_done + 1].copy()
        return ChainResult(
            alphas, mus, sigmas, gamma if gamma.shape[1] else None, self.shared, float(loglik),
            float(history[-1]), history, int(n_done), bool(converged), float(tau_out), int(guard),
        )


def run_chain(data: Dataset, start: MixtureParams, *, tau: float = 0.5, max_iter: int = 2000,
              rel_tol: float = 1e-8, **settings) -> ChainResult:
    """One EM chain from ``start``; ``settings`` are passed to :class:`ChainRunner`."""
    return ChainRunner(data, start.M, **settings).run(start, tau=tau, max_iter=max_iter,
                                                       rel_tol=rel_tol)


# ---------------------------------------------------------------------------
# starting values


def _start_streams(seed, count: int) -> list[np.random.Generator]:
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in root.spawn(count)]


def _ols_gamma(data: Dataset) -> np.ndarray | None:
    if data.z is None:
        return None
    design = np.hstack([np.ones((data.n, 1)), data.z])
    coef, *_ = np.linalg.lstsq(design, data.x, rcond=None)
    return coef[1:].T.copy()


def default_starts(data: Dataset, M: int, n_starts: int, seed, homoscedastic=False):
    """One k-means start followed by starts centred on random observations."""
    gamma = _ols_gamma(data)
    y = data.x if gamma is None else data.x - data.z @ gamma.T
    pooled = np.cov(y, rowvar=False, bias=True).reshape(data.d, data.d)
    streams = _start_streams(seed, n_starts)
    starts = []
    if M == 1:
        return [MixtureParams(np.ones(1), y.mean(axis=0)[None], pooled[None], gamma)]
    for k, rng in enumerate(streams):
        if k == 0:
            centroids, labels = kmeans2(y, M, minit="++", seed=rng)
            counts = np.bincount(labels, minlength=M).astype(float)
            if np.any(counts < 2):
                centroids = y[rng.choice(data.n, M, replace=False)]
                labels = np.argmin(((y[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
                counts = np.bincount(labels, minlength=M).astype(float)
            within = sum(
                (y[labels == j] - centroids[j]).T @ (y[labels == j] - centroids[j]) for j in range(M)
            ) / data.n
            if np.min(np.linalg.eigvalsh(within)) <= 1e-8 * np.trace(pooled):
                within = pooled
            alphas = np.maximum(counts, 1.0) / np.maximum(counts, 1.0).sum()
            sig = np.broadcast_to(within, (M, data.d, data.d)).copy()
            starts.append(MixtureParams(alphas, centroids, sig, gamma, homoscedastic))
        else:
            idx = rng.choice(data.n, M, replace=False)
            sig = np.broadcast_to(pooled, (M, data.d, data.d)).copy()
            starts.append(MixtureParams(np.full(M, 1.0 / M), y[idx], sig, gamma, homoscedastic))
    return starts


# ---------------------------------------------------------------------------
# multistart driver


def multistart(
    runner: ChainRunner,
    starts: Sequence,
    config: EMConfig,
    taus: Sequence[float] | None = None,
) -> tuple[ChainResult, int, dict]:
    """Screen starts with short runs, polish the best ``n_keep`` to convergence.

    Returns the best chain, its start index and diagnostics. Ties go to the
    lowest start index.
    """
    taus = [0.5] * len(starts) if taus is None else list(taus)
    screen = config.screen_iter if (config.screen_iter and len(starts) > config.n_keep) else 0
    stage_one = []
    failures = 0
    max_decrease = 0.0
    guard_events = 0
    for k, start in enumerate(starts):
        try:
            res = runner.run(start, tau=taus[k], max_iter=screen or config.max_iter,
                             rel_tol=config.rel_tol)
        except NumericError:
            failures += 1
            continue
        max_decrease = max(max_decrease, res.max_decrease)
        guard_events += res.guard_events
        stage_one.append((k, res))
    if not stage_one:
        raise NumericError("every EM start failed")
    candidates = stage_one
    if screen:
        stage_one.sort(key=lambda item: (-item[1].objective, item[0]))
        polished = []
        for k, res in stage_one[: config.n_keep]:
            if res.converged:
                polished.append((k, res))
                continue
            try:
                more = runner.run(res, tau=res.tau, max_iter=max(config.max_iter - res.iterations, 1),
                                  rel_tol=config.rel_tol)
            except NumericError:
                failures += 1
                continue
            max_decrease = max(max_decrease, more.max_decrease)
            guard_events += more.guard_events
            more.history = np.concatenate([res.history, more.history[1:]])
            more.iterations += res.iterations
            polished.append((k, more))
        candidates = polished or stage_one[: config.n_keep]
    best_k, best = min(candidates, key=lambda item: (-item[1].objective, item[0]))
    diagnostics = {
        "failed_starts": failures,
        "max_decrease": max_decrease,
        "guard_events": guard_events,
        "n_starts": len(starts),
    }
    return best, best_k, diagnostics


def pool_covariances(params: MixtureParams) -> MixtureParams:
    """Homoscedastic version of ``params`` with the weight-averaged covariance."""
    if params.homoscedastic:
        return params
    pooled = np.einsum("j,jab->ab", params.alphas, params.sigmas)
    return MixtureParams(params.alphas, params.mus, pooled, params.gamma, homoscedastic=True)


def _resolve_penalty(data: Dataset, M: int, a_n: float, penalty_anchor) -> PenaltySpec:
    if penalty_anchor is None:
        return PenaltySpec.shared(a_n, one_component_mle_cov(data), M)
    anchor = np.asarray(penalty_anchor, dtype=float)
    if anchor.ndim == 2 or (anchor.ndim == 0 and data.d == 1):
        return PenaltySpec.shared(a_n, anchor.reshape(data.d, data.d), M)
    if anchor.shape[0] != M:
        raise ArgumentError("need one anchor covariance per component")
    return PenaltySpec(a_n, anchor)


def _finish(data, best: ChainResult, best_k, diagnostics, penalty, config) -> FitResult:
    params = best.params
    order = sorted(range(params.M), key=lambda j: tuple(params.mus[j]) + tuple(params.sigmas[j].ravel()))
    canon = canonicalize(params)
    if penalty is not None:
        penalty = PenaltySpec(penalty.a_n, penalty.anchors[order])
    diagnostics = dict(diagnostics, history=best.history)
    if not best.converged and best.iterations >= config.max_iter:
        raise NonConvergenceError(
            f"no EM chain converged within {config.max_iter} iterations",
            best=FitResult(canon, best.loglik, best.objective, best.iterations, False, best_k,
                           penalty, diagnostics),
        )
    return FitResult(
        canon, best.loglik, best.objective, best.iterations, best.converged, best_k, penalty,
        diagnostics,
    )


def fit_pmle(
    data: Dataset,
    M: int,
    config: EMConfig = EMConfig(),
    penalty_anchor=None,
    extra_starts: Sequence[MixtureParams] = (),
) -> FitResult:
    """Penalized MLE of an M-component heteroscedastic mixture.

    The penalty anchor defaults to the one-component covariance MLE, shared by
    all components. ``extra_starts`` are tried in addition to the defaults.
    """
    if M < 1:
        raise ArgumentError("M must be at least 1")
    data = data.sorted_rows()
    a_n = resolve_a_n(config.a_n_rule, data.n)
    penalty = _resolve_penalty(data, M, a_n, penalty_anchor)
    n_starts = 1 if M == 1 else config.n_starts
    starts = list(extra_starts) + default_starts(data, M, n_starts, config.seed)
    runner = ChainRunner(data, M, penalty=penalty)
    best, best_k, diag = multistart(runner, starts, config)
    return _finish(data, best, best_k, diag, penalty, config)


def fit_mle_homoscedastic(
    data: Dataset,
    M: int,
    config: EMConfig = EMConfig(),
    extra_starts: Sequence[MixtureParams] = (),
) -> FitResult:
    """Unpenalized MLE of an M-component mixture with one shared covariance."""
    if M < 1:
        raise ArgumentError("M must be at least 1")
    data = data.sorted_rows()
    n_starts = 1 if M == 1 else config.n_starts
    starts = [pool_covariances(s) for s in extra_starts]
    starts += default_starts(data, M, n_starts, config.seed, homoscedastic=True)
    runner = ChainRunner(data, M, shared=True, floor_anchor=one_component_mle_cov(data))
    best, best_k, diag = multistart(runner, starts, config)
    return _finish(data, best, best_k, diag, None, config)
