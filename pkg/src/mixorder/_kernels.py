"""Compiled EM inner loops.

One loop serves every fitting variant through a ``mode`` switch:

* ``MODE_FREE``: ordinary (penalized) EM.
* ``MODE_FIXED_RATIO``: components ``m`` and ``m + 1`` keep the weight ratio
  ``tau : 1 - tau``; their total weight is free.
* ``MODE_TAU_UPDATE``: as above, but ``tau`` is re-estimated each step by the
  penalized binomial update.
* ``MODE_WEIGHT_BOX``: weights are maximized subject to ``eps <= alpha_j <= 1 - eps``.

Arrays are modified in place. ``hist[k]`` receives the objective after ``k``
updates, so a run of ``max_iter`` steps fills ``hist[: n_done + 1]``.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

MODE_FREE = 0
MODE_FIXED_RATIO = 1
MODE_TAU_UPDATE = 2
MODE_WEIGHT_BOX = 3

STATUS_OK = 0
STATUS_NOT_SPD = 1
STATUS_ZERO_DENSITY = 2
STATUS_EMPTY_COMPONENT = 3

ALPHA_FLOOR = 1e-12
_LOG_2PI = math.log(2.0 * math.pi)
_PIVOT_RTOL = 1e-12
_BCD_ROUNDS = 5


@njit(cache=True)
def _cholesky(s, out):
    d = s.shape[0]
    trace = 0.0
    for a in range(d):
        trace += s[a, a]
    floor = _PIVOT_RTOL * trace / d
    for j in range(d):
        acc = s[j, j]
        for k in range(j):
            acc -= out[j, k] * out[j, k]
        if not acc > floor:
            return False
        out[j, j] = math.sqrt(acc)
        for i in range(j + 1, d):
            t = s[i, j]
            for k in range(j):
                t -= out[i, k] * out[j, k]
            out[i, j] = t / out[j, j]
        for i in range(j):
            out[i, j] = 0.0
    return True


@njit(cache=True)
def residuals(x, z, gamma, y):
    n, d = x.shape
    p = z.shape[1]
    for i in range(n):
        for a in range(d):
            acc = x[i, a]
            for k in range(p):
                acc -= gamma[a, k] * z[i, k]
            y[i, a] = acc


@njit(cache=True, fastmath={"contract", "arcp", "reassoc", "nsz"})
def e_step(y, alphas, mus, sigmas, w, colsum, s1, s2, accumulate):
    """Posterior weights into ``w``; returns (loglik, status).

    With ``accumulate`` the weighted statistics of the residuals about the
    current means are summed as well: ``colsum[j]``, ``s1[j] = sum w r`` and the
    lower triangle of ``s2[j] = sum w r r'``.
    """
    n, d = y.shape
    m_count = mus.shape[0]
    chols = np.zeros((m_count, d, d))
    inv_diag = np.empty((m_count, d))
    const = np.empty(m_count)
    for j in range(m_count):
        if not _cholesky(sigmas[j], chols[j]):
            return -np.inf, STATUS_NOT_SPD
        logdet = 0.0
        for a in range(d):
            logdet += 2.0 * math.log(chols[j, a, a])
            inv_diag[j, a] = 1.0 / chols[j, a, a]
        const[j] = math.log(max(alphas[j], ALPHA_FLOOR)) - 0.5 * (d * _LOG_2PI + logdet)
    sol = np.empty(d)
    lw = np.empty(m_count)
    loglik = 0.0
    # per-row normalizers lie in [1, m_count]; their product is logged in batches
    prod = 1.0
    for i in range(n):
        top = -np.inf
        arg = 0
        for j in range(m_count):
            quad = 0.0
            for a in range(d):
                t = y[i, a] - mus[j, a]
                for b in range(a):
                    t -= chols[j, a, b] * sol[b]
                t *= inv_diag[j, a]
                sol[a] = t
                quad += t * t
            v = const[j] - 0.5 * quad
            lw[j] = v
            if v > top:
                top = v
                arg = j
        if top == -np.inf:
            return -np.inf, STATUS_ZERO_DENSITY
        acc = 1.0
        for j in range(m_count):
            if j != arg:
                lw[j] = math.exp(lw[j] - top)
                acc += lw[j]
        lw[arg] = 1.0
        loglik += top
        prod *= acc
        if prod > 1e250:
            loglik += math.log(prod)
            prod = 1.0
        inv = 1.0 / acc
        for j in range(m_count):
            w[i, j] = lw[j] * inv
    if accumulate:
        _moments(y, w, mus, colsum, s1, s2)
    return loglik + math.log(prod), STATUS_OK


@njit(cache=True)
def _moments(y, w, mus, colsum, s1, s2):
    n, d = y.shape
    m_count = mus.shape[0]
    colsum[:] = 0.0
    s1[:] = 0.0
    s2[:] = 0.0
    r = np.empty(d)
    for i in range(n):
        for j in range(m_count):
            wij = w[i, j]
            colsum[j] += wij
            for a in range(d):
                r[a] = y[i, a] - mus[j, a]
            for a in range(d):
                wr = wij * r[a]
                s1[j, a] += wr
                for b in range(a + 1):
                    s2[j, a, b] += wr * r[b]


@njit(cache=True)
def _cholesky_plain(s, out):
    d = s.shape[0]
    for j in range(d):
        acc = s[j, j]
        for k in range(j):
            acc -= out[j, k] * out[j, k]
        if not acc > 0.0:
            return False
        out[j, j] = math.sqrt(acc)
        for i in range(j + 1, d):
            t = s[i, j]
            for k in range(j):
                t -= out[i, k] * out[j, k]
            out[i, j] = t / out[j, j]
        for i in range(j):
            out[i, j] = 0.0
    return True


@njit(cache=True)
def _inverse_from_cholesky(chol, out):
    """inv(L L') written into ``out``."""
    d = chol.shape[0]
    linv = np.zeros((d, d))
    for j in range(d):
        linv[j, j] = 1.0 / chol[j, j]
        for i in range(j + 1, d):
            acc = 0.0
            for k in range(j, i):
                acc -= chol[i, k] * linv[k, j]
            linv[i, j] = acc / chol[i, i]
    for a in range(d):
        for b in range(a + 1):
            acc = 0.0
            for k in range(a, d):
                acc += linv[k, a] * linv[k, b]
            out[a, b] = acc
            out[b, a] = acc


@njit(cache=True)
def penalty_total(sigmas, anchors, logdet_anchor, a_n):
    """Sum over components of -a_n {tr(Omega S^-1) - log det(Omega S^-1) - d}."""
    if a_n == 0.0:
        return 0.0
    d = sigmas.shape[1]
    chol = np.zeros((d, d))
    prec = np.zeros((d, d))
    total = 0.0
    for j in range(sigmas.shape[0]):
        if not _cholesky_plain(sigmas[j], chol):
            return -np.inf
        _inverse_from_cholesky(chol, prec)
        tr = 0.0
        logdet = 0.0
        for a in range(d):
            logdet += 2.0 * math.log(chol[a, a])
            for b in range(d):
                tr += anchors[j, a, b] * prec[b, a]
        total += -a_n * (tr - logdet_anchor[j] + logdet - d)
    return total


@njit(cache=True)
def tau_log_penalty(tau):
    return math.log(2.0 * min(tau, 1.0 - tau))


@njit(cache=True)
def _binomial_objective(a, b, tau, tau_pen):
    val = 0.0
    if a > 0.0:
        val += a * math.log(tau)
    if b > 0.0:
        val += b * math.log(1.0 - tau)
    if tau_pen == 1:
        val += tau_log_penalty(tau)
    return val


@njit(cache=True)
def tau_update(a, b, tau_old, tau_pen):
    """Maximize a log(tau) + b log(1 - tau) + p(tau) over (0, 1).

    With p(tau) = log(2 min(tau, 1 - tau)) the objective is concave on each
    half, so the maximizer is the better of the two clipped stationary points.
    """
    if tau_pen == 0:
        if a + b <= 0.0:
            return tau_old
        return min(max(a / (a + b), 1e-300), 1.0 - 1e-16)
    lower = min((a + 1.0) / (a + b + 1.0), 0.5)
    upper = max(a / (a + b + 1.0), 0.5)
    if _binomial_objective(a, b, upper, tau_pen) > _binomial_objective(a, b, lower, tau_pen):
        return upper
    return lower


@njit(cache=True)
def _box_weights(colsum, eps, out):
    m_count = colsum.shape[0]
    lo, hi = 1e-300, 1.0
    for j in range(m_count):
        hi = max(hi, colsum[j] / eps + 1.0)
    for _ in range(300):
        kappa = 0.5 * (lo + hi)
        total = 0.0
        for j in range(m_count):
            total += min(max(colsum[j] / kappa, eps), 1.0 - eps)
        if total > 1.0:
            lo = kappa
        else:
            hi = kappa
    total = 0.0
    for j in range(m_count):
        out[j] = min(max(colsum[j] / hi, eps), 1.0 - eps)
        total += out[j]
    for j in range(m_count):
        out[j] /= total


@njit(cache=True)
def _solve_gamma(x, z, w, mus, precs, gamma):
    n, d = x.shape
    p = z.shape[1]
    size = d * p
    lhs = np.zeros((size, size))
    rhs = np.zeros(size)
    for j in range(mus.shape[0]):
        zz = np.zeros((p, p))
        rz = np.zeros((d, p))
        for i in range(n):
            wij = w[i, j]
            for k in range(p):
                for l in range(p):
                    zz[k, l] += wij * z[i, k] * z[i, l]
                for a in range(d):
                    rz[a, k] += wij * (x[i, a] - mus[j, a]) * z[i, k]
        pr = precs[j] @ rz
        for k in range(p):
            for a in range(d):
                rhs[k * d + a] += pr[a, k]
                for l in range(p):
                    for b in range(d):
                        lhs[k * d + a, l * d + b] += zz[k, l] * precs[j, a, b]
    g = np.linalg.solve(lhs, rhs)  # small (d p) system
    for k in range(p):
        for a in range(d):
            gamma[a, k] = g[k * d + a]


@njit(cache=True)
def _project_mean(mean, sigma, lo, hi, c):
    """Conditional maximizer of the mean when coordinate ``c`` is clipped to [lo, hi]."""
    target = min(max(mean[c], lo), hi)
    if target != mean[c]:
        shift = target - mean[c]
        for a in range(mean.shape[0]):
            mean[a] += sigma[a, c] / sigma[c, c] * shift
        mean[c] = target


@njit(cache=True)
def m_step(x, z, y, w, colsum, s1, s2, alphas, mus, sigmas, gamma, anchors, a_n, shared, mode,
           m, tau, tau_pen, lo, hi, box_coord, eps, guard_floor):
    """One M-step in place; returns (tau, status, guard_events).

    Without covariates everything comes from the statistics gathered by
    :func:`e_step`; with covariates the weights ``w`` are used directly.
    """
    n, d = x.shape
    m_count = mus.shape[0]
    p = z.shape[1]
    if p > 0:
        for j in range(m_count):
            acc = 0.0
            for i in range(n):
                acc += w[i, j]
            colsum[j] = acc
    for j in range(m_count):
        if colsum[j] < 1e-10 and (a_n == 0.0 or shared):
            return tau, STATUS_EMPTY_COMPONENT, 0

    # mixing weights
    if mode == MODE_WEIGHT_BOX:
        _box_weights(colsum, eps, alphas)
    else:
        for j in range(m_count):
            alphas[j] = colsum[j] / n
        if mode == MODE_FIXED_RATIO or mode == MODE_TAU_UPDATE:
            pair = (colsum[m] + colsum[m + 1]) / n
            if mode == MODE_TAU_UPDATE:
                tau = tau_update(colsum[m], colsum[m + 1], tau, tau_pen)
            alphas[m] = tau * pair
            alphas[m + 1] = (1.0 - tau) * pair

    scat = np.zeros((m_count, d, d))
    mean = np.zeros(d)
    work = np.zeros((d, d))
    if p == 0:
        # scatter about the new mean from moments about the old one
        for j in range(m_count):
            if colsum[j] <= 1e-300:
                continue
            for a in range(d):
                mean[a] = mus[j, a] + s1[j, a] / colsum[j]
            _project_mean(mean, sigmas[j], lo[j], hi[j], box_coord)
            for a in range(d):
                da = mean[a] - mus[j, a]
                for b in range(a + 1):
                    db = mean[b] - mus[j, b]
                    scat[j, a, b] = (s2[j, a, b] - da * s1[j, b] - s1[j, a] * db
                                     + colsum[j] * da * db)
            for a in range(d):
                mus[j, a] = mean[a]
    else:
        # block coordinate descent over means and coefficients, old covariances as metric
        precs = np.zeros((m_count, d, d))
        for j in range(m_count):
            if not _cholesky_plain(sigmas[j], work):
                return tau, STATUS_NOT_SPD, 0
            _inverse_from_cholesky(work, precs[j])
        for _ in range(_BCD_ROUNDS):
            for j in range(m_count):
                if colsum[j] <= 1e-300:
                    continue
                mean[:] = 0.0
                for i in range(n):
                    for a in range(d):
                        mean[a] += w[i, j] * y[i, a]
                for a in range(d):
                    mean[a] /= colsum[j]
                _project_mean(mean, sigmas[j], lo[j], hi[j], box_coord)
                for a in range(d):
                    mus[j, a] = mean[a]
            _solve_gamma(x, z, w, mus, precs, gamma)
            residuals(x, z, gamma, y)
        for j in range(m_count):
            for i in range(n):
                for a in range(d):
                    ra = w[i, j] * (y[i, a] - mus[j, a])
                    for b in range(a + 1):
                        scat[j, a, b] += ra * (y[i, b] - mus[j, b])

    # covariances
    guard = 0
    if shared:
        for a in range(d):
            for b in range(a + 1):
                acc = 0.0
                for j in range(m_count):
                    acc += scat[j, a, b]
                for j in range(m_count):
                    sigmas[j, a, b] = acc / n
                    sigmas[j, b, a] = acc / n
    else:
        for j in range(m_count):
            denom = 2.0 * a_n + colsum[j]
            for a in range(d):
                for b in range(a + 1):
                    val = (2.0 * a_n * anchors[j, a, b] + scat[j, a, b]) / denom
                    sigmas[j, a, b] = val
                    sigmas[j, b, a] = val
    for j in range(m_count):
        if shared and j > 0:
            sigmas[j] = sigmas[0]
            continue
        # the shifted matrix is positive definite iff every eigenvalue exceeds the floor
        for a in range(d):
            for b in range(d):
                work[a, b] = sigmas[j, a, b]
            work[a, a] -= guard_floor[j]
        if not _cholesky_plain(work, work):
            for a in range(d):
                sigmas[j, a, a] += guard_floor[j]
            guard += 1
    return tau, STATUS_OK, guard


@njit(cache=True)
def objective(loglik, sigmas, anchors, logdet_anchor, a_n, shared, mode, tau, tau_pen):
    val = loglik
    if not shared:
        val += penalty_total(sigmas, anchors, logdet_anchor, a_n)
    if (mode == MODE_FIXED_RATIO or mode == MODE_TAU_UPDATE) and tau_pen == 1:
        val += tau_log_penalty(tau)
    return val


@njit(cache=True)
def em_loop(x, z, alphas, mus, sigmas, gamma, anchors, logdet_anchor, a_n, shared, mode, m,
            tau, tau_pen, lo, hi, box_coord, eps, guard_floor, max_iter, rel_tol, hist):
    """Run up to ``max_iter`` EM updates.

    Returns (n_done, converged, status, tau, guard_events, loglik).
    """
    n, d = x.shape
    m_count = mus.shape[0]
    y = np.empty((n, d))
    residuals(x, z, gamma, y)
    w = np.empty((n, m_count))
    colsum = np.zeros(m_count)
    s1 = np.zeros((m_count, d))
    s2 = np.zeros((m_count, d, d))
    accumulate = z.shape[1] == 0
    loglik, status = e_step(y, alphas, mus, sigmas, w, colsum, s1, s2, accumulate)
    if status != STATUS_OK:
        return 0, False, status, tau, 0, loglik
    current = objective(loglik, sigmas, anchors, logdet_anchor, a_n, shared, mode, tau, tau_pen)
    hist[0] = current
    guard_total = 0
    for it in range(1, max_iter + 1):
        tau, status, guard = m_step(x, z, y, w, colsum, s1, s2, alphas, mus, sigmas, gamma,
                                    anchors, a_n, shared, mode, m, tau, tau_pen, lo, hi,
                                    box_coord, eps, guard_floor)
        guard_total += guard
        if status != STATUS_OK:
            return it - 1, False, status, tau, guard_total, loglik
        loglik, status = e_step(y, alphas, mus, sigmas, w, colsum, s1, s2, accumulate)
        if status != STATUS_OK:
            return it, False, status, tau, guard_total, loglik
        new = objective(loglik, sigmas, anchors, logdet_anchor, a_n, shared, mode, tau, tau_pen)
        hist[it] = new
        if abs(new - current) <= rel_tol * abs(current):
            return it, True, STATUS_OK, tau, guard_total, loglik
        current = new
    return max_iter, False, STATUS_OK, tau, guard_total, loglik
