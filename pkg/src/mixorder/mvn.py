"""Multivariate normal density, covariance vectorization and mean derivatives.

All derivative routines use 0-based coordinate indices. Derivatives of the
density with respect to the mean are written as ``f * H(x)`` where ``H`` is a
multivariate Hermite-type polynomial in ``u = inv(sigma) @ (x - mu)`` with
coefficients from ``inv(sigma)``. The polynomial is assembled from tables of
index pairings, so nothing is differentiated symbolically at run time.

The covariance vectorization ``w`` stacks the upper triangle row by row and
doubles the off-diagonal entries::

    w(A) = (A11, 2 A12, ..., 2 A1d, A22, 2 A23, ..., Add)

With that convention a derivative in a ``v`` coordinate equals one half of the
matching second mean derivative, for diagonal and off-diagonal slots alike.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import ArgumentError, DomainError

LOG_2PI = math.log(2.0 * math.pi)
MAX_ORDER = 6
_PIVOT_RTOL = 1e-12
_SYM_RTOL = 1e-12


# ---------------------------------------------------------------------------
# factorization and density


def spd_cholesky(sigma: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix, rejecting near-singular input.

    Raises:
        DomainError: if ``sigma`` is not symmetric, the factorization fails, or
            the smallest squared pivot is below ``1e-12 * trace / d``.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ArgumentError(f"covariance must be square, got shape {sigma.shape}")
    if not np.all(np.isfinite(sigma)):
        raise DomainError("covariance has non-finite entries")
    scale = max(np.max(np.abs(sigma)), 1e-300)
    if np.max(np.abs(sigma - sigma.T)) > _SYM_RTOL * scale:
        raise DomainError("covariance is not symmetric")
    d = sigma.shape[0]
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise DomainError("covariance is not positive definite") from exc
    floor = _PIVOT_RTOL * np.trace(sigma) / d
    if np.min(np.diag(chol)) ** 2 < floor:
        raise DomainError("covariance is numerically singular")
    return chol


def _as_rows(x: np.ndarray, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    x2 = np.atleast_2d(x) if x.ndim else x.reshape(1, 1)
    if d == 1 and x.ndim == 1 and x.shape[0] != 1:
        # a flat vector of scalar observations
        x2, single = x.reshape(-1, 1), False
    if x2.shape[1] != d:
        raise ArgumentError(f"observation dimension {x2.shape[1]} does not match d={d}")
    return x2, single


def _residual(x, mu, z=None, gamma=None):
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    rows, single = _as_rows(x, mu.shape[0])
    resid = rows - mu
    if gamma is not None:
        if z is None:
            raise ArgumentError("gamma given without covariates z")
        gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
        zrows = np.atleast_2d(np.asarray(z, dtype=float))
        if zrows.shape[0] == 1 and rows.shape[0] > 1:
            zrows = np.repeat(zrows, rows.shape[0], axis=0)
        if gamma.shape != (mu.shape[0], zrows.shape[1]) or zrows.shape[0] != rows.shape[0]:
            raise ArgumentError("gamma must be d x p and z must have one row per observation")
        resid = resid - zrows @ gamma.T
    return resid, single


def logpdf(x, mu, sigma, z=None, gamma=None):
    """Log density of N(mu + gamma z, sigma) at ``x``.

    ``x`` may be a single point of length d or an ``(n, d)`` array; the result
    is a float or a length-n array accordingly.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    chol = spd_cholesky(sigma)
    resid, single = _residual(x, mu, z, gamma)
    if resid.shape[1] != sigma.shape[0]:
        raise ArgumentError("mean and covariance dimensions differ")
    sol = linalg.solve_triangular(chol, resid.T, lower=True)
    quad = np.sum(sol * sol, axis=0)
    d = sigma.shape[0]
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * (d * LOG_2PI + logdet + quad)
    return float(out[0]) if single else out


def density(x, mu, sigma, z=None, gamma=None):
    """Density of N(mu + gamma z, sigma) at ``x``, via the log density."""
    return np.exp(logpdf(x, mu, sigma, z, gamma))


# ---------------------------------------------------------------------------
# covariance vectorization


def vech_pairs(d: int) -> list[tuple[int, int]]:
    """Index pairs ``(i, j)`` with ``i <= j`` in row-major upper-triangle order."""
    return [(i, j) for i in range(d) for j in range(i, d)]


def dim_from_vlen(length: int) -> int:
    d = int(round((math.sqrt(8 * length + 1) - 1) / 2))
    if d < 1 or d * (d + 1) // 2 != length:
        raise ArgumentError(f"length {length} is not a triangular number")
    return d


def w_of_sigma(sigma: np.ndarray) -> np.ndarray:
    """Upper triangle of a symmetric matrix with doubled off-diagonal entries."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if sigma.shape[0] != sigma.shape[1]:
        raise ArgumentError("matrix must be square")
    scale = max(np.max(np.abs(sigma)), 1e-300)
    if np.max(np.abs(sigma - sigma.T)) > _SYM_RTOL * scale:
        raise ArgumentError("matrix is not symmetric")
    rows, cols = np.triu_indices(sigma.shape[0])
    v = sigma[rows, cols].copy()
    v[rows != cols] *= 2.0
    return v


def sigma_of_v(v: Sequence[float]) -> np.ndarray:
    """Inverse of :func:`w_of_sigma`."""
    v = np.asarray(v, dtype=float).ravel()
    d = dim_from_vlen(v.shape[0])
    rows, cols = np.triu_indices(d)
    vals = np.where(rows == cols, v, v / 2.0)
    out = np.zeros((d, d))
    out[rows, cols] = vals
    out[cols, rows] = vals
    return out


def w_outer(lam: np.ndarray) -> np.ndarray:
    """``w(lam lam')`` for a vector or a stack of vectors (last axis)."""
    lam = np.asarray(lam, dtype=float)
    d = lam.shape[-1]
    rows, cols = np.triu_indices(d)
    out = lam[..., rows] * lam[..., cols]
    return out * np.where(rows == cols, 1.0, 2.0)


# ---------------------------------------------------------------------------
# pairing tables
#
# A term is (sign, pairs, singles) over positions of the index tuple and stands
# for sign * prod(P[i_a, i_b] for (a, b) in pairs) * prod(u[i_l] for l in singles),
# with P = inv(sigma) and u = P (x - mu).


def _pairings(positions: tuple[int, ...]):
    """Every split of ``positions`` into disjoint pairs and leftover singletons."""
    if not positions:
        yield (), ()
        return
    head, rest = positions[0], positions[1:]
    for pairs, singles in _pairings(rest):
        yield pairs, (head,) + singles
    for k, other in enumerate(rest):
        remaining = rest[:k] + rest[k + 1 :]
        for pairs, singles in _pairings(remaining):
            yield ((head, other),) + pairs, singles


def _even_table(order: int):
    return tuple(
        ((-1) ** len(pairs), pairs, singles) for pairs, singles in _pairings(tuple(range(order)))
    )


def _differentiate(table, new_pos: int):
    """Product rule step: d/dmu_t of f * H, using du_l/dmu_t = -P[l, t]."""
    out = []
    for sign, pairs, singles in table:
        out.append((sign, pairs, singles + (new_pos,)))
        for l in singles:
            rest = tuple(s for s in singles if s != l)
            out.append((-sign, pairs + ((l, new_pos),), rest))
    return tuple(out)


PAIRING_TABLES: dict[int, tuple] = {0: (((1, (), ())),)}
for _k in (2, 4, 6):
    PAIRING_TABLES[_k] = _even_table(_k)
for _k in (1, 3, 5):
    PAIRING_TABLES[_k] = _differentiate(PAIRING_TABLES[_k - 1], _k - 1)
del _k


def _precision_and_u(x, mu, sigma):
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    chol = spd_cholesky(sigma)
    resid, single = _residual(x, mu)
    prec = linalg.cho_solve((chol, True), np.eye(sigma.shape[0]))
    prec = 0.5 * (prec + prec.T)
    return prec, resid @ prec, single


def _check_index(idx, d):
    idx = tuple(int(i) for i in idx)
    if not 1 <= len(idx) <= MAX_ORDER:
        raise ArgumentError(f"derivative order must be between 1 and {MAX_ORDER}, got {len(idx)}")
    if any(i < 0 or i >= d for i in idx):
        raise ArgumentError(f"index out of range for d={d}: {idx}")
    return idx


def _poly(prec, u, idx):
    total = np.zeros(u.shape[0])
    for sign, pairs, singles in PAIRING_TABLES[len(idx)]:
        coef = float(sign)
        for a, b in pairs:
            coef *= prec[idx[a], idx[b]]
        if coef == 0.0:
            continue
        term = np.full(u.shape[0], coef)
        for l in singles:
            term = term * u[:, idx[l]]
        total += term
    return total


def mu_derivative_ratio(x, mu, sigma, idx: Sequence[int]):
    """Mean derivative of the density divided by the density itself."""
    prec, u, single = _precision_and_u(x, mu, sigma)
    idx = _check_index(idx, prec.shape[0])
    out = _poly(prec, u, idx)
    return float(out[0]) if single else out


def mu_derivative_ratios(x, mu, sigma, indices) -> np.ndarray:
    """Ratios for several index tuples at once, one column per tuple.

    ``x`` is an ``(n, d)`` array; the precision and residuals are computed once.
    """
    prec, u, _ = _precision_and_u(np.atleast_2d(x), mu, sigma)
    d = prec.shape[0]
    out = np.empty((u.shape[0], len(indices)))
    for col, idx in enumerate(indices):
        out[:, col] = _poly(prec, u, _check_index(idx, d))
    return out


def mu_derivative(x, mu, sigma, idx: Sequence[int]):
    """Partial derivative of the density in the mean coordinates ``idx``.

    Args:
        x: point of length d, or an ``(n, d)`` array of points.
        mu: mean vector.
        sigma: covariance matrix.
        idx: 0-based coordinate indices, 1 to 6 of them; order is irrelevant.
    """
    prec, u, single = _precision_and_u(x, mu, sigma)
    idx = _check_index(idx, prec.shape[0])
    out = _poly(prec, u, idx) * density(x, mu, sigma)
    return float(np.ravel(out)[0]) if single else out


def _check_pairs(pairs, d):
    out = []
    for pair in pairs:
        i, j = (int(t) for t in pair)
        if not (0 <= i < d and 0 <= j < d):
            raise ArgumentError(f"pair {pair} out of range for d={d}")
        out.append((min(i, j), max(i, j)))
    return out


def v_derivative(x, mu, sigma, pairs, mixed_mu: Sequence[int] = ()):
    """Derivative in the ``v`` coordinates ``pairs`` (optionally mixed with means).

    Each pair ``(i, j)`` names the slot ``v_ij`` of :func:`w_of_sigma`. The
    value is ``2**-len(pairs)`` times the mean derivative over all indices.
    """
    d = np.atleast_2d(np.asarray(sigma)).shape[0]
    pairs = _check_pairs(pairs, d)
    idx = [t for pair in pairs for t in pair] + [int(t) for t in mixed_mu]
    return mu_derivative(x, mu, sigma, idx) * 0.5 ** len(pairs)


def _slot_matrix(pair, d):
    i, j = pair
    e = np.zeros((d, d))
    if i == j:
        e[i, i] = 1.0
    else:
        e[i, j] = e[j, i] = 0.5
    return e


@lru_cache(maxsize=None)
def _set_partitions(n: int):
    """All set partitions of ``range(n)`` as tuples of blocks."""
    if n == 0:
        return ((),)
    out = []
    for part in _set_partitions(n - 1):
        out.append(part + ((n - 1,),))
        for k in range(len(part)):
            out.append(part[:k] + (part[k] + (n - 1,),) + part[k + 1 :])
    return tuple(out)


def v_derivative_direct(x, mu, sigma, pairs):
    """Pure ``v`` derivative computed from matrix calculus on the log density.

    Independent of the pairing tables: derivatives of ``log det S(v)`` and of
    ``r' inv(S(v)) r`` are expanded over orderings of the slot matrices and
    combined through the set-partition form of the chain rule.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    d = sigma.shape[0]
    pairs = _check_pairs(pairs, d)
    if not 1 <= len(pairs) <= 3:
        raise ArgumentError("direct route supports one to three v coordinates")
    prec, u, single = _precision_and_u(x, mu, sigma)
    mats = [prec @ _slot_matrix(p, d) for p in pairs]  # P E_k
    slot = [_slot_matrix(p, d) for p in pairs]

    def logdet_deriv(block):
        first, rest = block[0], block[1:]
        total = 0.0
        for perm in itertools.permutations(rest):
            prod = mats[first]
            for k in perm:
                prod = prod @ mats[k]
            total += np.trace(prod)
        return (-1) ** (len(block) - 1) * total

    def quad_deriv(block):
        total = np.zeros(u.shape[0])
        for perm in itertools.permutations(block):
            # u' E_a P E_b P ... E_z u
            mat = slot[perm[0]]
            for k in perm[1:]:
                mat = mat @ prec @ slot[k]
            total += np.einsum("ni,ij,nj->n", u, mat, u)
        return (-1) ** len(block) * total

    def log_f_deriv(block):
        return -0.5 * logdet_deriv(block) - 0.5 * quad_deriv(block)

    ratio = np.zeros(u.shape[0])
    for part in _set_partitions(len(pairs)):
        term = np.ones(u.shape[0])
        for block in part:
            term = term * log_f_deriv(block)
        ratio += term
    out = ratio * density(x, mu, sigma)
    return float(out[0]) if single else out


def multi_indices(d: int, order: int) -> list[tuple[int, ...]]:
    """Non-decreasing index tuples ``i <= j <= ...`` of the given length."""
    return list(itertools.combinations_with_replacement(range(d), order))


# ---------------------------------------------------------------------------
# self checks


def random_spd(d: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((d, d))
    return a @ a.T / d + 0.5 * np.eye(d)


def _rel_err(a, b, scale):
    return float(np.max(np.abs(a - b) / (np.abs(b) + scale)))


def identity_errors(n_cases: int = 100, seed: int = 0, fd_step: float = 1e-4) -> dict:
    """Largest relative errors of the derivative cross-checks over random cases.

    * ``v_vs_direct``: v derivatives from the mean tables against matrix
      calculus on the log density;
    * ``mu_fd``: each mean derivative of order k against a central difference
      of the analytic order k - 1 derivative;
    * ``v_fd``: each v derivative against a central difference in v.

    Absolute noise is measured against 1e-8 times the density at the point.
    """
    rng = np.random.default_rng(seed)
    worst = {"v_vs_direct": 0.0, "mu_fd": 0.0, "v_fd": 0.0}
    for _ in range(n_cases):
        d = int(rng.integers(1, 4))
        sigma = random_spd(d, rng)
        mu = rng.standard_normal(d)
        x = mu + rng.standard_normal((3, d)) @ np.linalg.cholesky(sigma).T
        scale = 1e-8 * density(x, mu, sigma)
        pairs = vech_pairs(d)
        chosen = [pairs[i] for i in rng.integers(0, len(pairs), int(rng.integers(1, 4)))]
        worst["v_vs_direct"] = max(worst["v_vs_direct"], _rel_err(
            v_derivative(x, mu, sigma, chosen), v_derivative_direct(x, mu, sigma, chosen), scale))
        order = int(rng.integers(1, 5))
        idx = [int(i) for i in rng.integers(0, d, order)]
        step = np.zeros(d)
        step[idx[-1]] = fd_step
        if order == 1:
            lower = lambda m: density(x, m, sigma)
        else:
            lower = lambda m: mu_derivative(x, m, sigma, idx[:-1])
        fd = (lower(mu + step) - lower(mu - step)) / (2 * fd_step)
        worst["mu_fd"] = max(worst["mu_fd"], _rel_err(mu_derivative(x, mu, sigma, idx), fd, scale))
        e = int(rng.integers(0, len(pairs)))
        v0 = w_of_sigma(sigma)
        dv = np.zeros_like(v0)
        dv[e] = fd_step
        fd_v = (density(x, mu, sigma_of_v(v0 + dv)) - density(x, mu, sigma_of_v(v0 - dv))) / (
            2 * fd_step)
        worst["v_fd"] = max(worst["v_fd"], _rel_err(v_derivative(x, mu, sigma, [pairs[e]]), fd_v,
                                                    scale))
    return worst
