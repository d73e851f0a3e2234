"""Limit distributions of the order tests and the algebra behind them.

Contents:

* scores of the split-component model (heteroscedastic and common-covariance)
  and Monte Carlo estimates of their information matrices;
* the cone maps, a batched Levenberg-Marquardt projection onto each cone and
  simulation of the limiting null distributions;
* the reparameterization of a two-component split and finite-difference
  checks of which of its derivatives vanish at the null.

Multi-indices are non-decreasing tuples ``i <= j <= k (<= l)``, enumerated
lexicographically. Components are indexed from 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import permutations, product

import numpy as np
from scipy.special import logsumexp
from scipy.stats import qmc

from . import mvn
from .errors import ArgumentError, ConditioningError, NumericError
from .mixture import MixtureParams, sample

VARIANTS = ("hetero", "homo")
CONE_VARIANTS = ("hetero_j1", "hetero_j2", "homo_j1", "homo_j2")
COND_LIMIT = 1e12
GRID_JITTER = 1e-10
DEFAULT_RADII = (0.25, 0.5, 1.0, 1.5, 2.0)


# ---------------------------------------------------------------------------
# exact constants


def c1(alpha):
    return -Fraction(1, 3) * (1 + alpha)


def c2(alpha):
    return Fraction(1, 3) * (2 - alpha)


def b_coef(alpha):
    """Quartic coefficient -(2/3)(alpha^2 - alpha + 1); exact for Fraction input."""
    return -Fraction(2, 3) * (alpha * alpha - alpha + 1)


def homo_cubic_factor(alpha):
    return 1 - 2 * alpha


def homo_quartic_factor(alpha):
    return 1 - 6 * alpha + 6 * alpha * alpha


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise ArgumentError("alpha must lie in (0, 1)")


# ---------------------------------------------------------------------------
# reparameterizations


def reparam_hetero(nu_mu, nu_v, lambda_mu, lambda_v, alpha):
    """Split (nu, lambda) into the two component means and v-vectors."""
    _check_alpha(alpha)
    nu_mu, nu_v = np.asarray(nu_mu, float), np.asarray(nu_v, float)
    lam_mu, lam_v = np.asarray(lambda_mu, float), np.asarray(lambda_v, float)
    a = float(alpha)
    sq = mvn.w_outer(lam_mu)
    mu1 = nu_mu + (1 - a) * lam_mu
    mu2 = nu_mu - a * lam_mu
    v1 = nu_v + (1 - a) * (2 * lam_v + float(c1(alpha)) * sq)
    v2 = nu_v - a * (2 * lam_v + float(c2(alpha)) * sq)
    return mu1, mu2, v1, v2


def reparam_hetero_inverse(mu1, mu2, v1, v2, alpha):
    """Inverse of :func:`reparam_hetero`: returns (nu_mu, nu_v, lambda_mu, lambda_v)."""
    _check_alpha(alpha)
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    v1, v2 = np.asarray(v1, float), np.asarray(v2, float)
    a = float(alpha)
    lam_mu = mu1 - mu2
    sq = mvn.w_outer(lam_mu)
    nu_mu = a * mu1 + (1 - a) * mu2
    nu_v = a * v1 + (1 - a) * v2 + a * (1 - a) * sq
    lam_v = 0.5 * (v1 - v2 - ((2 * a - 1) / 3) * sq)
    return nu_mu, nu_v, lam_mu, lam_v


def reparam_homo(nu_mu, nu_v, lam, alpha):
    """Split with a shared covariance: returns (mu1, mu2, v)."""
    _check_alpha(alpha)
    nu_mu, nu_v, lam = (np.asarray(t, float) for t in (nu_mu, nu_v, lam))
    a = float(alpha)
    return nu_mu + (1 - a) * lam, nu_mu - a * lam, nu_v - a * (1 - a) * mvn.w_outer(lam)


def reparam_homo_inverse(mu1, mu2, v, alpha):
    _check_alpha(alpha)
    mu1, mu2, v = (np.asarray(t, float) for t in (mu1, mu2, v))
    a = float(alpha)
    lam = mu1 - mu2
    return a * mu1 + (1 - a) * mu2, v + a * (1 - a) * mvn.w_outer(lam), lam


def split_density_hetero(x, nu_mu, nu_v, lambda_mu, lambda_v, alpha):
    """Two-component density written in the split coordinates."""
    mu1, mu2, v1, v2 = reparam_hetero(nu_mu, nu_v, lambda_mu, lambda_v, alpha)
    return (alpha * mvn.density(x, mu1, mvn.sigma_of_v(v1))
            + (1 - alpha) * mvn.density(x, mu2, mvn.sigma_of_v(v2)))


def split_density_homo(x, nu_mu, nu_v, lam, alpha):
    mu1, mu2, v = reparam_homo(nu_mu, nu_v, lam, alpha)
    sigma = mvn.sigma_of_v(v)
    return alpha * mvn.density(x, mu1, sigma) + (1 - alpha) * mvn.density(x, mu2, sigma)


# ---------------------------------------------------------------------------
# score vectors


def _dims(d):
    return d * (d + 1) // 2, len(mvn.multi_indices(d, 3)), len(mvn.multi_indices(d, 4))


@dataclass(frozen=True)
class ScoreLayout:
    """Positions of the score blocks.

    The score vector is ``[eta | lambda | alpha-grid]``. ``eta`` holds the
    weight scores, the covariate coefficients (row-major), then per
    component the mean and v scores (heteroscedastic) or all means followed
    by one shared v block (common covariance). ``lambda`` holds, for each
    component, the cubic block followed by the quartic block.
    """

    variant: str
    d: int
    M0: int
    p: int
    n_grid: int = 0

    @property
    def dv(self) -> int:
        return _dims(self.d)[0]

    @property
    def d_cubic(self) -> int:
        return _dims(self.d)[1]

    @property
    def d_quartic(self) -> int:
        return _dims(self.d)[2]

    @property
    def eta_dim(self) -> int:
        base = (self.M0 - 1) + self.p * self.d
        if self.variant == "hetero":
            return base + self.M0 * (self.d + self.dv)
        return base + self.M0 * self.d + self.dv

    @property
    def block_dim(self) -> int:
        return self.d_cubic + self.d_quartic

    @property
    def lambda_dim(self) -> int:
        return self.M0 * self.block_dim

    @property
    def alpha_dim(self) -> int:
        return self.M0 * self.n_grid if self.variant == "homo" else 0

    @property
    def total_dim(self) -> int:
        return self.eta_dim + self.lambda_dim + self.alpha_dim

    def component_block(self, m: int) -> slice:
        """Slice of component ``m`` within the lambda part."""
        return slice(m * self.block_dim, (m + 1) * self.block_dim)

    def alpha_block(self, m: int) -> slice:
        """Slice of component ``m``'s grid scores within the alpha part."""
        return slice(m * self.n_grid, (m + 1) * self.n_grid)


def _component_pieces(x, z, params: MixtureParams):
    """Residuals, per-component weights alpha_m f_m / f0 and log f0."""
    x = np.atleast_2d(np.asarray(x, float))
    resid = x if params.gamma is None else x - np.asarray(z, float) @ params.gamma.T
    logw = np.column_stack([
        np.log(params.alphas[m]) + mvn.logpdf(resid, params.mus[m], params.sigmas[m])
        for m in range(params.M)
    ])
    logf0 = logsumexp(logw, axis=1)
    return resid, np.exp(logw - logf0[:, None]), logf0


def _alpha_grid_scores(resid, mu, sigma, omega, grid):
    """omega * (Taylor remainder of order 3 of f(mu + lam) / f) / |lam|^3, one column per lam."""
    prec = np.linalg.inv(sigma)
    u = (resid - mu) @ prec
    s = u @ grid.T
    q = np.einsum("ga,ab,gb->g", grid, prec, grid)
    delta = s - 0.5 * q
    remainder = np.expm1(delta) - s - 0.5 * s * s + 0.5 * q
    return omega[:, None] * remainder / np.linalg.norm(grid, axis=1) ** 3


def score_matrix(x, z, theta_star: MixtureParams, variant: str = "hetero", lambda_grid=None):
    """Scores at each row of ``x``; returns (matrix, layout).

    ``lambda_grid`` (G, d) is used by the common-covariance variant only and
    must not contain the origin.
    """
    if variant not in VARIANTS:
        raise ArgumentError(f"variant must be one of {VARIANTS}")
    params = theta_star
    d, M0, p = params.d, params.M, params.p
    x = np.atleast_2d(np.asarray(x, float))
    if x.shape[1] != d:
        raise ArgumentError(f"expected {d} columns, got {x.shape[1]}")
    if p and (z is None or np.shape(z) != (x.shape[0], p)):
        raise ArgumentError("covariate rows must match x")
    if variant == "homo" and not np.allclose(params.sigmas, params.sigmas[0], rtol=1e-12, atol=0):
        raise ArgumentError("the common-covariance scores need equal component covariances")
    grid = None
    if variant == "homo" and lambda_grid is not None:
        grid = np.atleast_2d(np.asarray(lambda_grid, float))
        if grid.shape[1] != d or np.any(np.linalg.norm(grid, axis=1) == 0):
            raise ArgumentError("lambda grid must have d columns and exclude the origin")
    layout = ScoreLayout(variant, d, M0, p, 0 if grid is None else grid.shape[0])
    resid, omega, _ = _component_pieces(x, z, params)
    pairs = mvn.vech_pairs(d)
    idx1 = [(a,) for a in range(d)]
    idx3 = mvn.multi_indices(d, 3)
    idx4 = mvn.multi_indices(d, 4)
    n = x.shape[0]

    weight_block = [omega[:, j] / params.alphas[j] - omega[:, -1] / params.alphas[-1]
                    for j in range(M0 - 1)]
    gamma_block = np.zeros((n, d, p))
    per_comp_eta, mean_blocks, lam_blocks, alpha_blocks = [], [], [], []
    shared_v = np.zeros((n, len(pairs)))
    for m in range(M0):
        ratios = mvn.mu_derivative_ratios(resid, params.mus[m], params.sigmas[m],
                                          idx1 + pairs + idx3 + idx4)
        w = omega[:, m : m + 1]
        first = ratios[:, :d] * w
        second = 0.5 * ratios[:, d : d + len(pairs)] * w
        third = ratios[:, d + len(pairs) : d + len(pairs) + len(idx3)] * w / 6.0
        fourth = ratios[:, d + len(pairs) + len(idx3) :] * w / 24.0
        if p:
            gamma_block += first[:, :, None] * z[:, None, :]
        if variant == "hetero":
            per_comp_eta += [first, second]
        else:
            mean_blocks.append(first)
            shared_v += second
        lam_blocks += [third, fourth]
        if grid is not None:
            alpha_blocks.append(
                _alpha_grid_scores(resid, params.mus[m], params.sigmas[m], omega[:, m], grid)
            )
    eta = [np.column_stack(weight_block)] if weight_block else []
    if p:
        eta.append(gamma_block.reshape(n, d * p))
    eta += per_comp_eta if variant == "hetero" else mean_blocks + [shared_v]
    out = np.hstack(eta + lam_blocks + alpha_blocks)
    assert out.shape[1] == layout.total_dim
    return out, layout


def hetero_scores(x, z, theta_star: MixtureParams) -> np.ndarray:
    """Heteroscedastic scores ``[eta | lambda]``, one row per observation."""
    return score_matrix(x, z, theta_star, "hetero")[0]


def homo_scores(x, z, theta_star: MixtureParams, lambda_grid=None):
    """Common-covariance scores; returns (``[eta | lambda]``, alpha-grid scores)."""
    out, layout = score_matrix(x, z, theta_star, "homo", lambda_grid)
    split = layout.eta_dim + layout.lambda_dim
    return out[:, :split], out[:, split:]


def default_lambda_grid(sigma, n_directions: int | None = None, radii=DEFAULT_RADII):
    """Directions times radii scaled by sqrt(tr(sigma) / d).

    d = 1 uses the two signs, d = 2 uses ``n_directions`` (default 16) equally
    spaced angles and higher dimensions use Halton points pushed to the sphere.
    """
    sigma = np.atleast_2d(np.asarray(sigma, float))
    d = sigma.shape[0]
    scale = math.sqrt(np.trace(sigma) / d)
    if d == 1:
        dirs = np.array([[1.0], [-1.0]])
    elif d == 2:
        k = n_directions or 16
        ang = 2 * np.pi * np.arange(k) / k
        dirs = np.column_stack([np.cos(ang), np.sin(ang)])
    else:
        from scipy.stats import norm

        k = n_directions or 16 * 2 ** (d - 2)
        pts = qmc.Halton(d, scramble=False).random(k + 1)[1:]
        dirs = norm.ppf(np.clip(pts, 1e-9, 1 - 1e-9))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.vstack([r * scale * dirs for r in radii])


# ---------------------------------------------------------------------------
# information matrices


@dataclass(frozen=True)
class ScoreSystem:
    """Monte Carlo information of the score vector at a null model.

    ``target`` below means the lambda part followed by the alpha-grid part.
    ``i_target_dot_eta`` is the covariance of the target scores after
    regressing out the eta scores; ``i_lambda_dot_eta`` is its lambda block.
    """

    layout: ScoreLayout
    info: np.ndarray
    i_eta: np.ndarray
    i_lambda: np.ndarray
    i_lambda_eta: np.ndarray
    i_lambda_dot_eta: np.ndarray
    i_target_dot_eta: np.ndarray
    score_mean: np.ndarray
    score_se: np.ndarray
    n_mc: int
    theta_star: MixtureParams = field(compare=False)
    lambda_grid: np.ndarray | None = None

    @property
    def d(self):
        return self.layout.d

    @property
    def M0(self):
        return self.layout.M0

    @property
    def p(self):
        return self.layout.p

    @property
    def variant(self):
        return self.layout.variant

    def component_info(self, m: int) -> np.ndarray:
        sl = self.layout.component_block(m)
        return self.i_lambda_dot_eta[sl, sl]


def _schur(info, k):
    """Covariance of the coordinates after k, given the first k."""
    a = info[:k, :k]
    cond = np.linalg.cond(a) if k else 1.0
    if not cond <= COND_LIMIT:
        raise ConditioningError(f"eta information has condition number {cond:.3g} > {COND_LIMIT:g}")
    b = info[k:, :k]
    c = info[k:, k:]
    if k == 0:
        return c.copy()
    out = c - b @ np.linalg.pinv(a, rcond=1e-14, hermitian=True) @ b.T
    return 0.5 * (out + out.T)


def estimate_information(theta_star: MixtureParams, n_mc: int = 100_000, rng=None,
                         variant: str = "hetero", lambda_grid=None, z_rows=None,
                         chunk: int = 20_000) -> ScoreSystem:
    """Average of s s' over ``n_mc`` draws from ``theta_star``.

    For the common-covariance variant the alpha-grid scores use
    ``lambda_grid`` (default :func:`default_lambda_grid`). Covariate rows are
    resampled from ``z_rows`` when the model has covariates.
    """
    if n_mc < 2:
        raise ArgumentError("n_mc must be at least 2")
    rng = np.random.default_rng(rng)
    params = theta_star
    if params.p and z_rows is None:
        raise ArgumentError("models with covariates need z_rows to draw covariates from")
    grid = None
    if variant == "homo":
        grid = default_lambda_grid(params.sigmas[0]) if lambda_grid is None else np.atleast_2d(
            np.asarray(lambda_grid, float))
    total = None
    col_sum = None
    col_sq = None
    done = 0
    layout = None
    while done < n_mc:
        size = min(chunk, n_mc - done)
        zs = None
        if params.p:
            zr = np.asarray(z_rows, float)
            zs = zr[rng.integers(0, zr.shape[0], size)]
        data = sample(params, size, rng, z_rows=zs)
        s, layout = score_matrix(data.x, data.z, params, variant, grid)
        if total is None:
            total = np.zeros((s.shape[1], s.shape[1]))
            col_sum = np.zeros(s.shape[1])
            col_sq = np.zeros(s.shape[1])
        total += s.T @ s
        col_sum += s.sum(axis=0)
        col_sq += (s * s).sum(axis=0)
        done += size
    info = total / n_mc
    info = 0.5 * (info + info.T)
    mean = col_sum / n_mc
    se = np.sqrt(np.maximum(col_sq / n_mc - mean * mean, 0.0) / n_mc)
    k = layout.eta_dim
    lam = slice(k, k + layout.lambda_dim)
    target = _schur(info, k)
    return ScoreSystem(
        layout=layout,
        info=info,
        i_eta=info[:k, :k].copy(),
        i_lambda=info[lam, lam].copy(),
        i_lambda_eta=info[lam, :k].copy(),
        i_lambda_dot_eta=target[: layout.lambda_dim, : layout.lambda_dim].copy(),
        i_target_dot_eta=target,
        score_mean=mean,
        score_se=se,
        n_mc=n_mc,
        theta_star=params,
        lambda_grid=grid,
    )


# ---------------------------------------------------------------------------
# cone maps


def _distinct_perms(multiset):
    return sorted(set(permutations(multiset)))


def _multiplicity_exponents(indices, d):
    mult = np.array([len(_distinct_perms(q)) for q in indices], dtype=float)
    expo = np.zeros((len(indices), d), dtype=int)
    for row, q in enumerate(indices):
        for t in q:
            expo[row, t] += 1
    return mult, expo


def _monomials(lam, mult, expo):
    """mult_q prod_a lam_a^expo[q, a] and its Jacobian, batched over rows of lam."""
    powers = lam[:, None, :] ** expo[None]
    value = mult * np.prod(powers, axis=2)
    n, d = lam.shape
    jac = np.zeros((n, expo.shape[0], d))
    for a in range(d):
        reduced = expo.copy()
        reduced[:, a] = np.maximum(reduced[:, a] - 1, 0)
        jac[:, :, a] = mult * expo[:, a] * np.prod(lam[:, None, :] ** reduced[None], axis=2)
    return value, jac


@dataclass(frozen=True)
class ConeSpec:
    """A cone given as the image of a polynomial map of a free parameter.

    * ``hetero_j1``: lambda = (lambda_mu, lambda_v) -> (lambda_mu_v, lambda_v^2)
    * ``hetero_j2``: lambda -> (lambda_mu_v, -lambda_mu^4)
    * ``homo_j1``: lambda -> (lambda_mu^3, 0)
    * ``homo_j2``: (lambda, c) -> (c lambda_mu^3, -lambda_mu^4)

    Each output entry sums the parameter products over the distinct
    orderings of its multi-index.
    """

    variant: str
    d: int

    def __post_init__(self):
        if self.variant not in CONE_VARIANTS:
            raise ArgumentError(f"cone variant must be one of {CONE_VARIANTS}")
        if self.d < 1:
            raise ArgumentError("d must be positive")
        d = self.d
        pairs = mvn.vech_pairs(d)
        slot = {pr: e for e, pr in enumerate(pairs)}
        idx3, idx4 = mvn.multi_indices(d, 3), mvn.multi_indices(d, 4)
        cross = np.zeros((len(idx3), d, len(pairs)))
        for q, trip in enumerate(idx3):
            for t1, t2, t3 in _distinct_perms(trip):
                if t2 <= t3:
                    cross[q, t1, slot[(t2, t3)]] += 1
        square = np.zeros((len(idx4), len(pairs), len(pairs)))
        for q, quad in enumerate(idx4):
            for t1, t2, t3, t4 in _distinct_perms(quad):
                if t1 <= t2 and t3 <= t4:
                    square[q, slot[(t1, t2)], slot[(t3, t4)]] += 1
        square = 0.5 * (square + np.swapaxes(square, 1, 2))
        object.__setattr__(self, "_cross", cross)
        object.__setattr__(self, "_square", square)
        object.__setattr__(self, "_m3", _multiplicity_exponents(idx3, d))
        object.__setattr__(self, "_m4", _multiplicity_exponents(idx4, d))

    @property
    def dv(self):
        return self.d * (self.d + 1) // 2

    @property
    def param_dim(self) -> int:
        if self.variant.startswith("hetero"):
            return self.d + self.dv
        return self.d + (1 if self.variant == "homo_j2" else 0)

    @property
    def out_dim(self) -> int:
        _, n3, n4 = _dims(self.d)
        return n3 + n4

    @property
    def degrees(self) -> np.ndarray:
        """Scaling exponent per parameter that multiplies the image by s under lambda -> s^e lambda."""
        d, dv = self.d, self.dv
        if self.variant == "hetero_j1":
            return np.full(d + dv, 0.5)
        if self.variant == "hetero_j2":
            return np.r_[np.full(d, 0.25), np.full(dv, 0.75)]
        if self.variant == "homo_j1":
            return np.full(d, 1.0 / 3.0)
        return np.full(d + 1, 0.25)

    def map(self, params) -> np.ndarray:
        return self.map_and_jacobian(params)[0]

    def map_and_jacobian(self, params):
        """Image and Jacobian for a batch of parameters ``(n, param_dim)``."""
        params = np.asarray(params, float)
        single = params.ndim == 1
        params = np.atleast_2d(params)
        n = params.shape[0]
        d = self.d
        n3 = self._cross.shape[0]
        out = np.zeros((n, self.out_dim))
        jac = np.zeros((n, self.out_dim, self.param_dim))
        lam = params[:, :d]
        if self.variant.startswith("hetero"):
            lv = params[:, d:]
            out[:, :n3] = np.einsum("qae,na,ne->nq", self._cross, lam, lv)
            jac[:, :n3, :d] = np.einsum("qae,ne->nqa", self._cross, lv)
            jac[:, :n3, d:] = np.einsum("qae,na->nqe", self._cross, lam)
            if self.variant == "hetero_j1":
                out[:, n3:] = np.einsum("qef,ne,nf->nq", self._square, lv, lv)
                jac[:, n3:, d:] = 2 * np.einsum("qef,nf->nqe", self._square, lv)
            else:
                val, dj = _monomials(lam, *self._m4)
                out[:, n3:] = -val
                jac[:, n3:, :d] = -dj
        else:
            cubic, dcubic = _monomials(lam, *self._m3)
            if self.variant == "homo_j1":
                out[:, :n3] = cubic
                jac[:, :n3, :d] = dcubic
            else:
                c = params[:, d]
                out[:, :n3] = c[:, None] * cubic
                jac[:, :n3, :d] = c[:, None, None] * dcubic
                jac[:, :n3, d] = cubic
                val, dj = _monomials(lam, *self._m4)
                out[:, n3:] = -val
                jac[:, n3:, :d] = -dj
        if single:
            return out[0], jac[0]
        return out, jac


def cones_for(variant: str, d: int) -> tuple[ConeSpec, ConeSpec]:
    return ConeSpec(f"{variant}_j1", d), ConeSpec(f"{variant}_j2", d)


# ---------------------------------------------------------------------------
# projection onto a cone


@dataclass(frozen=True)
class Projection:
    t_hat: np.ndarray
    r_min: np.ndarray
    v: np.ndarray
    params: np.ndarray


def _quad(diff, info):
    return np.einsum("...i,ij,...j->...", diff, info, diff)


def _lm(params, target, info, cone: ConeSpec, n_iter: int, check_every: int = 10,
        stall_rtol: float = 1e-11):
    """Levenberg-Marquardt on r(p) = (t(p) - Z)' I (t(p) - Z), every row independently.

    Rows whose objective improved by less than ``stall_rtol * Z'IZ`` over
    ``check_every`` iterations are frozen, so the result for a row does not
    depend on the other rows.
    """
    params = params.copy()
    t, jac = cone.map_and_jacobian(params)
    diff = t - target
    r = _quad(diff, info)
    size = _quad(target, info) + 1e-300
    n, k = params.shape
    damp = np.full(n, 1e-3)
    eye = np.eye(k)
    active = np.arange(n)
    p_a, d_a, j_a, r_a, dmp, tgt, sz = params, diff, jac, r, damp, target, size
    checkpoint = r_a.copy()
    for it in range(1, n_iter + 1):
        ij = info @ j_a
        hess = np.swapaxes(j_a, 1, 2) @ ij
        grad = (np.swapaxes(ij, 1, 2) @ d_a[:, :, None])[:, :, 0]
        scale = np.einsum("nkk->nk", hess) + 1e-300
        system = hess + dmp[:, None, None] * (scale[:, :, None] * eye + 1e-12 * eye)
        try:
            step = np.linalg.solve(system, -grad[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            step = -grad / scale
        trial = p_a + step
        t_new, jac_new = cone.map_and_jacobian(trial)
        diff_new = t_new - tgt
        r_new = _quad(diff_new, info)
        better = r_new < r_a
        p_a = np.where(better[:, None], trial, p_a)
        d_a = np.where(better[:, None], diff_new, d_a)
        j_a = np.where(better[:, None, None], jac_new, j_a)
        r_a = np.where(better, r_new, r_a)
        dmp = np.where(better, np.maximum(dmp / 3.0, 1e-12), np.minimum(dmp * 4.0, 1e12))
        if it % check_every == 0 or it == n_iter:
            params[active] = p_a
            r[active] = r_a
            moving = (checkpoint - r_a) > stall_rtol * sz
            moving &= dmp < 1e12
            if not moving.all():
                keep = np.flatnonzero(moving)
                active = active[keep]
                p_a, d_a, j_a, r_a, dmp, tgt, sz = (p_a[keep], d_a[keep], j_a[keep], r_a[keep],
                                                    dmp[keep], tgt[keep], sz[keep])
            checkpoint = r_a.copy()
            if active.size == 0:
                break
    return params, r


def cone_project_batch(Z, info, cone: ConeSpec, n_starts: int = 32, rng=None,
                       n_iter: int = 150, screen_iter: int = 15, n_keep: int = 4) -> Projection:
    """Project each row of ``Z`` onto ``cone`` in the metric ``info``.

    Starts are random parameters whose image has about the size of |Z|. All
    starts run ``screen_iter`` iterations, then the best ``n_keep`` per row run
    to ``n_iter``. The origin (r = Z'IZ) is always a candidate.
    """
    rng = np.random.default_rng(rng)
    Z = np.atleast_2d(np.asarray(Z, float))
    info = np.asarray(info, float)
    n, q = Z.shape
    if q != cone.out_dim or info.shape != (q, q):
        raise ArgumentError(f"cone {cone.variant} expects vectors of length {cone.out_dim}")
    k = cone.param_dim
    size = np.linalg.norm(Z, axis=1)
    size = np.where(size > 0, size, 1.0)
    scale = size[:, None, None] ** cone.degrees[None, None, :]
    starts = rng.standard_normal((n, n_starts, k)) * np.exp(0.5 * rng.standard_normal((n, n_starts, 1)))
    starts = (starts * scale).reshape(n * n_starts, k)
    params, r = _lm(starts, np.repeat(Z, n_starts, axis=0), info, cone, min(screen_iter, n_iter))
    r = np.where(np.isfinite(r), r, np.inf).reshape(n, n_starts)
    params = params.reshape(n, n_starts, k)
    keep = min(n_keep, n_starts)
    if n_iter > screen_iter:
        order = np.argsort(r, axis=1, kind="stable")[:, :keep]
        rows = np.arange(n)[:, None]
        params, r = _lm(params[rows, order].reshape(n * keep, k), np.repeat(Z, keep, axis=0),
                        info, cone, n_iter - screen_iter)
        r = np.where(np.isfinite(r), r, np.inf).reshape(n, keep)
        params = params.reshape(n, keep, k)
    best = np.argmin(r, axis=1)
    r_best = r[np.arange(n), best]
    p_best = params[np.arange(n), best]
    r0 = _quad(Z, info)
    use_zero = ~(r_best < r0)
    p_best = np.where(use_zero[:, None], 0.0, p_best)
    r_best = np.where(use_zero, r0, r_best)
    t_hat = cone.map(p_best)
    v = np.maximum(r0 - r_best, 0.0)
    return Projection(t_hat, r_best, v, p_best)


def cone_project(z, info, cone: ConeSpec, multistart: int = 32, rng=None):
    """Projection of one vector; returns (t_hat, r_min, v) with v = Z'IZ - r_min."""
    res = cone_project_batch(np.asarray(z, float)[None], info, cone, multistart, rng)
    return res.t_hat[0], float(res.r_min[0]), float(res.v[0])


# ---------------------------------------------------------------------------
# limit distributions


@dataclass(frozen=True)
class LimitSample:
    """Draws from a limiting null distribution.

    ``per_component[i, m]`` is v_m for draw i and ``values`` their maximum;
    ``per_term[i, m, j]`` holds the separate projections (two cones, plus the
    alpha-grid term for the common-covariance limit).
    """

    values: np.ndarray
    per_component: np.ndarray
    per_term: np.ndarray
    z_lambda: np.ndarray | None = None
    alpha_process: np.ndarray | None = None

    def quantile(self, level: float) -> float:
        """Upper ``level`` quantile, i.e. the (1 - level) empirical quantile."""
        return float(np.quantile(self.values, 1.0 - level))

    def quantile_table(self, levels=(0.10, 0.05, 0.01)):
        return [(float(lv), self.quantile(lv)) for lv in levels]


def _gaussian_factor(cov, jitter_rel=GRID_JITTER):
    cov = 0.5 * (cov + cov.T)
    scale = max(float(np.mean(np.diag(cov))), 1e-300)
    try:
        return np.linalg.cholesky(cov + jitter_rel * scale * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        raise ConditioningError("limit covariance is not positive semidefinite after jitter") from None


def _project_components(system: ScoreSystem, G, cones, rng, n_starts, chunk):
    layout = system.layout
    draws = G.shape[0]
    terms = np.zeros((draws, layout.M0, len(cones)))
    zs = np.zeros((draws, layout.lambda_dim))
    for m in range(layout.M0):
        sl = layout.component_block(m)
        info_m = system.component_info(m)
        z_m = np.linalg.solve(info_m, G[:, sl].T).T
        zs[:, sl] = z_m
        for j, cone in enumerate(cones):
            for start in range(0, draws, chunk):
                stop = min(start + chunk, draws)
                proj = cone_project_batch(z_m[start:stop], info_m, cone, n_starts, rng)
                terms[start:stop, m, j] = proj.v
    return terms, zs


def simulate_limit_hetero(system: ScoreSystem, draws: int, rng=None, n_starts: int = 32,
                          chunk: int = 2000) -> LimitSample:
    """Draws of max_m max_j (projection of Z^m onto cone j) for the heteroscedastic tests."""
    if system.variant != "hetero":
        raise ArgumentError("need a heteroscedastic score system")
    rng = np.random.default_rng(rng)
    factor = _gaussian_factor(system.i_lambda_dot_eta)
    G = rng.standard_normal((draws, factor.shape[0])) @ factor.T
    terms, zs = _project_components(system, G, cones_for("hetero", system.d), rng, n_starts,
                                    chunk)
    per_comp = terms.max(axis=2)
    return LimitSample(per_comp.max(axis=1), per_comp, terms, zs)


def simulate_limit_homo(system: ScoreSystem, draws: int, rng=None, n_starts: int = 32,
                        chunk: int = 2000) -> LimitSample:
    """Draws of the common-covariance limit.

    Per component the value is the largest of the two cone projections and
    sup over the grid of max(G_alpha(lam), 0)^2 / I_alpha(lam, lam), with the
    cone part and the grid process drawn jointly.
    """
    if system.variant != "homo" or system.lambda_grid is None:
        raise ArgumentError("need a common-covariance score system with a lambda grid")
    rng = np.random.default_rng(rng)
    layout = system.layout
    factor = _gaussian_factor(system.i_target_dot_eta)
    G = rng.standard_normal((draws, factor.shape[0])) @ factor.T
    lam_dim = layout.lambda_dim
    terms, zs = _project_components(system, G[:, :lam_dim], cones_for("homo", system.d), rng,
                                    n_starts, chunk)
    # standardized process: G_alpha(lam) / sqrt(I_alpha.eta(lam, lam))
    process = G[:, lam_dim:] / np.sqrt(np.diag(system.i_target_dot_eta)[lam_dim:])
    alpha_terms = np.zeros((draws, layout.M0))
    for m in range(layout.M0):
        alpha_terms[:, m] = np.max(np.maximum(process[:, layout.alpha_block(m)], 0.0) ** 2, axis=1)
    terms = np.concatenate([terms, alpha_terms[:, :, None]], axis=2)
    per_comp = terms.max(axis=2)
    return LimitSample(per_comp.max(axis=1), per_comp, terms, zs, process)


# ---------------------------------------------------------------------------
# vanishing derivatives of the split density


@dataclass(frozen=True)
class DerivativeCheck:
    name: str
    index: tuple
    value: float
    expected: float
    tol: float

    @property
    def ok(self) -> bool:
        return abs(self.value - self.expected) <= self.tol


@dataclass(frozen=True)
class VanishingReport:
    variant: str
    alpha: float
    checks: list

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def violations(self):
        return [c for c in self.checks if not c.ok]

    def max_abs_vanishing(self) -> float:
        vals = [abs(c.value) for c in self.checks if c.expected == 0.0 and c.name.startswith("zero")]
        return max(vals) if vals else 0.0


def _stencil(order: int):
    """Nodes (in units of h) and weights of the central difference for one order."""
    nodes = [order / 2.0 - j for j in range(order + 1)]
    weights = [(-1) ** j * math.comb(order, j) for j in range(order + 1)]
    return nodes, weights


def _fd_derivative(func, base, counts, steps, levels=3):
    """Mixed partial derivative with Richardson extrapolation over halved steps.

    ``counts[i]`` is the order in coordinate i; the tensor-product central
    stencil has O(h^2) error, so the levels are combined as in Romberg.
    """
    active = [i for i, c in enumerate(counts) if c]
    estimates = []
    for level in range(levels):
        h = steps / 2.0 ** level
        stencils = [_stencil(counts[i]) for i in active]
        total = 0.0
        for combo in product(*[range(len(s[0])) for s in stencils]):
            point = base.copy()
            weight = 1.0
            for i, s, c in zip(active, stencils, combo):
                point[i] += s[0][c] * h[i]
                weight *= s[1][c]
            total = total + weight * func(point)
        denom = np.prod([h[i] ** counts[i] for i in active])
        estimates.append(total / denom)
    for k in range(1, levels):
        factor = 4.0 ** k
        estimates = [(factor * estimates[j + 1] - estimates[j]) / (factor - 1)
                     for j in range(len(estimates) - 1)]
    return estimates[0]


def _index_counts(idx, size):
    counts = [0] * size
    for i in idx:
        counts[i] += 1
    return counts


def check_vanishing_scores(theta_star: MixtureParams, alpha: float, variant: str = "hetero",
                           points=None, step: float = 0.04, abs_tol: float = 1e-6,
                           rel_tol: float = 1e-3, rng=None) -> VanishingReport:
    """Finite-difference derivatives of the split density at lambda = 0.

    Values are reported relative to the null density at each point. The
    low-order lambda derivatives must vanish within ``abs_tol``; the leading
    nonzero ones must match multiples of the mean derivatives of the
    one-component density within ``rel_tol`` (plus ``abs_tol``).
    """
    _check_alpha(alpha)
    if variant not in VARIANTS:
        raise ArgumentError(f"variant must be one of {VARIANTS}")
    if theta_star.M != 1:
        raise ArgumentError("the split is taken at a one-component null")
    mu, sigma = theta_star.mus[0], theta_star.sigmas[0]
    d = theta_star.d
    if points is None:
        rng = np.random.default_rng(0 if rng is None else rng)
        chol = np.linalg.cholesky(sigma)
        points = np.vstack([mu, mu + rng.standard_normal((4, d)) @ chol.T])
    points = np.atleast_2d(np.asarray(points, float))
    f0 = mvn.density(points, mu, sigma)
    nu_v = mvn.w_of_sigma(sigma)
    pairs = mvn.vech_pairs(d)
    a = float(alpha)
    sd = np.sqrt(np.diag(sigma))
    checks = []

    def deriv_mu(idx):
        return mvn.mu_derivative(points, mu, sigma, list(idx)) / f0

    def add(name, idx, values, expected):
        for k in range(points.shape[0]):
            tol = abs_tol + rel_tol * abs(expected[k])
            checks.append(DerivativeCheck(name, (tuple(idx), k), float(values[k]),
                                          float(expected[k]), tol))

    if variant == "hetero":
        size = d + len(pairs)
        steps = step * np.r_[sd, [sd[i] * sd[j] for i, j in pairs]]

        def g(par):
            return split_density_hetero(points, mu, nu_v, par[:d], par[d:], a) / f0

        base = np.zeros(size)
        for order in (1, 2, 3):
            for idx in mvn.multi_indices(d, order):
                add("zero_lambda_mu", idx, _fd_derivative(g, base, _index_counts(idx, size), steps),
                    np.zeros(len(points)))
        for e in range(len(pairs)):
            add("zero_lambda_v", (d + e,), _fd_derivative(g, base, _index_counts((d + e,), size),
                                                          steps), np.zeros(len(points)))
        for i in range(d):
            for e, (j, k) in enumerate(pairs):
                val = _fd_derivative(g, base, _index_counts((i, d + e), size), steps)
                add("cross_mu_v", (i, d + e), val, a * (1 - a) * deriv_mu((i, j, k)))
        for e1, (i, j) in enumerate(pairs):
            for e2 in range(e1, len(pairs)):
                k, l = pairs[e2]
                val = _fd_derivative(g, base, _index_counts((d + e1, d + e2), size), steps)
                add("v_v", (d + e1, d + e2), val, a * (1 - a) * deriv_mu((i, j, k, l)))
        quartic = a * (1 - a) * float(b_coef(Fraction(alpha).limit_denominator(10**9))
                                      if isinstance(alpha, Fraction) else b_coef(a))
        for idx in mvn.multi_indices(d, 4):
            val = _fd_derivative(g, base, _index_counts(idx, size), steps)
            add("mu_4", idx, val, quartic * deriv_mu(idx))
    else:
        steps = step * sd

        def g(par):
            return split_density_homo(points, mu, nu_v, par, a) / f0

        base = np.zeros(d)
        for order in (1, 2):
            for idx in mvn.multi_indices(d, order):
                add("zero_lambda", idx, _fd_derivative(g, base, _index_counts(idx, d), steps),
                    np.zeros(len(points)))
        cubic = a * (1 - a) * homo_cubic_factor(a)
        quartic = a * (1 - a) * homo_quartic_factor(a)
        for idx in mvn.multi_indices(d, 3):
            val = _fd_derivative(g, base, _index_counts(idx, d), steps)
            add("mu_3", idx, val, cubic * deriv_mu(idx))
        for idx in mvn.multi_indices(d, 4):
            val = _fd_derivative(g, base, _index_counts(idx, d), steps)
            add("mu_4", idx, val, quartic * deriv_mu(idx))
    return VanishingReport(variant, a, checks)
