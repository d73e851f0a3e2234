"""Grid-search projection onto the two d = 2 heteroscedastic cones with I = identity.

One parameter block is searched on a 61-point-per-axis lattice over [-3, 3];
the other enters the image linearly and is solved exactly by least squares.
The best lattice point is then polished by a local quasi-Newton search.
Maps are written out by hand rather than taken from the package.
"""

import itertools

import numpy as np
from scipy import optimize

AXIS = np.linspace(-3.0, 3.0, 61)


def cross_matrix_of_v(v):
    """A with t_muv = A @ lam_mu, v = (v11, v12, v22)."""
    v11, v12, v22 = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(v11)
    rows = [
        [v11, zero],
        [v12, v11],
        [v22, v12],
        [zero, v22],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def cross_matrix_of_mu(mu):
    """B with t_muv = B @ v."""
    m1, m2 = mu[..., 0], mu[..., 1]
    zero = np.zeros_like(m1)
    rows = [
        [m1, zero, zero],
        [m2, m1, zero],
        [zero, m2, m1],
        [zero, zero, m2],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def v_square(v):
    v11, v12, v22 = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([v11 ** 2, 2 * v11 * v12, 2 * v11 * v22 + v12 ** 2, 2 * v12 * v22, v22 ** 2],
                    axis=-1)


def mu_fourth(mu):
    m1, m2 = mu[..., 0], mu[..., 1]
    return np.stack([m1 ** 4, 4 * m1 ** 3 * m2, 6 * m1 ** 2 * m2 ** 2, 4 * m1 * m2 ** 3, m2 ** 4],
                    axis=-1)


def image(params, cone):
    mu, v = params[:2], params[2:]
    tail = v_square(v) if cone == "hetero_j1" else -mu_fourth(mu)
    return np.concatenate([cross_matrix_of_v(v) @ mu, tail])


def _profiled(mats, target):
    coef = np.einsum("gij,gj->gi", np.linalg.pinv(mats), target)
    fitted = np.einsum("gij,gj->gi", mats, coef)
    return coef, np.sum((fitted - target) ** 2, axis=1)


N_POLISH = 10


def project(z, cone):
    """Smallest |t - z|^2 over the cone image; returns (r_min, params)."""
    z = np.asarray(z, float)
    head, tail = z[:4], z[4:]
    if cone == "hetero_j1":
        grid = np.array(list(itertools.product(AXIS, repeat=3)))
        coef, r_head = _profiled(cross_matrix_of_v(grid), np.broadcast_to(head, (len(grid), 4)))
        r = r_head + np.sum((v_square(grid) - tail) ** 2, axis=1)
        starts = [np.r_[coef[i], grid[i]] for i in np.argsort(r)[:N_POLISH]]
    else:
        grid = np.array(list(itertools.product(AXIS, repeat=2)))
        coef, r_head = _profiled(cross_matrix_of_mu(grid), np.broadcast_to(head, (len(grid), 4)))
        r = r_head + np.sum((-mu_fourth(grid) - tail) ** 2, axis=1)
        starts = [np.r_[grid[i], coef[i]] for i in np.argsort(r)[:N_POLISH]]

    def loss(p):
        return float(np.sum((image(p, cone) - z) ** 2))

    # the lattice cell holding the global minimum need not be the best cell
    best = None
    for start in starts:
        res = optimize.minimize(loss, start, method="BFGS", options={"gtol": 1e-10})
        res = optimize.minimize(loss, res.x, method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20000})
        if best is None or res.fun < best.fun:
            best = res
    r_min = min(best.fun, float(np.min(r)), float(z @ z))
    return r_min, best.x
