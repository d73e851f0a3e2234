"""Normal mixture parameters, likelihood, penalties, sampling and model criteria."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from . import mvn
from .errors import ArgumentError, DataError, NumericError

ALPHA_FLOOR = 1e-12


@dataclass(frozen=True)
class Dataset:
    """Observations ``x`` (n x d) with optional covariates ``z`` (n x p)."""

    x: np.ndarray
    z: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ArgumentError("x must be an n x d array with n >= 1")
        if not np.all(np.isfinite(x)):
            raise DataError("x has non-finite entries")
        object.__setattr__(self, "x", x)
        if self.z is not None:
            z = np.asarray(self.z, dtype=float)
            if z.ndim == 1:
                z = z.reshape(-1, 1)
            if z.shape[0] != x.shape[0]:
                raise ArgumentError("z must have one row per observation")
            if not np.all(np.isfinite(z)):
                raise DataError("z has non-finite entries")
            object.__setattr__(self, "z", z if z.shape[1] else None)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def p(self) -> int:
        return 0 if self.z is None else self.z.shape[1]

    def z_or_empty(self) -> np.ndarray:
        return np.zeros((self.n, 0)) if self.z is None else self.z

    def sorted_rows(self) -> "Dataset":
        """Rows in lexicographic order, so row order of the input never matters."""
        cols = self.x if self.z is None else np.hstack([self.x, self.z])
        order = np.lexsort(cols.T[::-1])
        return Dataset(self.x[order], None if self.z is None else self.z[order])

    def concat(self, other: "Dataset") -> "Dataset":
        z = None if self.z is None else np.vstack([self.z, other.z])
        return Dataset(np.vstack([self.x, other.x]), z)


@dataclass(frozen=True)
class MixtureParams:
    """Parameters of an M-component normal mixture.

    ``sigmas`` is always stored as an (M, d, d) stack; for a homoscedastic
    mixture every slice is the same matrix. A single (d, d) matrix is accepted
    on construction when ``homoscedastic`` is true.
    """

    alphas: np.ndarray
    mus: np.ndarray
    sigmas: np.ndarray
    gamma: np.ndarray | None = None
    homoscedastic: bool = False

    def __post_init__(self):
        alphas = np.atleast_1d(np.asarray(self.alphas, dtype=float))
        mus = np.asarray(self.mus, dtype=float)
        if mus.ndim == 1:
            mus = mus.reshape(alphas.shape[0], -1)
        m_count, d = mus.shape
        sigmas = np.asarray(self.sigmas, dtype=float)
        if sigmas.ndim == 0 or (sigmas.ndim == 1 and d == 1):
            sigmas = sigmas.reshape(-1, 1, 1)
        if sigmas.ndim == 2:
            if not self.homoscedastic and m_count != 1:
                raise ArgumentError("a single covariance requires homoscedastic=True")
            sigmas = np.broadcast_to(sigmas, (m_count, d, d)).copy()
        if sigmas.shape == (1, d, d) and m_count > 1 and self.homoscedastic:
            sigmas = np.broadcast_to(sigmas, (m_count, d, d)).copy()
        if alphas.shape != (m_count,) or sigmas.shape != (m_count, d, d):
            raise ArgumentError(
                f"inconsistent shapes: alphas {alphas.shape}, mus {mus.shape}, sigmas {sigmas.shape}"
            )
        if np.any(alphas < 0) or abs(alphas.sum() - 1.0) > 1e-12 * max(1, m_count):
            raise ArgumentError(f"weights must be nonnegative and sum to one, got {alphas}")
        if self.homoscedastic and not np.allclose(sigmas, sigmas[:1], rtol=0, atol=1e-12):
            raise ArgumentError("homoscedastic mixture needs one shared covariance")
        gamma = self.gamma
        if gamma is not None:
            gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
            if gamma.shape[0] != d:
                raise ArgumentError("gamma must be d x p")
            if gamma.shape[1] == 0:
                gamma = None
        for arr in (alphas, mus, sigmas):
            arr.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "mus", mus)
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "gamma", gamma)

    @property
    def M(self) -> int:
        return self.alphas.shape[0]

    @property
    def d(self) -> int:
        return self.mus.shape[1]

    @property
    def p(self) -> int:
        return 0 if self.gamma is None else self.gamma.shape[1]

    def gamma_or_zeros(self) -> np.ndarray:
        return np.zeros((self.d, 0)) if self.gamma is None else self.gamma

    def permute(self, order: Sequence[int]) -> "MixtureParams":
        order = np.asarray(order)
        return MixtureParams(
            self.alphas[order], self.mus[order], self.sigmas[order], self.gamma, self.homoscedastic
        )


@dataclass(frozen=True)
class PenaltySpec:
    """Covariance penalty strength ``a_n`` and one anchor covariance per component."""

    a_n: float
    anchors: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.a_n < 0:
            raise ArgumentError("a_n must be nonnegative")
        anchors = np.asarray(self.anchors, dtype=float)
        if anchors.ndim == 2:
            anchors = anchors[None]
        for omega in anchors:
            mvn.spd_cholesky(omega)
        object.__setattr__(self, "anchors", anchors)

    @classmethod
    def shared(cls, a_n: float, omega: np.ndarray, m_count: int) -> "PenaltySpec":
        omega = np.atleast_2d(np.asarray(omega, dtype=float))
        return cls(a_n, np.broadcast_to(omega, (m_count,) + omega.shape).copy())


def _check_dims(params: MixtureParams, data: Dataset):
    if data.d != params.d:
        raise ArgumentError(f"data dimension {data.d} does not match parameters d={params.d}")
    if params.p != data.p:
        raise ArgumentError("covariate dimension of data and gamma differ")


def component_logpdf(params: MixtureParams, data: Dataset) -> np.ndarray:
    """(n, M) matrix of component log densities."""
    _check_dims(params, data)
    return np.column_stack(
        [
            mvn.logpdf(data.x, params.mus[j], params.sigmas[j], data.z, params.gamma)
            for j in range(params.M)
        ]
    )


def weighted_logpdf(params: MixtureParams, data: Dataset) -> np.ndarray:
    """Component log densities plus log weights, with the weight floor applied."""
    return component_logpdf(params, data) + np.log(np.maximum(params.alphas, ALPHA_FLOOR))


def mixture_logpdf(params: MixtureParams, x, z=None) -> np.ndarray:
    data = Dataset(np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, params.d), z)
    return logsumexp(weighted_logpdf(params, data), axis=1)


def mixture_density(params: MixtureParams, x, z=None):
    """Mixture density at one point (float) or at each row of an array."""
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1 and (params.d > 1 or x.size == 1)
    out = np.exp(mixture_logpdf(params, x, z))
    return float(out[0]) if single else out


def log_likelihood(params: MixtureParams, data: Dataset) -> float:
    per_obs = logsumexp(weighted_logpdf(params, data), axis=1)
    bad = np.flatnonzero(~np.isfinite(per_obs))
    if bad.size:
        raise NumericError(f"observation {int(bad[0])} has zero density under the mixture")
    return float(per_obs.sum())


def variance_penalty(sigma, omega, a_n: float) -> float:
    """-a_n {tr(Omega inv(Sigma)) - log det(Omega inv(Sigma)) - d}; never positive."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    chol_s = mvn.spd_cholesky(sigma)
    chol_o = mvn.spd_cholesky(omega)
    if a_n == 0:
        return 0.0
    d = sigma.shape[0]
    # eigenvalues of inv(L_s) Omega inv(L_s)' are those of Omega inv(Sigma)
    half = np.linalg.solve(chol_s, chol_o)
    tr = float(np.sum(half * half))
    logdet = 2.0 * (np.sum(np.log(np.diag(chol_o))) - np.sum(np.log(np.diag(chol_s))))
    return -a_n * (tr - logdet - d)


def total_penalty(params: MixtureParams, penalty: PenaltySpec | None) -> float:
    if penalty is None or penalty.a_n == 0:
        return 0.0
    if penalty.anchors.shape[0] != params.M:
        raise ArgumentError("need one anchor covariance per component")
    return sum(
        variance_penalty(params.sigmas[j], penalty.anchors[j], penalty.a_n) for j in range(params.M)
    )


def tau_penalty(tau: float) -> float:
    """log(2 min(tau, 1 - tau)) for tau in (0, 1)."""
    if not 0.0 < tau < 1.0:
        raise ArgumentError(f"tau must lie in (0, 1), got {tau}")
    return math.log(2.0 * min(tau, 1.0 - tau))


def penalized_log_likelihood(params: MixtureParams, data: Dataset, penalty: PenaltySpec | None):
    return log_likelihood(params, data) + total_penalty(params, penalty)


def _canonical_key(mu, sigma):
    return tuple(mu) + tuple(sigma.ravel())


def canonicalize(params: MixtureParams) -> MixtureParams:
    """Order components lexicographically by mean, then by vectorized covariance."""
    keys = [_canonical_key(params.mus[j], params.sigmas[j]) for j in range(params.M)]
    order = sorted(range(params.M), key=lambda j: keys[j])
    if order == list(range(params.M)):
        return params
    return params.permute(order)


def sample(params: MixtureParams, n: int, rng: np.random.Generator, z_rows=None) -> Dataset:
    """Draw ``n`` observations: a component label by weight, then a normal draw."""
    if params.gamma is not None and z_rows is None:
        raise ArgumentError("covariate rows are required when gamma is present")
    cum = np.cumsum(params.alphas)
    cum[-1] = 1.0
    labels = np.searchsorted(cum, rng.random(n), side="right")
    noise = rng.standard_normal((n, params.d))
    chols = np.stack([mvn.spd_cholesky(s) for s in params.sigmas])
    x = params.mus[labels] + np.einsum("nij,nj->ni", chols[labels], noise)
    z = None
    if z_rows is not None:
        z = np.asarray(z_rows, dtype=float).reshape(n, -1)
        if params.gamma is not None:
            x = x + z @ params.gamma.T
    return Dataset(x, z)


def parameter_count(M: int, d: int, p: int = 0, homoscedastic: bool = False) -> int:
    cov = d * (d + 1) // 2
    return (M - 1) + d * p + M * d + (1 if homoscedastic else M) * cov


def information_criteria(params: MixtureParams, data: Dataset, loglik: float | None = None):
    """(AIC, BIC, k) with AIC = 2k - 2L and BIC = k log n - 2L."""
    if loglik is None:
        loglik = log_likelihood(params, data)
    k = parameter_count(params.M, params.d, params.p, params.homoscedastic)
    return 2 * k - 2 * loglik, k * math.log(data.n) - 2 * loglik, k


def one_component_mle_cov(data: Dataset) -> np.ndarray:
    """Covariance MLE (denominator n) of a single normal, net of covariates."""
    x = data.x
    if data.z is not None:
        design = np.hstack([np.ones((data.n, 1)), data.z])
        coef, *_ = np.linalg.lstsq(design, x, rcond=None)
        resid = x - design @ coef
    else:
        resid = x - x.mean(axis=0)
    return resid.T @ resid / data.n


# ---------------------------------------------------------------------------
# CSV input and output


def _parse_float(text: str, line: int, col: str) -> float:
    try:
        return float(text.strip())
    except ValueError:
        raise DataError(f"line {line}: column {col!r}: cannot parse {text!r} as a number") from None


def read_csv_table(path) -> tuple[list[str], np.ndarray]:
    """Header names and an all-numeric body; errors name the offending line."""
    path = Path(path)
    try:
        handle = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from None
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            rows.append([_parse_float(cell, line, header[k]) for k, cell in enumerate(row)])
    if not rows:
        raise DataError(f"{path}: no data rows")
    body = np.array(rows)
    if not np.all(np.isfinite(body)):
        line = int(np.flatnonzero(~np.all(np.isfinite(body), axis=1))[0]) + 2
        raise DataError(f"line {line}: non-finite value")
    return header, body


def _resolve_columns(header, spec, default):
    if spec is None:
        return default
    if isinstance(spec, int):
        return list(range(spec))
    out = []
    for name in spec:
        if name not in header:
            raise DataError(f"column {name!r} not found; available: {header}")
        out.append(header.index(name))
    return out


def read_dataset(path, x_columns=None, z_columns=None) -> Dataset:
    """Load a CSV with a header row.

    Args:
        x_columns: names of the outcome columns, or an integer d meaning the
            first d columns. ``None`` uses every column not listed in ``z_columns``.
        z_columns: names of covariate columns. With an integer ``x_columns`` and
            no ``z_columns``, the remaining columns are covariates.
    """
    header, body = read_csv_table(path)
    if isinstance(x_columns, int) and z_columns is None:
        x_idx = list(range(x_columns))
        z_idx = list(range(x_columns, len(header)))
    else:
        z_idx = _resolve_columns(header, z_columns, [])
        x_idx = _resolve_columns(header, x_columns, [k for k in range(len(header)) if k not in z_idx])
    if not x_idx:
        raise DataError("no outcome columns selected")
    return Dataset(body[:, x_idx], body[:, z_idx] if z_idx else None)


def write_csv(path, header: Sequence[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(value):
    # numpy scalars repr as np.float64(...) under numpy 2
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return repr(value) if math.isfinite(value) else str(value)
    if isinstance(value, np.integer):
        return int(value)
    return value

