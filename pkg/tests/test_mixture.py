import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixorder import mvn
from mixorder.errors import ArgumentError, DataError, DomainError, NumericError
from mixorder.mixture import (
    Dataset,
    MixtureParams,
    canonicalize,
    information_criteria,
    log_likelihood,
    mixture_density,
    read_dataset,
    sample,
    tau_penalty,
    variance_penalty,
)

LOGLIK_FIXTURE = -14.21495934982060304205641  # tests/oracles/loglik_oracle.py


def params_from(alphas, mus, sigmas, **kw):
    return MixtureParams(np.array(alphas, float), np.array(mus, float), np.array(sigmas, float), **kw)


def random_params(seed, M=3, d=2):
    rng = np.random.default_rng(seed)
    alphas = rng.dirichlet(np.ones(M))
    return MixtureParams(alphas, rng.normal(0, 2, (M, d)),
                         np.stack([mvn.random_spd(d, rng) for _ in range(M)]))


class TestDensity:
    def test_single_component_is_normal_density(self, rng):
        sigma = mvn.random_spd(2, rng)
        p = params_from([1.0], [[0.2, -0.1]], [sigma])
        x = rng.standard_normal(2)
        assert mixture_density(p, x) == pytest.approx(mvn.density(x, [0.2, -0.1], sigma), rel=1e-14)

    def test_collapsed_components(self, rng):
        sigma = mvn.random_spd(2, rng)
        p = params_from([0.5, 0.5], [[1, 1], [1, 1]], [sigma, sigma])
        x = rng.standard_normal(2)
        assert mixture_density(p, x) == pytest.approx(mvn.density(x, [1, 1], sigma), rel=1e-14)

    def test_two_component_design_at_origin(self):
        p = params_from([0.3, 0.7], [[-0.5, -0.5], [0.5, 0.5]], [np.eye(2), np.eye(2)])
        # both components sit at squared distance 0.5 from the origin
        expected = 0.3 * math.exp(-0.25) / (2 * math.pi) + 0.7 * math.exp(-0.25) / (2 * math.pi)
        assert mixture_density(p, [0.0, 0.0]) == pytest.approx(expected, rel=1e-14)


class TestLogLikelihood:
    def test_single_observation(self, rng):
        p = random_params(1)
        x = rng.standard_normal(2)
        assert log_likelihood(p, Dataset(x[None])) == pytest.approx(math.log(mixture_density(p, x)))

    def test_duplicated_data_doubles(self, rng):
        p = random_params(2)
        data = Dataset(rng.standard_normal((20, 2)))
        assert log_likelihood(p, data.concat(data)) == pytest.approx(2 * log_likelihood(p, data),
                                                                      rel=1e-14)

    def test_frozen_fixture(self):
        x = np.array([[0.1, -0.4], [1.3, 0.2], [-0.7, -1.1], [2.2, 1.9], [0.0, 0.5]])
        p = params_from([0.35, 0.65], [[-0.5, -0.5], [1.0, 0.75]],
                        [[[1.0, 0.3], [0.3, 0.8]], [[1.5, -0.2], [-0.2, 0.6]]])
        assert log_likelihood(p, Dataset(x)) == pytest.approx(LOGLIK_FIXTURE, abs=1e-12)

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_zero_density_reports_index(self):
        p = params_from([1.0], [[0.0]], [[[1e-4]]])
        with pytest.raises(NumericError, match="observation 1"):
            log_likelihood(p, Dataset(np.array([[0.0], [1e200]])))

    @given(st.integers(0, 10**6), st.permutations([0, 1, 2]))
    def test_label_invariance(self, seed, order):
        p = random_params(seed)
        data = sample(p, 50, np.random.default_rng(seed))
        assert log_likelihood(p.permute(order), data) == pytest.approx(log_likelihood(p, data),
                                                                       rel=1e-12, abs=1e-12)

    def test_truth_beats_perturbation(self):
        p = random_params(4)
        data = sample(p, 10**4, np.random.default_rng(4))
        worse = MixtureParams(p.alphas, p.mus + 0.3, p.sigmas * 1.2)
        assert log_likelihood(p, data) / data.n > log_likelihood(worse, data) / data.n


class TestPenalties:
    def test_zero_at_anchor(self, rng):
        omega = mvn.random_spd(3, rng)
        assert variance_penalty(omega, omega, 0.7) == pytest.approx(0.0, abs=1e-12)

    def test_univariate_value(self):
        assert variance_penalty([[2.0]], [[1.0]], 1.0) == pytest.approx(
            -(0.5 - math.log(0.5) - 1), rel=1e-12)
        assert variance_penalty([[2.0]], [[1.0]], 1.0) == pytest.approx(-0.1931472, abs=1e-7)

    @given(st.integers(0, 10**6))
    def test_strictly_negative_elsewhere(self, seed):
        rng = np.random.default_rng(seed)
        a, b = mvn.random_spd(2, rng), mvn.random_spd(2, rng)
        assert variance_penalty(a, b, 1.0) < 0

    def test_non_spd_rejected(self):
        with pytest.raises(DomainError):
            variance_penalty([[1.0, 2.0], [2.0, 1.0]], np.eye(2), 1.0)

    def test_tau_penalty(self):
        assert tau_penalty(0.5) == 0.0
        assert tau_penalty(0.25) == pytest.approx(math.log(0.5))
        assert tau_penalty(0.75) == tau_penalty(0.25)

    @pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, 1.5])
    def test_tau_penalty_domain(self, tau):
        with pytest.raises(ArgumentError):
            tau_penalty(tau)


class TestCanonicalize:
    def test_idempotent(self):
        p = canonicalize(random_params(5))
        q = canonicalize(p)
        np.testing.assert_array_equal(p.mus, q.mus)

    def test_swap_roundtrip(self):
        p = canonicalize(random_params(6))
        np.testing.assert_array_equal(canonicalize(p.permute([2, 0, 1])).mus, p.mus)

    def test_likelihood_unchanged(self, rng):
        p = random_params(7)
        data = Dataset(rng.standard_normal((30, 2)))
        assert log_likelihood(canonicalize(p), data) == pytest.approx(log_likelihood(p, data),
                                                                      rel=1e-12)

    def test_ties_broken_by_covariance(self):
        p = params_from([0.5, 0.5], [[0, 0], [0, 0]], [2 * np.eye(2), np.eye(2)])
        assert canonicalize(p).sigmas[0, 0, 0] == 1.0


class TestSample:
    def test_single_component_labels(self, rng):
        p = params_from([1.0], [[3.0, 3.0]], [np.eye(2) * 1e-6])
        data = sample(p, 100, rng)
        assert np.allclose(data.x, 3.0, atol=0.01)

    def test_mean_within_clt_bound(self):
        sigma = np.array([[1.0, 0.4], [0.4, 2.0]])
        p = params_from([1.0], [[1.0, -2.0]], [sigma])
        data = sample(p, 10**5, np.random.default_rng(8))
        se = np.sqrt(np.diag(sigma) / 10**5)
        assert np.all(np.abs(data.x.mean(axis=0) - [1.0, -2.0]) < 4 * se)

    def test_seed_determinism(self):
        p = random_params(9)
        a = sample(p, 40, np.random.default_rng(1))
        b = sample(p, 40, np.random.default_rng(1))
        np.testing.assert_array_equal(a.x, b.x)

    def test_covariates_need_rows(self):
        p = params_from([1.0], [[0.0]], [[[1.0]]], gamma=np.array([[1.0]]))
        with pytest.raises(ArgumentError):
            sample(p, 5, np.random.default_rng(0))


class TestInformationCriteria:
    def test_parameter_counts(self, rng):
        data = Dataset(rng.standard_normal((10, 2)))
        assert information_criteria(random_params(1, M=1), data)[2] == 5
        assert information_criteria(random_params(1, M=3), data)[2] == 17

    def test_formulas(self, rng):
        data = Dataset(rng.standard_normal((25, 2)))
        p = random_params(3, M=2)
        aic, bic, k = information_criteria(p, data)
        ll = log_likelihood(p, data)
        assert aic == pytest.approx(2 * k - 2 * ll)
        assert bic == pytest.approx(k * math.log(25) - 2 * ll)


class TestCsv:
    def test_read_with_named_columns(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,b,c\n1,2,3\n4,5,6\n")
        data = read_dataset(path, ["a", "c"], ["b"])
        np.testing.assert_array_equal(data.x, [[1, 3], [4, 6]])
        np.testing.assert_array_equal(data.z, [[2], [5]])

    def test_parse_error_names_line(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,b\n1,2\n3,x\n")
        with pytest.raises(DataError, match="line 3"):
            read_dataset(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("")
        with pytest.raises(DataError):
            read_dataset(path)
