from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from mixorder import mvn
from mixorder.asymptotics import (
    ConeSpec,
    b_coef,
    c1,
    c2,
    check_vanishing_scores,
    cone_project,
    cone_project_batch,
    cones_for,
    default_lambda_grid,
    estimate_information,
    hetero_scores,
    homo_scores,
    homo_cubic_factor,
    reparam_hetero,
    reparam_hetero_inverse,
    reparam_homo,
    reparam_homo_inverse,
    score_matrix,
    simulate_limit_hetero,
    simulate_limit_homo,
)
from mixorder.errors import ArgumentError, ConditioningError
from mixorder.mixture import MixtureParams

from oracles import cone_grid

finite = st.floats(-5, 5, allow_nan=False)


def one_normal(d, sigma=None, mu=None):
    sigma = np.eye(d) if sigma is None else np.asarray(sigma, float)
    mu = np.zeros(d) if mu is None else np.asarray(mu, float)
    return MixtureParams(np.array([1.0]), mu[None], sigma[None])


class TestConstants:
    def test_exact_rationals(self):
        a = Fraction(3, 10)
        assert b_coef(a) == Fraction(-79, 150)
        assert c1(a) == Fraction(-13, 30)
        assert c2(a) == Fraction(17, 30)
        assert float(b_coef(0.3)) == pytest.approx(-0.5266666666666666, rel=1e-15)

    def test_homo_factor_vanishes_at_half(self):
        assert homo_cubic_factor(Fraction(1, 2)) == 0


class TestReparam:
    @given(st.lists(finite, min_size=12, max_size=12), st.floats(0.05, 0.95))
    def test_hetero_roundtrip(self, vals, alpha):
        v = np.array(vals)
        back = reparam_hetero_inverse(*reparam_hetero(v[:2], v[2:5], v[5:7], v[7:10], alpha),
                                      alpha)
        for got, want in zip(back, (v[:2], v[2:5], v[5:7], v[7:10])):
            np.testing.assert_allclose(got, want, atol=1e-12 * (1 + np.abs(v).max() ** 2))

    @given(st.lists(finite, min_size=7, max_size=7), st.floats(0.05, 0.95))
    def test_homo_roundtrip(self, vals, alpha):
        v = np.array(vals)
        back = reparam_homo_inverse(*reparam_homo(v[:2], v[2:5], v[5:7], alpha), alpha)
        for got, want in zip(back, (v[:2], v[2:5], v[5:7])):
            np.testing.assert_allclose(got, want, atol=1e-12 * (1 + np.abs(v).max() ** 2))

    def test_null_embedding(self):
        mu1, mu2, v1, v2 = reparam_hetero([1, 2], [3, 4, 5], [0, 0], [0, 0, 0], 0.3)
        np.testing.assert_array_equal(mu1, mu2)
        np.testing.assert_array_equal(v1, [3, 4, 5])
        np.testing.assert_array_equal(v2, [3, 4, 5])

    @given(st.lists(finite, min_size=12, max_size=12), st.floats(0.05, 0.95))
    def test_barycenter(self, vals, alpha):
        v = np.array(vals)
        mu1, mu2, _, _ = reparam_hetero(v[:2], v[2:5], v[5:7], v[7:10], alpha)
        np.testing.assert_allclose(alpha * mu1 + (1 - alpha) * mu2, v[:2], atol=1e-12)

    def test_alpha_domain(self):
        with pytest.raises(ArgumentError):
            reparam_homo([0.0], [1.0], [0.0], 1.0)


class TestScores:
    def test_one_component_shape(self, rng):
        s, layout = score_matrix(rng.standard_normal((7, 2)), None, one_normal(2))
        assert layout.eta_dim == 2 + 3
        assert layout.lambda_dim == 4 + 5
        assert s.shape == (7, 14)

    def test_multi_component_shape(self, rng):
        p = MixtureParams(np.array([0.3, 0.7]), np.array([[0.0, 0], [2.0, 1]]),
                          np.stack([np.eye(2)] * 2), np.ones((2, 3)))
        s, layout = score_matrix(rng.standard_normal((5, 2)), rng.standard_normal((5, 3)), p)
        assert s.shape[1] == 1 + (3 * 2 + 2 * (2 + 3)) + 2 * (4 + 5)

    def test_d1_hermite_structure(self, rng):
        x = rng.standard_normal((50, 1))
        s = hetero_scores(x, None, one_normal(1))
        t = x[:, 0]
        np.testing.assert_allclose(s[:, 2], (t ** 3 - 3 * t) / 6, atol=1e-12)
        np.testing.assert_allclose(s[:, 3], (t ** 4 - 6 * t ** 2 + 3) / 24, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ArgumentError):
            hetero_scores(rng.standard_normal((5, 3)), None, one_normal(2))

    def test_grid_excludes_origin(self, rng):
        with pytest.raises(ArgumentError):
            homo_scores(rng.standard_normal((5, 1)), None, one_normal(1), [[0.0], [1.0]])

    @pytest.mark.parametrize("variant", ["hetero", "homo"])
    def test_zero_mean(self, variant):
        sigma = np.array([[1.0, 0.3], [0.3, 0.8]])
        p = MixtureParams(np.array([0.4, 0.6]), np.array([[-1.0, 0], [1.5, 0.5]]),
                          np.stack([sigma, sigma if variant == "homo" else np.eye(2)]))
        system = estimate_information(p, 100_000, rng=3, variant=variant)
        assert np.all(np.abs(system.score_mean) <= 4 * system.score_se)

    def test_alpha_score_small_lambda_limit(self, rng):
        sigma = np.array([[1.0, 0.4], [0.4, 2.0]])
        p = one_normal(2, sigma, [0.5, -0.2])
        x = rng.multivariate_normal([0.5, -0.2], sigma, 200)
        direction = np.array([0.6, -0.8])
        lam = 1e-3 * direction
        _, s_alpha = homo_scores(x, None, p, lam[None])
        cubic = sum(np.prod(lam[list(idx)]) * len(set(_perms(idx)))
                    * mvn.mu_derivative(x, p.mus[0], sigma, list(idx))
                    for idx in mvn.multi_indices(2, 3))
        limit = cubic / (6 * 1e-9 * mvn.density(x, p.mus[0], sigma))
        err = np.max(np.abs(s_alpha[:, 0] - limit)) / np.max(np.abs(limit))
        assert err < 1e-3

    def test_alpha_score_sign_flip_d1(self, rng):
        x = rng.standard_normal((100, 1))
        _, s = homo_scores(x, None, one_normal(1), [[1e-3], [-1e-3]])
        # the even quartic term leaves a remainder of order |lambda|
        assert np.max(np.abs(s[:, 0] + s[:, 1])) < 1e-2 * np.max(np.abs(s[:, 0]))
        assert np.corrcoef(s[:, 0], s[:, 1])[0, 1] < -0.999


def _perms(idx):
    from itertools import permutations

    return set(permutations(idx))


class TestInformation:
    def test_standard_normal_eta_block(self):
        system = estimate_information(one_normal(1), 20_000, rng=0)
        assert system.i_eta.shape == (2, 2)
        assert np.all(np.linalg.eigvalsh(system.i_eta) > 0)

    def test_drift_envelope(self):
        p = one_normal(2, [[1.0, 0.2], [0.2, 1.5]])
        n = 50_000
        a = estimate_information(p, n, rng=1).info
        b = estimate_information(p, 2 * n, rng=2).info
        scale = np.sqrt(np.outer(np.diag(a), np.diag(a)))
        assert np.max(np.abs(a - b) / scale) < 5 / np.sqrt(n)

    @pytest.mark.parametrize("variant", ["hetero", "homo"])
    def test_schur_psd(self, variant):
        system = estimate_information(one_normal(2), 20_000, rng=4, variant=variant)
        assert np.linalg.eigvalsh(system.i_lambda_dot_eta).min() >= -1e-8
        assert np.linalg.eigvalsh(system.i_target_dot_eta).min() >= -1e-8
        assert np.allclose(system.info, system.info.T)

    def test_covariance_on_independent_stream(self):
        p = one_normal(1)
        system = estimate_information(p, 100_000, rng=5)
        x = np.random.default_rng(6).standard_normal((100_000, 1))
        s = hetero_scores(x, None, p)
        prods = s[:, :, None] * s[:, None, :]
        mean = prods.mean(axis=0)
        se = prods.std(axis=0) / np.sqrt(len(s))
        assert np.all(np.abs(mean - system.info) <= 6 * np.sqrt(2) * se + 1e-12)

    def test_ill_conditioned_eta(self):
        p = MixtureParams(np.array([0.5, 0.5]), np.zeros((2, 1)), np.ones((2, 1, 1)))
        with pytest.raises(ConditioningError):
            estimate_information(p, 5000, rng=0)


class TestCones:
    @pytest.mark.parametrize("variant", ["hetero_j1", "hetero_j2", "homo_j1", "homo_j2"])
    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_homogeneity(self, variant, d, rng):
        cone = ConeSpec(variant, d)
        p = rng.standard_normal(cone.param_dim)
        s = 1.7
        np.testing.assert_allclose(cone.map(s ** cone.degrees * p), s * cone.map(p), rtol=1e-12,
                                   atol=1e-12)

    def test_hand_written_d2_maps(self, rng):
        for variant in ("hetero_j1", "hetero_j2"):
            p = rng.standard_normal(5)
            np.testing.assert_allclose(ConeSpec(variant, 2).map(p), cone_grid.image(p, variant),
                                       rtol=1e-14)

    def test_jacobian(self, rng):
        for variant in ("hetero_j1", "hetero_j2", "homo_j1", "homo_j2"):
            cone = ConeSpec(variant, 2)
            p = rng.standard_normal(cone.param_dim)
            _, jac = cone.map_and_jacobian(p)
            h = 1e-6
            fd = np.column_stack([(cone.map(p + h * e) - cone.map(p - h * e)) / (2 * h)
                                  for e in np.eye(cone.param_dim)])
            np.testing.assert_allclose(jac, fd, rtol=1e-6, atol=1e-8)

    @pytest.mark.parametrize("variant", ["hetero_j1", "hetero_j2", "homo_j1", "homo_j2"])
    def test_point_in_cone(self, variant, rng):
        cone = ConeSpec(variant, 2)
        z = cone.map(rng.standard_normal(cone.param_dim))
        info = mvn.random_spd(cone.out_dim, rng)
        t_hat, r_min, v = cone_project(z, info, cone, rng=0)
        assert r_min <= 1e-8 * z @ info @ z
        np.testing.assert_allclose(t_hat, z, atol=1e-4 * np.linalg.norm(z))

    def test_d1_cones_cover_the_plane(self, rng):
        j1, j2 = cones_for("hetero", 1)
        Z = rng.standard_normal((200, 2)) * 2
        v1 = cone_project_batch(Z, np.eye(2), j1, rng=0).v
        v2 = cone_project_batch(Z, np.eye(2), j2, rng=0).v
        np.testing.assert_allclose(np.maximum(v1, v2), np.sum(Z * Z, axis=1), rtol=1e-8)

    def test_better_than_random_feasible_points(self, rng):
        for variant in ("hetero_j1", "homo_j2"):
            cone = ConeSpec(variant, 2)
            info = mvn.random_spd(cone.out_dim, rng)
            z = rng.standard_normal(cone.out_dim)
            _, r_min, v = cone_project(z, info, cone, rng=1)
            pts = cone.map(rng.standard_normal((100, cone.param_dim)))
            r = np.einsum("ni,ij,nj->n", pts - z, info, pts - z)
            assert r_min <= r.min() + 1e-10 and v >= 0

    def test_grid_oracle(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(20):
            z = rng.standard_normal(9)
            for variant in ("hetero_j1", "hetero_j2"):
                r_oracle, _ = cone_grid.project(z, variant)
                _, r_min, _ = cone_project(z, np.eye(9), ConeSpec(variant, 2), rng=0)
                worst = max(worst, abs(r_min - r_oracle))
        assert worst <= 1e-3, worst


class TestLimits:
    def test_d1_chi_square(self):
        system = estimate_information(one_normal(1), 100_000, rng=10)
        sample = simulate_limit_hetero(system, 20_000, rng=11)
        ks = stats.kstest(sample.values, stats.chi2(2).cdf).statistic
        assert ks < 0.02
        assert abs(sample.quantile(0.05) - 5.9915) < 0.15

    def test_nonnegative_and_max(self):
        p = MixtureParams(np.array([0.5, 0.5]), np.array([[-6.0], [6.0]]), np.ones((2, 1, 1)))
        two = simulate_limit_hetero(estimate_information(p, 50_000, rng=12), 5000, rng=13)
        one = simulate_limit_hetero(estimate_information(one_normal(1), 50_000, rng=14), 5000,
                                    rng=15)
        assert np.all(two.values >= 0)
        np.testing.assert_array_equal(two.values, two.per_component.max(axis=1))
        for level in (0.5, 0.1, 0.05):
            assert two.quantile(level) > one.quantile(level)

    def test_homo_alpha_term(self):
        system = estimate_information(one_normal(1), 20_000, rng=16, variant="homo")
        sample = simulate_limit_homo(system, 2000, rng=17)
        assert np.all(sample.values >= 0)
        proc = sample.alpha_process
        np.testing.assert_allclose(sample.per_term[:, 0, 2],
                                   np.max(np.maximum(proc, 0) ** 2, axis=1))
        negative = np.all(proc < 0, axis=1)
        assert np.all(sample.per_term[negative, 0, 2] == 0.0)

    @pytest.mark.slow
    def test_homo_grid_refinement(self):
        # 40 directions nest the 20-direction grid, so both sups use the same draws
        grid = default_lambda_grid(np.eye(2), n_directions=40)
        system = estimate_information(one_normal(2), 100_000, rng=18, variant="homo",
                                      lambda_grid=grid)
        sample = simulate_limit_homo(system, 4000, rng=19)
        cones = sample.per_term[:, 0, :2].max(axis=1)
        proc = np.maximum(sample.alpha_process, 0) ** 2
        coarse = np.arange(grid.shape[0]) % 2 == 0
        fine_q = np.quantile(np.maximum(cones, proc.max(axis=1)), 0.95)
        coarse_q = np.quantile(np.maximum(cones, proc[:, coarse].max(axis=1)), 0.95)
        assert abs(fine_q - coarse_q) / fine_q < 0.02


class TestVanishing:
    def test_hetero_d1(self):
        report = check_vanishing_scores(one_normal(1), 0.3)
        assert report.ok, report.violations()[:3]
        assert report.max_abs_vanishing() < 1e-6

    def test_quartic_ratio(self):
        report = check_vanishing_scores(one_normal(1), 0.3)
        quartic = [c for c in report.checks if c.name == "mu_4"]
        assert all(c.ok for c in quartic)
        # the first check point is the mean, where the fourth Hermite value is 3
        assert quartic[0].expected == pytest.approx(0.3 * 0.7 * (-79 / 150) * 3.0, rel=1e-12)

    def test_homo_half(self):
        report = check_vanishing_scores(one_normal(2), 0.5, "homo")
        assert report.ok
        assert all(abs(c.value) < 1e-6 for c in report.checks if c.name == "mu_3")

    @pytest.mark.parametrize("variant", ["hetero", "homo"])
    def test_d2_random_covariance(self, variant):
        sigma = mvn.random_spd(2, np.random.default_rng(3))
        report = check_vanishing_scores(one_normal(2, sigma, [0.3, -1.0]), 0.3, variant)
        assert report.ok, report.violations()[:3]

    def test_sign_error_detected(self):
        report = check_vanishing_scores(one_normal(1), 0.3)
        flipped = [c for c in report.checks if c.name == "mu_4"][0]
        assert abs(-flipped.value - flipped.expected) > flipped.tol
