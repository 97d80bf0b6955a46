import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from polyserial import estimators as est
from polyserial import inference as inf
from polyserial import model
from polyserial.model import Dataset
from polyserial.numerics import QuadratureSpec

from conftest import THETA_MAIN, draw_dataset, params


def brute_force_A(theta, alpha):
    # oracle: all d^2 entries integrated one at a time with a fixed dense Gauss-Legendre rule
    th = model._arr(theta)
    d = th.size
    t, w = np.polynomial.legendre.leggauss(400)
    mu, sig = th[1], math.sqrt(th[2])
    xs = mu + 10 * sig * t
    wx = 10 * sig * w
    out = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            total = 0.0
            for y in range(1, th.size - 1):
                yy = np.full(xs.size, y)
                logp, sc, q = model.log_density_score_hessian(th, xs, yy)
                vals = np.exp((1 + alpha) * logp) * ((1 + alpha) * sc[:, i] * sc[:, j] - q[:, i, j])
                total += float(wx @ vals)
            out[i, j] = total
    return out


class TestFisher:
    @given(params(max_r=5))
    @settings(max_examples=10, deadline=None)
    def test_two_forms_agree(self, th):
        a = inf.fisher_information(th)
        b = inf.fisher_information_hessian_form(th)
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_symmetric_positive_definite(self):
        info = inf.fisher_information(THETA_MAIN)
        assert np.array_equal(info, info.T)
        assert np.linalg.eigvalsh(info).min() > 0

    def test_ml_standard_error(self):
        info = inf.fisher_information(THETA_MAIN)
        se = math.sqrt(np.linalg.inv(info)[0, 0] / 500)
        assert se == pytest.approx(0.036, abs=0.002)

    def test_block_structure(self):
        # mu / sigma2 couple with thresholds only through the conditional density; at rho = 0 that coupling vanishes
        info = inf.fisher_information(THETA_MAIN.replace(rho=0.0))
        np.testing.assert_allclose(info[1:3, 3:], 0.0, atol=1e-10)
        assert np.max(np.abs(inf.fisher_information(THETA_MAIN)[1:3, 3:])) > 1e-3


class TestMatrixA:
    def test_alpha_zero_vanishes(self):
        np.testing.assert_allclose(inf.matrix_A(THETA_MAIN, 0.0), 0.0, atol=1e-6)

    def test_symmetric(self):
        a = inf.matrix_A(THETA_MAIN, 0.5)
        assert np.array_equal(a, a.T)

    def test_against_full_quadrature(self):
        np.testing.assert_allclose(inf.matrix_A(THETA_MAIN, 0.5), brute_force_A(THETA_MAIN, 0.5), atol=1e-8)

    def test_quadrature_failure_flagged(self):
        spec = QuadratureSpec(rel_tol=1e-15, abs_tol=1e-18, max_subdivisions=1)
        with pytest.raises(inf.QuadratureFailure):
            inf.matrix_A(THETA_MAIN, 0.5, spec)


class TestPopulation:
    def test_alpha_zero_is_inverse_fisher(self):
        cov = inf.asymptotic_covariance(THETA_MAIN, 0.0)
        np.testing.assert_allclose(cov, np.linalg.inv(inf.fisher_information(THETA_MAIN)), rtol=1e-10)

    def test_small_alpha_continuity(self):
        # the alpha > 0 route with A + B and K - xi xi^T approaches the inverse Fisher information
        target = np.linalg.inv(inf.fisher_information(THETA_MAIN))
        cov = inf.asymptotic_covariance(THETA_MAIN, 1e-6)
        np.testing.assert_allclose(cov, target, rtol=1e-8, atol=1e-10 * np.abs(target).max())

    def test_j_equals_weighted_outer_product(self):
        # under the model J = integral p^{1+alpha} s s^T; check the A + B assembly against it
        alpha = 0.5
        J, K, xi = inf.population_sandwich(THETA_MAIN, alpha)
        d = THETA_MAIN.d
        res = model.integrate_over_support(THETA_MAIN, lambda xs, ys: (
            np.exp((1 + alpha) * model.log_density(THETA_MAIN, xs, ys))[:, None, None]
            * (lambda s: s[:, :, None] * s[:, None, :])(model.score_vector(THETA_MAIN, xs, ys))).reshape(-1, d * d))
        np.testing.assert_allclose(J, res.value.reshape(d, d), atol=1e-9)
        np.testing.assert_allclose(xi, est.correction_term(THETA_MAIN, alpha), atol=1e-10)

    @pytest.mark.parametrize("alpha,expected", [
        (0.0, 1.000), (0.1, 0.983), (0.25, 0.916), (0.5, 0.762), (0.75, 0.612), (1.0, 0.488)])
    def test_efficiency_table(self, alpha, expected):
        assert inf.relative_efficiency(THETA_MAIN, alpha) == pytest.approx(expected, abs=0.005)

    def test_efficiency_alpha_zero_exact(self):
        assert inf.relative_efficiency(THETA_MAIN, 0.0) == 1.0

    def test_efficiency_monotone(self):
        eff = [inf.relative_efficiency(THETA_MAIN, a) for a in np.arange(0.0, 1.0001, 0.05)]
        assert np.all(np.diff(eff) <= 1e-12)

    def test_efficiency_dips_for_strong_correlation(self):
        assert inf.relative_efficiency(THETA_MAIN.replace(rho=0.9), 0.5) < inf.relative_efficiency(THETA_MAIN, 0.5)


@pytest.fixture(scope="module")
def large():
    return draw_dataset(THETA_MAIN, 20_000, 99)


class TestSandwich:
    def test_alpha_zero_approaches_inverse_fisher(self, large):
        res = est.fit_ml(large, est.DpdConfig(0.0, weights=False))
        cov = inf.sandwich_covariance(res.theta_hat, large, 0.0)
        target = np.linalg.inv(inf.fisher_information(THETA_MAIN))
        rel = np.linalg.norm(cov.sigma - target) / np.linalg.norm(target)
        assert rel < 0.05
        assert cov.fisher is not None

    @pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 1.0])
    def test_symmetric_psd(self, data_main, alpha):
        res = est.fit_dpd(data_main, est.DpdConfig(alpha, weights=False))
        cov = inf.sandwich_covariance(res.theta_hat, data_main, alpha)
        assert not cov.singular
        assert np.array_equal(cov.sigma, cov.sigma.T)
        assert np.linalg.eigvalsh(cov.sigma).min() > -1e-8 * np.trace(cov.sigma)
        np.testing.assert_allclose(cov.se, np.sqrt(np.diag(cov.sigma) / data_main.n))
        np.testing.assert_allclose(cov.K, cov.K.T, atol=1e-12)

    @pytest.mark.parametrize("alpha", [0.0, 0.5])
    def test_se_scales_with_duplication(self, data_main, alpha):
        res = est.fit_dpd(data_main, est.DpdConfig(alpha, weights=False))
        one = inf.sandwich_covariance(res.theta_hat, data_main, alpha)
        doubled = Dataset(np.tile(data_main.x, 2), np.tile(data_main.y, 2), 5)
        two = inf.sandwich_covariance(res.theta_hat, doubled, alpha)
        np.testing.assert_allclose(two.se ** 2, one.se ** 2 / 2, rtol=0.05)

    def test_gross_error_ml_singular(self, data_main):
        x = data_main.x.copy()
        y = data_main.y.copy()
        x[0], y[0] = 1e6, 1
        data = Dataset(x, y, 5)
        ml = est.fit_ml(data, est.DpdConfig(0.0, weights=False))
        assert inf.sandwich_covariance(ml.theta_hat, data, 0.0).singular
        rob = est.fit_dpd(data, est.DpdConfig(0.5, weights=False))
        cov = inf.sandwich_covariance(rob.theta_hat, data, 0.5)
        assert not cov.singular and np.all(np.isfinite(cov.se))

    def test_singular_matrix_flagged(self):
        data = Dataset([0.0, 0.0, 0.0, 0.0], [1, 1, 2, 2], 2)
        cov = inf.sandwich_covariance(model.ParamVector(0.0, 0.0, 1.0, (0.0,)), data, 0.0)
        assert cov.singular and cov.se is None


class TestIntervals:
    def test_degenerate(self):
        ci = inf.confidence_interval(0.3, 0.0)
        assert ci.lower == ci.upper == 0.3

    def test_example(self):
        ci = inf.confidence_interval(0.5, 0.036, 0.05)
        assert ci.lower == pytest.approx(0.429, abs=5e-4)
        assert ci.upper == pytest.approx(0.571, abs=5e-4)
        assert ci.length == pytest.approx(0.141, abs=5e-4)
        assert ci.level == 0.95

    def test_wide_gamma(self):
        ci = inf.confidence_interval(0.0, 1.0, 0.32)
        assert ci.upper == pytest.approx(0.994, abs=5e-4)

    @given(st.floats(-1, 1), st.floats(0, 1), st.floats(0.001, 0.999))
    @settings(deadline=None)
    def test_width_identity(self, est_, se, gamma):
        ci = inf.confidence_interval(est_, se, gamma)
        assert ci.lower <= ci.upper
        assert ci.length == pytest.approx(2 * norm.ppf(1 - gamma / 2) * se, rel=1e-12, abs=1e-15)

    @pytest.mark.parametrize("se,gamma", [(-0.1, 0.05), (np.nan, 0.05), (0.1, 0.0), (0.1, 1.0)])
    def test_rejects_bad_input(self, se, gamma):
        with pytest.raises(ValueError):
            inf.confidence_interval(0.0, se, gamma)
