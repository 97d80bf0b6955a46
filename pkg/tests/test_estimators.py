import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from polyserial import estimators as est
from polyserial import model
from polyserial import simulation as sim
from polyserial.model import Dataset, ParamVector

from conftest import THETA_MAIN, draw_dataset, params


@pytest.fixture(scope="module")
def fit_main(data_main):
    return est.fit_dpd(data_main, est.DpdConfig(0.5))


@pytest.fixture(scope="module")
def large_contaminated():
    design = sim.SimDesign(THETA_MAIN, 10_000, 0.15, "shifted-t", seed=0, repetitions=1)
    return sim.sample_contaminated(design, np.random.default_rng(20240605))


class TestConfig:
    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_alpha_range(self, alpha):
        with pytest.raises(ValueError):
            est.DpdConfig(alpha)

    def test_default_alpha(self):
        assert est.DpdConfig().alpha == 0.5


class TestTwoStep:
    def test_tiny_example(self):
        data = Dataset([1.0, 2.0, 3.0, 4.0], [1, 1, 2, 2], 2)
        res = est.fit_two_step(data)
        assert res.theta_hat.tau[0] == pytest.approx(0.0, abs=1e-15)
        assert res.theta_hat.mu == pytest.approx(2.5)
        assert res.theta_hat.sigma2 == pytest.approx(5.0 / 3.0)

    def test_close_to_ml(self):
        diffs = []
        for seed in range(200):
            data = draw_dataset(THETA_MAIN, 500, 1000 + seed)
            cfg = est.DpdConfig(0.0, weights=False)
            diffs.append(abs(est.fit_two_step(data, cfg).theta_hat.rho - est.fit_ml(data, cfg).theta_hat.rho))
        assert np.mean(diffs) < 0.01

    def test_empty_interior_category(self):
        data = Dataset([0.1, 0.2, 0.3, 0.4], [1, 1, 3, 3], 3)
        with pytest.raises(est.EmptyCategoryError, match="2"):
            est.fit_two_step(data)


class TestML:
    def test_empty_category_message(self):
        data = Dataset([0.1, 0.2, 0.3, 0.4], [1, 2, 2, 4], 4)
        with pytest.raises(est.EmptyCategoryError) as info:
            est.fit_ml(data)
        assert info.value.categories == [3]
        assert "merge" in str(info.value)

    def test_grid_oracle_tiny(self):
        # ML for (mu, sigma2) is the sample mean and N-divisor variance because the conditional
        # probit absorbs them, so a grid over (rho, tau1) at those values is an exact oracle
        th = ParamVector(0.6, 1.0, 2.0, (0.2,))
        data = draw_dataset(th, 30, 5)
        res = est.fit_ml(data)
        mu, v = data.x.mean(), data.x.var()
        rhos = np.arange(-0.99, 0.995, 0.01)[:, None, None]
        taus = np.arange(-2.0, 2.0, 0.01)[None, :, None]
        z = ((data.x - mu) / math.sqrt(v))[None, None, :]
        a = (taus - rhos * z) / np.sqrt(1 - rhos ** 2)
        ll = np.where(data.y == 1, stats.norm.logcdf(a), stats.norm.logsf(a)).sum(axis=2)
        i, k = np.unravel_index(np.argmax(ll), ll.shape)
        arg = (rhos[i, 0, 0], taus[0, k, 0])
        assert res.theta_hat.mu == pytest.approx(mu, abs=1e-5)
        assert res.theta_hat.sigma2 == pytest.approx(v, rel=1e-4)
        assert abs(res.theta_hat.rho - arg[0]) <= 0.01 + 1e-9
        assert abs(res.theta_hat.tau[0] - arg[1]) <= 0.01 + 1e-9

    def test_independent_data(self):
        th = THETA_MAIN.replace(rho=0.0)
        data = draw_dataset(th, 2000, 3)
        res = est.fit_ml(data)
        assert abs(res.theta_hat.rho) < 3 / math.sqrt(2000)

    def test_dpd_alpha_zero_dispatches(self, data_main):
        a = est.fit_ml(data_main)
        b = est.fit_dpd(data_main, est.DpdConfig(0.0))
        np.testing.assert_array_equal(a.theta_hat.to_array(), b.theta_hat.to_array())
        assert np.all(b.weights == 1.0) and b.m_alpha == 1.0


class TestObjective:
    def test_kl_limit(self, data_main):
        # D_alpha -> -mean log p with an O(alpha) gap
        nll = -np.mean(model.log_density(THETA_MAIN, data_main.x, data_main.y))
        gaps = [abs(est.dpd_objective(THETA_MAIN, data_main, a) - nll) for a in (1e-2, 1e-3, 1e-4)]
        assert gaps[2] < 1e-3
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[1] / gaps[2] == pytest.approx(10.0, rel=0.1)

    def test_single_observation_oracle(self):
        data = Dataset([0.0], [3], 5)
        a = 0.5
        integral = sum(integrate.quad(lambda v: float(model.joint_density(THETA_MAIN, v, y)) ** (1 + a),
                                      -np.inf, np.inf, epsabs=1e-14, epsrel=1e-13)[0] for y in range(1, 6))
        p = float(model.joint_density(THETA_MAIN, 0.0, 3))
        expect = integral - (1 + 1 / a) * p ** a + 1 / a
        assert est.dpd_objective(THETA_MAIN, data, a) == pytest.approx(expect, abs=1e-8)

    def test_truth_beats_perturbation(self):
        data = draw_dataset(THETA_MAIN, 20_000, 8)
        at_truth = est.dpd_objective(THETA_MAIN, data, 0.5)
        for shift in (-0.2, 0.2):
            assert at_truth < est.dpd_objective(THETA_MAIN.replace(rho=0.5 + shift), data, 0.5)

    def test_permutation_invariance(self, data_main):
        perm = np.random.default_rng(0).permutation(data_main.n)
        shuffled = Dataset(data_main.x[perm], data_main.y[perm], 5)
        assert est.dpd_objective(THETA_MAIN, shuffled, 0.7) == pytest.approx(
            est.dpd_objective(THETA_MAIN, data_main, 0.7), rel=1e-13)

    def test_rejects_alpha_zero(self, data_main):
        with pytest.raises(ValueError):
            est.dpd_objective(THETA_MAIN, data_main, 0.0)


class TestEstimatingEquation:
    def test_alpha_zero_correction_vanishes(self):
        np.testing.assert_allclose(est.correction_term(THETA_MAIN, 0.0), 0.0, atol=1e-6)

    def test_residual_small_at_fit(self, fit_main, data_main):
        r = est.estimating_equation_residual(fit_main.theta_hat, data_main, 0.5)
        assert np.linalg.norm(r) < 1e-4

    @pytest.mark.parametrize("alpha", [0.1, 0.5, 1.0])
    def test_residual_is_scaled_gradient(self, data_main, alpha):
        th = np.array([0.4, 0.1, 1.2, -1.4, -0.6, 0.4, 1.6])
        h = 1e-5
        fd = np.zeros(th.size)
        for j in range(th.size):
            e = np.zeros(th.size)
            e[j] = h
            fd[j] = (est.dpd_objective(th + e, data_main, alpha) - est.dpd_objective(th - e, data_main, alpha)) / (2 * h)
        resid = est.estimating_equation_residual(th, data_main, alpha)
        np.testing.assert_allclose(-(1 + alpha) * resid, fd, atol=1e-5)


class TestFitDpd:
    def test_converges_near_truth(self, fit_main):
        assert fit_main.converged
        assert abs(fit_main.theta_hat.rho - 0.5) < 0.1
        assert fit_main.method_used == "quasi-newton"
        assert not fit_main.threshold_instability

    def test_instability_flag(self):
        th = ParamVector(0.5, 0.0, 1.0, (-2.0, 2.0))
        assert est.threshold_unstable(th)
        assert not est.threshold_unstable(ParamVector(0.5, 0.0, 1.0, (-1.9, 2.0)))

    @pytest.mark.parametrize("alpha", [0.0, 0.5])
    def test_location_scale_equivariance(self, data_main, alpha):
        cfg = est.DpdConfig(alpha, weights=False)
        base = est.fit_dpd(data_main, cfg).theta_hat
        c, s = 3.5, 2.5
        moved = est.fit_dpd(Dataset(s * data_main.x + c, data_main.y, 5), cfg).theta_hat
        assert moved.mu == pytest.approx(s * base.mu + c, abs=1e-4 * s)
        assert moved.sigma == pytest.approx(s * base.sigma, rel=1e-4)
        assert moved.rho == pytest.approx(base.rho, abs=1e-4)
        np.testing.assert_allclose(moved.tau, base.tau, atol=1e-4)

    def test_heavy_shifted_t_contamination(self, large_contaminated):
        data = large_contaminated.data
        robust = est.fit_dpd(data, est.DpdConfig(0.5))
        ml = est.fit_ml(data)
        assert abs(robust.theta_hat.rho - 0.498) < 0.03
        assert abs(ml.theta_hat.rho - (-0.522)) < 0.03


class TestWeights:
    def test_m_alpha_grid_oracle(self):
        th = THETA_MAIN
        alpha = 0.5
        xs = np.arange(-8.0, 8.0 + 5e-4, 1e-3)
        grid = max(np.max(model.joint_density(th, xs, np.full(xs.size, y)) ** alpha) for y in range(1, 6))
        assert est.compute_m_alpha(th, alpha) == pytest.approx(grid, abs=1e-6)
        assert est.compute_m_alpha(th, alpha) >= grid - 1e-12

    def test_rho_zero_maximiser_at_mu(self):
        th = ParamVector(0.0, 1.3, 2.0, (-0.5, 0.7))
        probs = np.diff(np.concatenate(([0], model.std_normal_cdf(np.array(th.tau)), [1])))
        expect = (model.std_normal_pdf(0.0) / th.sigma * probs.max()) ** 0.7
        assert est.compute_m_alpha(th, 0.7) == pytest.approx(expect, rel=1e-12)

    def test_alpha_zero_all_ones(self, data_main):
        assert np.all(est.compute_weights(THETA_MAIN, data_main, 0.0) == 1.0)
        assert est.compute_m_alpha(THETA_MAIN, 0.0) == 1.0

    @given(params(max_r=5), st.floats(0.01, 1.0), st.integers(0, 2 ** 31))
    @settings(max_examples=25, deadline=None)
    def test_weights_in_unit_interval(self, th, alpha, seed):
        data = draw_dataset(th, 200, seed)
        w = est.compute_weights(th, data, alpha)
        assert np.all((w >= 0) & (w <= 1))
        raw = model.joint_density(th, data.x, data.y) ** alpha
        assert np.all(raw <= est.compute_m_alpha(th, alpha) * (1 + 1e-12))

    def test_argmax_observation_gets_weight_one(self):
        th = THETA_MAIN
        xs = np.linspace(-3, 3, 60001)
        lp = model.log_density(th, xs, np.full(xs.size, 3))
        x_best = xs[np.argmax(lp)]
        w = est.compute_weights(th, Dataset([x_best], [3], 5), 0.5)
        assert w[0] == pytest.approx(1.0, abs=1e-6)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_ratio_monotone_in_alpha(self, a1, a2):
        data = Dataset([0.0, 2.5], [3, 1], 5)
        lo, hi = sorted((a1, a2))
        r = lambda a: np.divide(*est.compute_weights(THETA_MAIN, data, a)[::-1]) if a > 0 else 1.0
        # observation 2 is less likely than observation 1
        assert r(hi) <= r(lo) + 1e-12

    def test_contaminated_rows_downweighted(self, large_contaminated):
        res = est.fit_dpd(large_contaminated.data, est.DpdConfig(0.5))
        w = res.weights
        assert w[large_contaminated.contaminated].mean() < w[~large_contaminated.contaminated].mean()

    def test_gross_error_row_has_min_weight(self, data_main):
        x = np.append(data_main.x, 1e3)
        y = np.append(data_main.y, 5)
        data = Dataset(x, y, 5)
        res = est.fit_dpd(data, est.DpdConfig(0.5))
        assert int(np.argmin(res.weights)) == data.n - 1
