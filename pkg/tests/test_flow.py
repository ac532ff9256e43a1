import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lindit.errors import ConfigError, DimensionError, DivergenceError, DomainError
from lindit.flow import (
    DDPMSchedule,
    FlowSchedule,
    TrainBatch,
    ddpm_loss,
    fm_loss,
    forward_marginal,
    gaussian_flow_map,
    gaussian_oracle_data_prediction,
    gaussian_oracle_noise,
    gaussian_oracle_velocity,
    sample_batch,
    shift_sigma,
    timestep_grid,
    unshift_sigma,
    velocity_target,
)
from lindit.numerics import Tape, Tensor, scale


class TestShift:
    def test_identity_at_one(self):
        for s in np.linspace(0, 1, 11):
            assert shift_sigma(s, 1.0) == s

    def test_fixed_endpoints(self):
        for s in (1.0, 2.0, 3.0, 7.5):
            assert shift_sigma(0.0, s) == 0.0
            assert shift_sigma(1.0, s) == 1.0

    def test_hand_value(self):
        assert shift_sigma(0.5, 3.0) == 0.75

    def test_bad_shift(self):
        with pytest.raises(ConfigError):
            shift_sigma(0.5, 0.5)
        with pytest.raises(ConfigError):
            FlowSchedule(0.9)
        with pytest.raises(DomainError):
            shift_sigma(1.5, 2.0)

    @settings(max_examples=100, deadline=None)
    @given(s=st.floats(1.0, 20.0), a=st.floats(0, 1), b=st.floats(0, 1))
    def test_monotone_and_invertible(self, s, a, b):
        lo, hi = min(a, b), max(a, b)
        assert shift_sigma(lo, s) <= shift_sigma(hi, s)
        assert unshift_sigma(shift_sigma(a, s), s) == pytest.approx(a, abs=1e-12)

    @pytest.mark.parametrize("s", [1.0, 3.0])
    @pytest.mark.parametrize("M", [1, 4, 20, 1000])
    def test_alpha_plus_sigma_is_one(self, s, M):
        sched = FlowSchedule(s)
        g = timestep_grid(M)
        assert np.all(sched.alpha(g) + sched.sigma(g) == 1.0)

    def test_lambda_strictly_decreasing(self):
        for s in (1.0, 3.0):
            lam = FlowSchedule(s).lam(np.linspace(0.001, 0.999, 500))
            assert np.all(np.diff(lam) < 0)
        assert FlowSchedule().lam(1.0) == -np.inf
        assert FlowSchedule().lam(0.0) == np.inf

    def test_step_sign_along_sampling_grid(self):
        # sampling runs t: 1 -> t_min, so log-SNR increases and every step h_i is positive
        lam = FlowSchedule(3.0).lam(timestep_grid(10))
        assert np.all(np.diff(lam) > 0)


class TestMarginal:
    def test_endpoints(self):
        rng = np.random.default_rng(0)
        x0, eps = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        sched = FlowSchedule(2.0)
        np.testing.assert_array_equal(forward_marginal(x0, eps, 0.0, sched), x0)
        np.testing.assert_array_equal(forward_marginal(x0, eps, 1.0, sched), eps)

    def test_hand_value(self):
        assert forward_marginal(np.array([2.0]), np.array([0.0]), 0.25, FlowSchedule()) == pytest.approx(1.5)

    def test_per_sample_times(self):
        x0, eps = np.ones((2, 3)), np.zeros((2, 3))
        out = forward_marginal(x0, eps, np.array([0.0, 0.5]), FlowSchedule())
        np.testing.assert_array_equal(out, [[1, 1, 1], [0.5, 0.5, 0.5]])
        with pytest.raises(DimensionError):
            forward_marginal(x0, eps, np.array([0.1, 0.2, 0.3]), FlowSchedule())

    def test_velocity_target(self):
        np.testing.assert_array_equal(velocity_target([1.0, 2.0], [0.0, 1.0]), [-1.0, -1.0])
        x = np.array([0.3, -2.0])
        np.testing.assert_array_equal(velocity_target(x, x), [0, 0])
        np.testing.assert_array_equal(velocity_target(np.zeros(2), x), x)

    def test_ddpm_schedule(self):
        d = DDPMSchedule()
        t = np.linspace(0, 1, 101)
        ab = d.alpha_bar(t)
        assert ab[0] == pytest.approx(1.0) and ab[-1] == d.floor
        assert np.all(np.diff(ab) <= 0)
        np.testing.assert_allclose(d.alpha(t) ** 2 + d.sigma(t) ** 2, 1.0, rtol=1e-12)


def oracle_model(target_fn):
    def model(x_t, t, ctx):
        return Tensor(target_fn(x_t.data, t))
    return model


class TestLosses:
    def test_exact_oracle_gives_zero(self):
        rng = np.random.default_rng(1)
        b = TrainBatch(rng.standard_normal((4, 2)), rng.standard_normal((4, 2)), rng.uniform(0, 1, 4))
        assert fm_loss(oracle_model(lambda x, t: b.eps - b.x0), b, FlowSchedule()).item() == 0.0
        assert ddpm_loss(oracle_model(lambda x, t: b.eps), b, DDPMSchedule()).item() == 0.0

    def test_zero_model_zero_target(self):
        x = np.array([[0.7, -0.2]])
        b = TrainBatch(x, x.copy(), np.array([0.4]))
        assert fm_loss(oracle_model(lambda x, t: np.zeros_like(x)), b, FlowSchedule()).item() == 0.0

    def test_hand_mse(self):
        b = TrainBatch(np.array([[1.0]]), np.array([[0.0]]), np.array([0.3]))
        assert fm_loss(oracle_model(lambda x, t: np.zeros_like(x)), b, FlowSchedule()).item() == 1.0

    def test_differentiable(self):
        w = Tensor(np.array(0.5), requires_grad=True)
        b = TrainBatch(np.array([[1.0]]), np.array([[0.0]]), np.array([0.0]))
        # model(x) = w * x at t=0 where x_t = x0 = 1; target v = -1; loss = (w + 1)^2
        with Tape() as tape:
            loss = fm_loss(lambda x, t, c: scale(x, 1.0) * w, b, FlowSchedule())
        tape.backward(loss)
        assert w.grad == pytest.approx(2 * 1.5)

    def test_non_finite_loss(self):
        b = TrainBatch(np.array([[1.0]]), np.array([[0.0]]), np.array([0.3]))
        with pytest.raises(DivergenceError, match="step 7"):
            fm_loss(lambda x, t, c: scale(x, 1e308) * 1e10, b, FlowSchedule(), step=7)

    def test_sample_batch_seeded(self):
        x0 = np.zeros((5, 2))
        a = sample_batch(np.random.default_rng(3), x0)
        b = sample_batch(np.random.default_rng(3), x0)
        np.testing.assert_array_equal(a.eps, b.eps)
        np.testing.assert_array_equal(a.t, b.t)
        assert np.all((a.t >= 0) & (a.t <= 1))


MU, SD = 2.0, 0.5


class TestGaussianOracle:
    def test_t_zero_rejected(self):
        with pytest.raises(DomainError):
            gaussian_oracle_velocity(0.0, 0.0, MU, SD, FlowSchedule())

    def test_dirac_limit(self):
        sched = FlowSchedule()
        x = np.linspace(-3, 3, 7)
        for t in (0.1, 0.5, 0.9):
            np.testing.assert_allclose(gaussian_oracle_velocity(x, t, 1.5, 0.0, sched), (x - 1.5) / t, rtol=1e-12)

    def test_standard_normal_slope(self):
        sched = FlowSchedule()
        for t in (0.1, 0.3, 0.5, 0.9):
            v = gaussian_oracle_velocity(np.array([0.0, 1.0]), t, 0.0, 1.0, sched)
            assert v[0] == pytest.approx(0.0, abs=1e-15)
            assert v[1] - v[0] == pytest.approx((t - (1 - t)) / ((1 - t) ** 2 + t ** 2), rel=1e-12)

    def test_at_marginal_mean(self):
        sched = FlowSchedule(3.0)
        for t in (0.2, 0.6, 1.0):
            assert gaussian_oracle_velocity(sched.alpha(t) * MU, t, MU, SD, sched) == pytest.approx(-MU, rel=1e-12)

    @pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
    def test_monte_carlo_regression(self, t):
        rng = np.random.default_rng(int(t * 10))
        sched = FlowSchedule()
        x0 = MU + SD * rng.standard_normal(1_000_000)
        eps = rng.standard_normal(1_000_000)
        xt = forward_marginal(x0, eps, t, sched)
        slope, icpt = np.polyfit(xt, eps - x0, 1)
        for x in (sched.alpha(t) * MU - 1, sched.alpha(t) * MU, sched.alpha(t) * MU + 1):
            assert abs(slope * x + icpt - gaussian_oracle_velocity(x, t, MU, SD, sched)) <= 1e-2

    def test_data_prediction_monte_carlo(self):
        rng = np.random.default_rng(4)
        sched = FlowSchedule()
        x0 = MU + SD * rng.standard_normal(4_000_000)
        xt = forward_marginal(x0, rng.standard_normal(x0.size), 0.5, sched)
        sel = np.abs(xt - 1.0) < 0.02
        assert abs(x0[sel].mean() - gaussian_oracle_data_prediction(1.0, 0.5, MU, SD, sched)) <= 1e-2

    def test_data_prediction_limits(self):
        sched = FlowSchedule()
        x = np.array([-1.0, 0.0, 3.0])
        np.testing.assert_allclose(gaussian_oracle_data_prediction(x, 1.0, MU, SD, sched), MU)
        near_one = gaussian_oracle_data_prediction(x, 1 - 1e-6, MU, SD, sched)
        assert np.ptp(near_one) < 1e-5
        np.testing.assert_allclose(gaussian_oracle_data_prediction(x, 1e-9, MU, SD, sched), x, atol=1e-7)

    @pytest.mark.parametrize("s", [1.0, 3.0])
    def test_transformation_identity(self, s):
        sched = FlowSchedule(s)
        x = np.linspace(-4, 4, 33)
        for t in (0.05, 0.5, 0.95, 1.0):
            v = gaussian_oracle_velocity(x, t, MU, SD, sched)
            x0 = gaussian_oracle_data_prediction(x, t, MU, SD, sched)
            assert np.max(np.abs(x - sched.sigma(t) * v - x0)) <= 1e-12

    def test_noise_posterior_consistency(self):
        sched = FlowSchedule(2.0)
        x = np.linspace(-2, 2, 9)
        t = 0.4
        lhs = sched.alpha(t) * gaussian_oracle_data_prediction(x, t, MU, SD, sched) \
            + sched.sigma(t) * gaussian_oracle_noise(x, t, MU, SD, sched)
        np.testing.assert_allclose(lhs, x, rtol=1e-12)

    def test_flow_map_endpoints(self):
        sched = FlowSchedule(3.0)
        z = np.array([-1.0, 0.0, 2.0])
        np.testing.assert_allclose(gaussian_flow_map(z, 1.0, MU, SD, sched), z)
        np.testing.assert_allclose(gaussian_flow_map(z, 0.0, MU, SD, sched), MU + SD * z)


class TestGrid:
    def test_single_step(self):
        np.testing.assert_array_equal(timestep_grid(1, 1e-3), [1.0, 1e-3])

    def test_uniform(self):
        np.testing.assert_array_equal(timestep_grid(4, 0.0), [1.0, 0.75, 0.5, 0.25, 0.0])

    def test_decreasing(self):
        for M in range(1, 1001, 37):
            g = timestep_grid(M)
            assert g[0] == 1.0 and g[-1] == 1e-3 and np.all(np.diff(g) < 0)

    def test_zero_steps(self):
        with pytest.raises(ConfigError):
            timestep_grid(0)
