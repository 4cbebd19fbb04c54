import numpy as np
import pytest

from tridiff import diffusion as df
from tridiff.grad import Tensor, backward, reset_tape, no_grad
from conftest import finite_diff_grad, rel_err


@pytest.fixture(scope="module")
def sched():
    return df.cosine_schedule()


def gaussian_oracle_v(sched, mu0, s0):
    """Exact posterior v-predictor for x ~ N(mu0, s0^2) i.i.d. elements."""

    def fn(x, tau):
        a, s = sched.alpha[tau], sched.sigma[tau]
        var_t = a * a * s0 * s0 + s * s
        x0h = mu0 + (a * s0 * s0 / var_t) * (x - a * mu0)
        epsh = (x - a * x0h) / s
        return a * epsh - s * x0h

    return fn


class TestCosineSchedule:
    def test_endpoints(self, sched):
        assert sched.alpha[0] == 1.0 and sched.sigma[0] == 0.0
        # before clipping, alpha_bar(T) is cos^2(pi/2) ~ 0
        tau = np.array([1000.0])
        f = np.cos(((tau / 1000 + 0.008) / 1.008) * np.pi / 2) ** 2
        assert f[0] < 1e-30

    def test_variance_preserving_all_steps(self, sched):
        check = sched.alpha ** 2 + sched.sigma ** 2
        assert np.max(np.abs(check - 1.0)) < 1e-12

    def test_alpha_strictly_decreasing(self, sched):
        assert np.all(np.diff(sched.alpha) < 0.0)

    def test_floor_applied(self, sched):
        assert sched.alpha[-1] ** 2 >= df.ALPHA_BAR_FLOOR * (1 - 1e-12)

    def test_bad_step_count(self):
        with pytest.raises(ValueError):
            df.cosine_schedule(0)


class TestForwardProcess:
    def test_tau_zero_identity(self, sched):
        x = np.random.default_rng(0).standard_normal(8)
        out = df.diffuse(x, 0, np.ones(8), sched)
        np.testing.assert_array_equal(out, x)

    def test_tau_T_is_noise(self, sched):
        x = np.full(4, 100.0)
        eps = np.random.default_rng(1).standard_normal(4)
        out = df.diffuse(x, sched.timesteps, eps, sched)
        assert np.max(np.abs(out - eps)) < 0.05   # alpha_T ~ 3e-4

    def test_second_moment_identity(self, sched):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(16)
        tau = 400
        a, s = sched.alpha[tau], sched.sigma[tau]
        draws = np.array([
            np.sum(df.diffuse(x, tau, rng.standard_normal(16), sched) ** 2)
            for _ in range(10_000)])
        expect = a * a * np.sum(x * x) + s * s * 16
        # var of ||x_tau||^2 ~ 2 sigma^4 dim + 4 sigma^2 alpha^2 ||x||^2
        se = np.sqrt((2 * s ** 4 * 16 + 4 * s * s * a * a * np.sum(x * x))
                     / 10_000)
        assert abs(draws.mean() - expect) < 3 * se


class TestVParameterization:
    def test_tau_zero_v_is_eps(self, sched):
        x = np.random.default_rng(3).standard_normal(5)
        eps = np.random.default_rng(4).standard_normal(5)
        np.testing.assert_array_equal(df.v_target(x, eps, 0, sched), eps)

    def test_zero_noise(self, sched):
        x = np.random.default_rng(5).standard_normal(5)
        v = df.v_target(x, np.zeros(5), 300, sched)
        np.testing.assert_allclose(v, -sched.sigma[300] * x, atol=1e-15)

    def test_reconstruction_identity(self, sched):
        rng = np.random.default_rng(6)
        for tau in [1, 250, 500, 999, 1000]:
            x = rng.standard_normal(32)
            eps = rng.standard_normal(32)
            x_tau = df.diffuse(x, tau, eps, sched)
            v = df.v_target(x, eps, tau, sched)
            back = sched.alpha[tau] * x_tau - sched.sigma[tau] * v
            np.testing.assert_allclose(back, x, atol=1e-12)

    def test_conversion_triangle_exact(self, sched):
        rng = np.random.default_rng(7)
        for tau in [1, 123, 789, 1000]:
            x_tau = rng.standard_normal(16)
            v = rng.standard_normal(16)
            eps = df.v_to_eps(x_tau, v, tau, sched)
            v2 = df.eps_to_v(x_tau, eps, tau, sched)
            np.testing.assert_allclose(v2, v, atol=1e-12)
            x0 = df.v_to_x0(x_tau, v, tau, sched)
            v3 = df.x0_to_v(x_tau, x0, tau, sched)
            if sched.sigma[tau] > 1e-6:
                np.testing.assert_allclose(v3, v, atol=1e-9)


class TestCfg:
    def test_scale_one_identity_exact(self):
        rng = np.random.default_rng(8)
        u, c = rng.standard_normal(9), rng.standard_normal(9)
        out = df.cfg_combine(u, c, 1.0)
        assert out is c

    def test_scale_zero(self):
        rng = np.random.default_rng(9)
        u, c = rng.standard_normal(9), rng.standard_normal(9)
        np.testing.assert_array_equal(df.cfg_combine(u, c, 0.0), u)

    def test_scale_two(self):
        rng = np.random.default_rng(10)
        u, c = rng.standard_normal(9), rng.standard_normal(9)
        np.testing.assert_allclose(df.cfg_combine(u, c, 2.0), 2 * c - u,
                                   atol=1e-15)


class TestDDim:
    def test_perfect_denoiser_x0_recovery(self, sched):
        rng = np.random.default_rng(11)
        x = rng.standard_normal(8)
        eps = rng.standard_normal(8)
        tau = 600
        x_tau = df.diffuse(x, tau, eps, sched)
        v = df.v_target(x, eps, tau, sched)
        out = df.ddim_step(x_tau, v, tau, 0, sched, eta=0.0)
        np.testing.assert_allclose(out, x, atol=1e-12)

    def test_deterministic_at_eta_zero(self, sched):
        rng = np.random.default_rng(12)
        x_tau = rng.standard_normal(6)
        v = rng.standard_normal(6)
        a = df.ddim_step(x_tau, v, 500, 400, sched, eta=0.0)
        b = df.ddim_step(x_tau, v, 500, 400, sched, eta=0.0)
        assert np.array_equal(a, b)

    def test_invalid_ordering_rejected(self, sched):
        x = np.zeros(3)
        with pytest.raises(ValueError):
            df.ddim_step(x, x, 100, 200, sched)
        with pytest.raises(ValueError):
            df.ddim_step(x, x, 100, 100, sched)

    def test_eta_requires_rng(self, sched):
        x = np.zeros(3)
        with pytest.raises(ValueError):
            df.ddim_step(x, x, 200, 100, sched, eta=1.0)

    def test_substep_grid(self, sched):
        taus = df.ddim_taus(1000, 200)
        assert taus[0] == 0 and taus[-1] == 1000
        assert len(taus) == 201
        assert np.all(np.diff(taus) > 0)


class TestGaussianOracle:
    """200-step eta=0 chain against the closed-form Gaussian marginal."""

    MU0, S0 = 0.7, 1.3

    def test_marginal_mean_std_within_one_percent(self, sched):
        v_fn = gaussian_oracle_v(sched, self.MU0, self.S0)
        # the chain map is affine; probing 0 and 1 yields (offset, gain),
        # so the output law for x_T ~ N(0,1) is N(offset, gain^2) exactly
        z0 = df.ddim_sample(v_fn, np.zeros(1), sched, steps=200, eta=0.0)
        z1 = df.ddim_sample(v_fn, np.ones(1), sched, steps=200, eta=0.0)
        offset = float(z0[0])
        gain = abs(float(z1[0] - z0[0]))
        assert abs(offset - self.MU0) / self.MU0 < 0.01
        assert abs(gain - self.S0) / self.S0 < 0.01

    def test_invert_then_sample_roundtrip(self, sched):
        v_fn = gaussian_oracle_v(sched, self.MU0, self.S0)
        rng = np.random.default_rng(13)
        x0 = rng.normal(self.MU0, self.S0, size=16)
        enc = df.ddim_invert(v_fn, x0, sched, steps=200)
        back = df.ddim_sample(v_fn, enc, sched, steps=200, eta=0.0)
        assert np.max(np.abs(back - x0)) < 1e-6

    def test_sample_then_invert_bijection(self, sched):
        v_fn = gaussian_oracle_v(sched, self.MU0, self.S0)
        rng = np.random.default_rng(14)
        z = rng.standard_normal(16)
        x = df.ddim_sample(v_fn, z, sched, steps=200, eta=0.0)
        z2 = df.ddim_invert(v_fn, x, sched, steps=200)
        assert np.max(np.abs(z2 - z)) < 1e-5

    def test_invert_zero_steps_identity(self, sched):
        v_fn = gaussian_oracle_v(sched, self.MU0, self.S0)
        x0 = np.random.default_rng(15).standard_normal(7)
        np.testing.assert_array_equal(df.ddim_invert(v_fn, x0, sched, steps=0),
                                      x0)


class TestPartialResample:
    def test_tau_zero_identity(self, sched):
        x0 = np.random.default_rng(16).standard_normal(8)
        rng = np.random.default_rng(17)
        out = df.partial_resample(x0, 0, None, sched, rng)
        np.testing.assert_array_equal(out, x0)

    def test_full_noising_almost_forgets_input(self, sched):
        v_fn = gaussian_oracle_v(sched, 0.7, 1.3)
        a = df.partial_resample(np.zeros(8), 1000, v_fn, sched,
                                np.random.default_rng(18), eta=0.0)
        b = df.partial_resample(np.full(8, 3.0), 1000, v_fn, sched,
                                np.random.default_rng(18), eta=0.0)
        # alpha_T ~ 3e-4 leaves only a vanishing trace of x0
        assert np.max(np.abs(a - b)) < 1e-2

    def test_variance_interpolates_monotonically(self, sched):
        v_fn = gaussian_oracle_v(sched, 0.0, 1.3)
        rng_master = np.random.default_rng(19)
        x0 = np.zeros(512)
        spreads = []
        for tau_stop in [100, 400, 700, 1000]:
            out = df.partial_resample(x0, tau_stop, v_fn, sched,
                                      np.random.default_rng(20), eta=0.0)
            spreads.append(out.std())
        assert all(np.diff(spreads) > 0)
        assert spreads[0] < 0.6 and spreads[-1] > 1.0

    def test_out_of_range_rejected(self, sched):
        with pytest.raises(ValueError):
            df.partial_resample(np.zeros(3), 2000, None, sched,
                                np.random.default_rng(0))


class TestLatentScaler:
    def test_unit_std_passthrough(self):
        rng = np.random.default_rng(21)
        z = rng.standard_normal((128, 4, 8, 8))
        z = z / z.std()
        sc = df.LatentScaler.fit(z)
        assert abs(sc.estimated_std - 1.0) < 1e-12

    def test_std_four_divides(self):
        rng = np.random.default_rng(22)
        z = 4.0 * rng.standard_normal((128, 4, 8, 8))
        sc = df.LatentScaler.fit(z)
        assert abs(sc.estimated_std - 4.0) < 0.1
        assert abs(sc.normalize(z).std() - 1.0) < 0.02

    def test_heldout_std_in_band(self):
        rng = np.random.default_rng(23)
        z_fit = 2.7 * rng.standard_normal((256, 4, 8, 8))
        z_heldout = 2.7 * rng.standard_normal((256, 4, 8, 8))
        sc = df.LatentScaler.fit(z_fit)
        assert 0.8 <= sc.normalize(z_heldout).std() <= 1.2

    def test_small_batch_rejected(self):
        with pytest.raises(ValueError):
            df.LatentScaler.fit(np.zeros((32, 4, 8, 8)))

    def test_scale_unscale_roundtrip(self):
        sc = df.LatentScaler(2.0, 0.5)
        z = np.random.default_rng(24).standard_normal(16)
        np.testing.assert_allclose(sc.unscale(sc.scale(z)), z, atol=1e-12)

    def test_array_roundtrip(self):
        sc = df.LatentScaler(3.3, 0.5)
        sc2 = df.LatentScaler.from_arrays(sc.arrays())
        assert sc2.estimated_std == sc.estimated_std
        assert sc2.scale_factor == sc.scale_factor


class TestDenoiser:
    def _model(self, seed=25):
        rng = np.random.default_rng(seed)
        return df.Denoiser(rng, (4, 8, 8), n_classes=4, channels=16)

    def test_output_shape_matches_input(self):
        model = self._model()
        x = Tensor(np.random.default_rng(26).standard_normal((3, 4, 8, 8)))
        out = model(x, 500, np.array([0, 1, 2]))
        assert out.shape == (3, 4, 8, 8)

    def test_zero_init_final_layer(self):
        model = self._model()
        x = Tensor(np.random.default_rng(27).standard_normal((2, 4, 8, 8)))
        out = model(x, 100, 0)
        np.testing.assert_array_equal(out.data, np.zeros((2, 4, 8, 8)))

    def test_class_conditioning_changes_output(self):
        model = self._model()
        model.conv_out.w.data[:] = np.random.default_rng(28).standard_normal(
            model.conv_out.w.shape) * 0.1
        x = Tensor(np.random.default_rng(29).standard_normal((1, 4, 8, 8)))
        with no_grad():
            a = model(x, 300, 0).data
            b = model(x, 300, 1).data
            c = model(x, 300, model.null_class()).data
        assert not np.allclose(a, b)
        assert not np.allclose(a, c)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(30)
        model = df.Denoiser(rng, (2, 4, 4), n_classes=2, channels=8)
        model.conv_out.w.data[:] = 0.05 * rng.standard_normal(
            model.conv_out.w.shape)
        x0 = rng.standard_normal((1, 2, 4, 4))

        def f_t(t):
            return (model(t, 321, 1) ** 2.0).sum()

        def f_np(x):
            with no_grad():
                return float((model(Tensor(x), 321, 1).data ** 2).sum())

        reset_tape()
        t = Tensor(x0.copy(), requires_grad=True)
        backward(f_t(t))
        ga = t.grad.copy()
        gn = finite_diff_grad(f_np, x0.copy())
        assert rel_err(ga, gn) < 1e-4

    def test_parameter_gradient_matches_fd(self):
        rng = np.random.default_rng(31)
        model = df.Denoiser(rng, (2, 4, 4), n_classes=2, channels=8)
        x = np.random.default_rng(32).standard_normal((2, 2, 4, 4))
        target = np.random.default_rng(33).standard_normal((2, 2, 4, 4))

        def loss_fn():
            out = model(Tensor(x), 700, np.array([0, 1]))
            d = out - target
            return (d * d).mean()

        reset_tape()
        backward(loss_fn())
        p = model.res_mid.c1.w
        analytic = p.grad[(0, 0, 1, 1)]
        h = 1e-5
        orig = p.data[(0, 0, 1, 1)]
        with no_grad():
            p.data[(0, 0, 1, 1)] = orig + h
            fp = float(loss_fn().data)
            p.data[(0, 0, 1, 1)] = orig - h
            fm = float(loss_fn().data)
            p.data[(0, 0, 1, 1)] = orig
        numeric = (fp - fm) / (2 * h)
        assert abs(analytic - numeric) / max(abs(numeric), 1e-10) < 1e-4

    def test_guided_v_fn_scale_one_skips_uncond(self, sched):
        model = self._model()
        fn1 = model.v_fn(sched, class_id=2, guidance_scale=1.0)
        fn2 = model.v_fn(sched, class_id=2, guidance_scale=2.0)
        x = np.random.default_rng(34).standard_normal((1, 4, 8, 8))
        out1 = fn1(x, 500)
        out2 = fn2(x, 500)
        assert out1.shape == x.shape and out2.shape == x.shape
