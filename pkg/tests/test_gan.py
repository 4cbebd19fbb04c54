import numpy as np
import pytest

from tridiff import gan
from tridiff.grad import Tensor, backward, grad, reset_tape, no_grad
from conftest import finite_diff_grad, rel_err


class TestLogisticF:
    def test_value_at_zero(self):
        out = gan.f_logistic(Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, -np.log(2.0), atol=1e-12)

    def test_monotone_increasing_and_limit(self):
        x = np.linspace(-20, 20, 200)
        y = gan.f_logistic(Tensor(x)).data
        assert np.all(np.diff(y) > 0)
        assert abs(gan.f_logistic(Tensor(np.array([60.0]))).data[0]) < 1e-12
        assert np.all(np.isfinite(
            gan.f_logistic(Tensor(np.array([-700.0, 700.0]))).data))

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal(12)
        reset_tape()
        t = Tensor(x0.copy(), requires_grad=True)
        backward(gan.f_logistic(t).sum())
        ga = t.grad.copy()
        gn = finite_diff_grad(
            lambda x: float(gan.f_logistic(Tensor(x)).data.sum()), x0.copy())
        assert rel_err(ga, gn) < 1e-6


class TestAdvObjective:
    def test_discriminator_value_at_zero_logits(self):
        fake = Tensor(np.zeros((3, 1)))
        real = Tensor(np.zeros((3, 1)))
        v = gan.adv_objective(fake, real, "discriminator")
        np.testing.assert_allclose(float(v.data), -2.0 * np.log(2.0),
                                   atol=1e-12)

    def test_generator_readout_direction(self):
        # ascending the generator objective means pushing fake logits up
        fake = Tensor(np.array([[0.0]]), requires_grad=True)
        backward(gan.adv_objective(fake, Tensor(np.zeros((1, 1))), "generator"))
        assert fake.grad[0, 0] > 0.0

    def test_losses_are_negated_objectives_at_optimum_direction(self):
        rng = np.random.default_rng(1)
        fake = Tensor(rng.standard_normal((5, 1)))
        real = Tensor(rng.standard_normal((5, 1)))
        v = gan.adv_objective(fake, real, "discriminator")
        loss = gan.discriminator_loss(fake, real)
        np.testing.assert_allclose(float(loss.data), -float(v.data), atol=1e-12)
        g = gan.generator_loss(fake)
        vg = gan.adv_objective(fake, real, "generator")
        np.testing.assert_allclose(float(g.data), -float(vg.data), atol=1e-12)

    def test_unknown_role_rejected(self):
        with pytest.raises(ValueError):
            gan.adv_objective(Tensor(np.zeros(1)), Tensor(np.zeros(1)), "judge")

    def test_finite_for_extreme_logits(self):
        fake = Tensor(np.array([[-500.0], [500.0]]))
        real = Tensor(np.array([[500.0], [-500.0]]))
        assert np.isfinite(float(gan.discriminator_loss(fake, real).data))
        assert np.isfinite(float(gan.generator_loss(fake).data))


class TestMinibatchStd:
    def test_appends_one_channel_preserving_features(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((4, 3, 5, 5)))
        out = gan.minibatch_std(x)
        assert out.shape == (4, 4, 5, 5)
        np.testing.assert_array_equal(out.data[:, :3], x.data)

    def test_identical_batch_appends_exactly_zero(self):
        one = np.random.default_rng(3).standard_normal((1, 3, 4, 4))
        x = Tensor(np.repeat(one, 5, axis=0))
        out = gan.minibatch_std(x)
        np.testing.assert_array_equal(out.data[:, 3], np.zeros((5, 4, 4)))

    def test_stat_tracks_population_std(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((64, 2, 3, 3)) * 2.5)
        out = gan.minibatch_std(x)
        stat = out.data[0, 2, 0, 0]
        assert 2.0 < stat < 3.0


class TestDiscriminators:
    def test_image_disc_shapes_and_channel_check(self):
        rng = np.random.default_rng(5)
        disc = gan.ImageDiscriminator(rng, 32)
        x = Tensor(rng.uniform(0, 1, (2, 6, 32, 32)))
        out = disc(x)
        assert out.shape == (2, 1)
        with pytest.raises(ValueError):
            disc(Tensor(np.zeros((2, 3, 32, 32))))

    def test_depth_disc_rejects_out_of_range(self):
        rng = np.random.default_rng(6)
        disc = gan.DepthDiscriminator(rng, 16)
        ok = Tensor(np.random.default_rng(7).uniform(0, 1, (2, 1, 16, 16)))
        assert disc(ok).shape == (2, 1)
        with pytest.raises(ValueError):
            disc(Tensor(np.full((2, 1, 16, 16), 1.7)))

    def test_symmetric_populations_near_balanced(self):
        # identical real/fake populations: discriminator objective at D == 0
        # is already the symmetric optimum value -2 log 2
        rng = np.random.default_rng(8)
        disc = gan.DepthDiscriminator(rng, 16)
        for p in disc.params():
            p.data[:] = 0.0
        batch = Tensor(rng.uniform(0, 1, (4, 1, 16, 16)))
        v = gan.adv_objective(disc(batch), disc(batch), "discriminator")
        np.testing.assert_allclose(float(v.data), -2 * np.log(2), atol=1e-12)


class TestDualInput:
    def test_channel_count_and_mismatch(self):
        rng = np.random.default_rng(9)
        low = Tensor(rng.uniform(0, 1, (2, 3, 8, 8)))
        high = Tensor(rng.uniform(0, 1, (2, 3, 32, 32)))
        pair = gan.dual_disc_input(low, high)
        assert pair.shape == (2, 6, 32, 32)
        with pytest.raises(ValueError):
            gan.dual_disc_input(low, Tensor(np.zeros((2, 3, 24, 24))))

    def test_identical_content_halves_close(self):
        rng = np.random.default_rng(10)
        high = Tensor(np.tile(rng.uniform(0.4, 0.6, (1, 3, 8, 1)), (1, 1, 1, 32)))
        low = Tensor(high.data[:, :, ::4, ::4].copy())
        pair = gan.dual_disc_input(low, high)
        assert np.max(np.abs(pair.data[:, :3] - pair.data[:, 3:])) < 0.15

    def test_real_pair_of_constant_image_is_constant(self):
        img = Tensor(np.full((1, 3, 32, 32), 0.42))
        pair = gan.real_pair(img)
        np.testing.assert_allclose(pair.data, 0.42, atol=1e-12)


class TestR1:
    def test_linear_disc_constant_gradient(self):
        gvec = np.random.default_rng(11).standard_normal(27)

        def disc(x):
            flat = x.reshape((x.shape[0], -1))
            from tridiff.grad import matmul
            return matmul(flat, Tensor(gvec[:, None]))

        x = Tensor(np.random.default_rng(12).standard_normal((4, 3, 3, 3)),
                   requires_grad=True)
        pen = gan.r1_penalty(disc, x, lam=2.5)
        np.testing.assert_allclose(float(pen.data), 2.5 * float(gvec @ gvec),
                                   atol=1e-9)

    def test_zero_lambda_short_circuits(self):
        x = Tensor(np.zeros((1, 1, 8, 8)), requires_grad=True)
        assert float(gan.r1_penalty(lambda t: t, x, 0.0).data) == 0.0

    def test_penalty_matches_fd_gradient_norm(self):
        rng = np.random.default_rng(13)
        disc = gan.DepthDiscriminator(rng, 8)
        x0 = rng.uniform(0.2, 0.8, (1, 1, 8, 8))
        x = Tensor(x0.copy(), requires_grad=True)
        pen = gan.r1_penalty(disc, x, lam=1.0)

        def scalar_disc(xa):
            return float(disc(Tensor(xa)).data.sum())

        gn = finite_diff_grad(scalar_disc, x0.copy(), h=1e-5)
        np.testing.assert_allclose(float(pen.data), float((gn ** 2).sum()),
                                   rtol=1e-3)

    def test_r1_gradients_reach_disc_params(self):
        rng = np.random.default_rng(14)
        disc = gan.DepthDiscriminator(rng, 8)
        x = Tensor(rng.uniform(0, 1, (2, 1, 8, 8)), requires_grad=True)
        pen = gan.r1_penalty(disc, x, lam=1.0)
        backward(pen)
        total = sum(float(np.abs(p.grad).sum())
                    for p in disc.params() if p.grad is not None)
        assert total > 0.0

    def test_lazy_compensation_bookkeeping(self):
        # applying lambda*16 every 16th step accumulates the same total
        # pressure as lambda every step when the penalty is static
        lam, interval, steps = 1.3, 16, 64
        static_penalty = 0.7
        every = sum(lam * static_penalty for _ in range(steps))
        lazy = sum(lam * interval * static_penalty
                   for s in range(steps) if s % interval == 0)
        assert abs(every - lazy) < 1e-12
