"""Objective-function checks against closed forms and summation oracles."""

import numpy as np
import pytest

from patchvad.errors import DataError
from patchvad.losses import (LossReport, LossWeights, classification_loss,
                             classification_loss_backward, discriminator_loss,
                             generator_loss, grad3d, reconstruction_loss,
                             reconstruction_loss_backward)


def naive_recon_loss(c, m, w):
    """Scalar loop oracle for the reconstruction objective, one cuboid."""
    l2 = 0.0
    for idx in np.ndindex(*c.shape):
        l2 += (float(c[idx]) - float(m[idx])) ** 2
    g = 0.0
    for arr_axis in (0, 1, 2):
        dc = np.diff(c, axis=arr_axis)
        dm = np.diff(m, axis=arr_axis)
        for idx in np.ndindex(*dc.shape):
            g += abs(abs(float(dc[idx])) - abs(float(dm[idx])))
    return w.lambda_l2 * l2 + w.lambda_grad * g


class TestWeights:
    def test_defaults(self):
        w = LossWeights()
        assert w.lambda_l2 == 1.0
        assert w.lambda_grad == pytest.approx(1.0 / 3.0)
        assert w.lambda_G == 0.25
        assert w.lambda_R == 1.0
        assert w.lambda_C == 1.0

    def test_negative_rejected(self):
        with pytest.raises(DataError):
            LossWeights(lambda_G=-0.1)


class TestGrad3d:
    def test_constant_is_zero(self):
        c = np.full((10, 10, 3), 0.7)
        for ax in ("x", "y", "t"):
            assert np.all(grad3d(c, ax) == 0)

    def test_time_ramp(self):
        c = np.zeros((10, 10, 3))
        c[:, :, 1] = 1.0
        c[:, :, 2] = 2.0
        np.testing.assert_array_equal(grad3d(c, "t"), np.ones((10, 10, 2)))

    def test_axis_lengths(self, rng):
        c = rng.normal(size=(10, 10, 3))
        assert grad3d(c, "x").shape == (10, 9, 3)
        assert grad3d(c, "y").shape == (9, 10, 3)
        assert grad3d(c, "t").shape == (10, 10, 2)

    def test_matches_shifted_subtraction(self, rng):
        c = rng.normal(size=(10, 10, 3))
        np.testing.assert_array_equal(grad3d(c, "x"), c[:, 1:, :] - c[:, :-1, :])
        np.testing.assert_array_equal(grad3d(c, "y"), c[1:, :, :] - c[:-1, :, :])
        np.testing.assert_array_equal(grad3d(c, "t"), c[:, :, 1:] - c[:, :, :-1])

    def test_unknown_axis_rejected(self):
        with pytest.raises(DataError):
            grad3d(np.zeros((10, 10, 3)), "z")


class TestReconstructionLoss:
    def test_perfect_reconstruction_is_zero(self, rng):
        c = rng.normal(size=(10, 10, 3))
        assert reconstruction_loss(c, c.copy(), LossWeights()) == 0.0

    def test_unit_error_closed_form(self):
        c = np.zeros((10, 10, 3))
        m = np.ones((10, 10, 3))
        w = LossWeights(lambda_grad=0.0)
        assert reconstruction_loss(c, m, w) == pytest.approx(300.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        r = np.random.default_rng(seed)
        c = r.normal(size=(10, 10, 3))
        m = r.normal(size=(10, 10, 3))
        w = LossWeights()
        assert reconstruction_loss(c, m, w) == pytest.approx(
            naive_recon_loss(c, m, w), rel=1e-6)

    def test_batch_is_mean_of_singles(self, rng):
        c = rng.normal(size=(4, 10, 10, 3))
        m = rng.normal(size=(4, 10, 10, 3))
        w = LossWeights()
        singles = [reconstruction_loss(c[i], m[i], w) for i in range(4)]
        assert reconstruction_loss(c, m, w) == pytest.approx(np.mean(singles),
                                                             rel=1e-12)

    def test_backward_matches_numeric(self, rng):
        c = rng.normal(size=(10, 10, 3))
        m = rng.normal(size=(10, 10, 3))
        w = LossWeights()
        dm = reconstruction_loss_backward(c, m, w)
        eps = 1e-6
        r = np.random.default_rng(99)
        for _ in range(30):
            idx = tuple(r.integers(0, s) for s in m.shape)
            old = m[idx]
            m[idx] = old + eps
            hi = reconstruction_loss(c, m, w)
            m[idx] = old - eps
            lo = reconstruction_loss(c, m, w)
            m[idx] = old
            np.testing.assert_allclose(dm[idx], (hi - lo) / (2 * eps), atol=1e-6)

    def test_nonnegative(self, rng):
        for _ in range(10):
            c = rng.normal(size=(10, 10, 3))
            m = rng.normal(size=(10, 10, 3))
            assert reconstruction_loss(c, m, LossWeights()) >= 0.0


class TestClassificationLoss:
    def test_perfect_prediction_is_zero(self):
        px = np.zeros((1, 16)); px[0, 5] = 1.0
        py = np.zeros((1, 12)); py[0, 7] = 1.0
        assert classification_loss(px, py, [5], [7]) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_is_log_grid(self):
        px = np.full((1, 16), 1.0 / 16.0)
        py = np.full((1, 12), 1.0 / 12.0)
        val = classification_loss(px, py, [3], [9])
        assert val == pytest.approx(np.log(16.0) + np.log(12.0), abs=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scalar_oracle(self, seed):
        r = np.random.default_rng(seed)
        px = r.dirichlet(np.ones(16), size=6)
        py = r.dirichlet(np.ones(12), size=6)
        lx = r.integers(0, 16, size=6)
        ly = r.integers(0, 12, size=6)
        acc = 0.0
        for i in range(6):
            acc += -np.log(max(px[i, lx[i]], 1e-12)) - np.log(max(py[i, ly[i]], 1e-12))
        assert classification_loss(px, py, lx, ly) == pytest.approx(acc / 6, abs=1e-9)

    def test_permutation_covariance(self, rng):
        px = rng.dirichlet(np.ones(16), size=1)
        py = rng.dirichlet(np.ones(12), size=1)
        before = classification_loss(px, py, [4], [2])
        perm = rng.permutation(16)
        after = classification_loss(px[:, perm], py, [int(np.where(perm == 4)[0][0])], [2])
        assert after == pytest.approx(before, rel=1e-12)

    def test_out_of_range_label_rejected(self):
        px = np.full((1, 16), 1.0 / 16.0)
        py = np.full((1, 12), 1.0 / 12.0)
        with pytest.raises(DataError):
            classification_loss(px, py, [16], [0])
        with pytest.raises(DataError):
            classification_loss(px, py, [0], [-1])

    def test_tiny_probability_is_clamped_finite(self):
        px = np.zeros((1, 16)); px[0, 0] = 1.0
        py = np.zeros((1, 12)); py[0, 0] = 1.0
        val = classification_loss(px, py, [1], [1])
        assert np.isfinite(val)
        assert val == pytest.approx(-2 * np.log(1e-12), rel=1e-9)

    def test_backward_zero_at_clamp(self):
        px = np.zeros((1, 16)); px[0, 0] = 1.0
        py = np.full((1, 12), 1.0 / 12.0)
        dpx, dpy = classification_loss_backward(px, py, [1], [3])
        assert np.all(dpx == 0)
        assert dpy[0, 3] == pytest.approx(-12.0)


class TestAdversarialLosses:
    def test_perfect_discriminator_is_zero(self):
        assert discriminator_loss(np.array([1.0]), np.array([0.0])) == pytest.approx(
            0.0, abs=1e-9)

    def test_chance_level_is_log2(self):
        val = discriminator_loss(np.array([0.5]), np.array([0.5]))
        assert val == pytest.approx(np.log(2.0), abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scalar_recomputation(self, seed):
        r = np.random.default_rng(seed)
        dr = r.uniform(0.01, 0.99, size=8)
        df = r.uniform(0.01, 0.99, size=8)
        acc = np.mean([-0.5 * np.log(a) for a in dr]) + \
            np.mean([-0.5 * np.log(1 - b) for b in df])
        assert discriminator_loss(dr, df) == pytest.approx(acc, abs=1e-12)


class TestGeneratorLoss:
    def _inputs(self, rng):
        c = rng.normal(size=(3, 10, 10, 3))
        m = rng.normal(size=(3, 10, 10, 3))
        px = rng.dirichlet(np.ones(16), size=3)
        py = rng.dirichlet(np.ones(12), size=3)
        lx = rng.integers(0, 16, size=3)
        ly = rng.integers(0, 12, size=3)
        d = rng.uniform(0.1, 0.9, size=3)
        return c, m, px, py, lx, ly, d

    def test_decomposes_into_weighted_components(self, rng):
        c, m, px, py, lx, ly, d = self._inputs(rng)
        w = LossWeights()
        rep = generator_loss(c, m, px, py, lx, ly, w, d)
        recon = w.lambda_l2 * rep.recon_l2 + w.lambda_grad * rep.recon_grad
        total = rep.adversarial_G + w.lambda_R * recon + w.lambda_C * rep.classification
        assert rep.total_G == pytest.approx(total, abs=1e-6)
        assert rep.recon_l2 >= 0 and rep.recon_grad >= 0
        assert rep.classification >= 0 and rep.adversarial_G >= 0

    def test_adversarial_off_drops_term(self, rng):
        c, m, px, py, lx, ly, d = self._inputs(rng)
        w = LossWeights(lambda_G=0.0)
        rep = generator_loss(c, m, px, py, lx, ly, w, d)
        assert rep.adversarial_G == 0.0
        recon = w.lambda_l2 * rep.recon_l2 + w.lambda_grad * rep.recon_grad
        assert rep.total_G == pytest.approx(recon + rep.classification, rel=1e-12)

    def test_confident_discriminator_zeroes_term(self, rng):
        c, m, px, py, lx, ly, _ = self._inputs(rng)
        rep = generator_loss(c, m, px, py, lx, ly, LossWeights(),
                             np.array([1.0, 1.0, 1.0]))
        assert rep.adversarial_G == pytest.approx(0.0, abs=1e-12)

    def test_decoder_off_has_no_recon(self, rng):
        _, _, px, py, lx, ly, _ = self._inputs(rng)
        rep = generator_loss(np.zeros((3, 10, 10, 3)), None, px, py, lx, ly,
                             LossWeights(), None)
        assert rep.recon_l2 == 0.0 and rep.recon_grad == 0.0
        assert rep.total_G == pytest.approx(rep.classification, rel=1e-12)

    def test_report_round_trip_columns(self):
        rep = LossReport(1, 2, 3, 4, 5, 6)
        assert rep.as_row() == [1, 2, 3, 4, 5, 6]
        assert len(LossReport.COLUMNS) == 6
