import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stainbalance.exceptions import IndexOutOfRange
from stainbalance.losses import (
    ClassWeights,
    LossConfig,
    batch_loss_and_grad,
    cb_cross_entropy,
    effective_number_weights,
    focal_loss,
    hybrid_loss,
    hybrid_loss_grad,
    softmax,
)

from conftest import central_difference, relative_error

LN2 = 0.69314718055994530942
# 50-digit mpmath values
ALPHA_BETA_9999_N_10000 = 1.5819306726110492568e-4
CE_HALF_ALPHA_1582E_4 = 1.0965588396458334795e-4
FOCAL_HALF = 0.17328679513998632735
HYBRID_HALF = 0.43321698784996581839


def weights(*alpha):
    a = np.array(alpha, dtype=float)
    return ClassWeights(a, 1 / a)


class TestEffectiveNumber:
    def test_beta_zero(self):
        w = effective_number_weights([5, 100, 3], 0.0)
        assert np.all(w.alpha == 1.0)

    @pytest.mark.parametrize("beta", [0.0, 0.5, 0.9999, 1 - 1e-9])
    def test_single_sample(self, beta):
        w = effective_number_weights([1, 1], beta)
        np.testing.assert_allclose(w.alpha, 1.0, rtol=1e-12)

    def test_default_beta(self):
        w = effective_number_weights([10_000, 1], 0.9999)
        assert w.alpha[0] == pytest.approx(ALPHA_BETA_9999_N_10000, rel=1e-6)

    def test_consistency_and_order(self):
        w = effective_number_weights([2000, 600, 180, 54, 16], 0.9999)
        np.testing.assert_allclose(w.alpha * w.effective_numbers, 1.0, rtol=1e-12)
        assert np.all(np.diff(w.alpha) > 0)

    def test_inverse_frequency_limit(self):
        counts = np.array([1, 7, 100, 2500, 10_000])
        w = effective_number_weights(counts, 1 - 1e-9)
        assert np.all(np.abs(w.alpha * counts - 1) < 1e-4)

    def test_normalize_option(self):
        w = effective_number_weights([100, 10, 1], 0.99, normalize=True)
        assert w.alpha.sum() == pytest.approx(3.0)

    @pytest.mark.parametrize("beta", [-0.1, 1.0])
    def test_beta_range(self, beta):
        with pytest.raises(ValueError):
            effective_number_weights([3, 4], beta)


class TestLossValues:
    def test_ce(self):
        assert cb_cross_entropy([0.0, 1.0], 1, weights(3.0, 3.0)) == 0.0
        assert cb_cross_entropy([0.5, 0.5], 0, weights(1.0, 1.0)) == pytest.approx(LN2, rel=1e-9)
        assert cb_cross_entropy([0.5, 0.5], 0, weights(1.582e-4, 1.0)) == pytest.approx(
            CE_HALF_ALPHA_1582E_4, rel=1e-9
        )

    def test_focal(self):
        w = weights(1.0, 1.0)
        p = [0.3, 0.7]
        assert focal_loss(p, 1, w, 0.0) == cb_cross_entropy(p, 1, w)
        assert focal_loss([1.0, 0.0], 0, w, 2.0) == 0.0
        assert focal_loss([0.5, 0.5], 0, w, 2.0) == pytest.approx(FOCAL_HALF, rel=1e-9)

    def test_hybrid(self):
        w = weights(1.0, 1.0)
        p = [0.2, 0.8]
        assert hybrid_loss(p, 1, LossConfig(gamma=2.0, lam=0.0), w) == cb_cross_entropy(p, 1, w)
        assert hybrid_loss(p, 1, LossConfig(gamma=2.0, lam=1.0), w) == focal_loss(p, 1, w, 2.0)
        assert hybrid_loss([0.5, 0.5], 0, LossConfig(gamma=2.0, lam=0.5), w) == pytest.approx(
            HYBRID_HALF, rel=1e-9
        )

    def test_clamp(self):
        assert np.isfinite(cb_cross_entropy([0.0, 1.0], 0, weights(1, 1)))

    def test_batch_form(self):
        p = np.array([[0.5, 0.5], [0.1, 0.9]])
        out = cb_cross_entropy(p, [0, 1], weights(1, 1))
        np.testing.assert_allclose(out, [LN2, -np.log(0.9)])

    def test_bad_label(self):
        with pytest.raises(IndexOutOfRange):
            hybrid_loss([0.5, 0.5], 2, LossConfig(), weights(1, 1))

    @given(
        st.floats(0.01, 0.98),
        st.floats(0.001, 0.01),
        st.floats(0.0, 5.0),
        st.floats(0.0, 1.0),
        st.floats(0.01, 10.0),
    )
    def test_monotone_in_p(self, p, dp, gamma, lam, alpha):
        cfg = LossConfig(gamma=gamma, lam=lam)
        w = weights(alpha, 1.0)
        lo = hybrid_loss([p, 1 - p], 0, cfg, w)
        hi = hybrid_loss([p + dp, 1 - p - dp], 0, cfg, w)
        assert hi < lo

    @given(st.floats(0.01, 0.99), st.floats(0.0, 5.0), st.floats(0.0, 1.0), st.floats(0.01, 10.0))
    def test_linear_in_alpha(self, p, gamma, lam, alpha):
        cfg = LossConfig(gamma=gamma, lam=lam)
        one = hybrid_loss([p, 1 - p], 0, cfg, weights(alpha, 1.0))
        two = hybrid_loss([p, 1 - p], 0, cfg, weights(2 * alpha, 1.0))
        assert two == pytest.approx(2 * one, rel=1e-12)


class TestGradient:
    def test_plain_ce_at_uniform(self):
        g = hybrid_loss_grad([0.0, 0.0], 0, LossConfig(beta=0, gamma=5.0, lam=0.0), weights(1, 1))
        np.testing.assert_allclose(g, [-0.5, 0.5], atol=1e-15)

    def test_saturated(self):
        g = hybrid_loss_grad([60.0, 0.0, -10.0], 0, LossConfig(), weights(2, 1, 1))
        assert np.all(np.abs(g) < 1e-20)

    def test_random_against_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            C = int(rng.integers(2, 8))
            z = rng.normal(0, 2, C)
            y = int(rng.integers(C))
            cfg = LossConfig(beta=0.9999, gamma=float(rng.uniform(0, 4)), lam=float(rng.uniform(0, 1)))
            w = weights(*rng.uniform(0.05, 3, C))
            g = hybrid_loss_grad(z, y, cfg, w)
            fd = central_difference(lambda v: hybrid_loss(softmax(v), y, cfg, w), z)
            assert np.all(relative_error(g, fd) < 1e-5)

    def test_batch_mean(self):
        rng = np.random.default_rng(1)
        Z = rng.normal(size=(6, 4))
        y = rng.integers(0, 4, 6)
        cfg = LossConfig(gamma=2, lam=0.5)
        w = weights(1, 2, 3, 4)
        loss, grad = batch_loss_and_grad(Z, y, cfg, w)
        per = [hybrid_loss(softmax(Z[i]), y[i], cfg, w) for i in range(6)]
        assert loss == pytest.approx(np.mean(per), rel=1e-14)
        fd = central_difference(lambda v: batch_loss_and_grad(v, y, cfg, w)[0], Z)
        assert np.all(relative_error(grad, fd) < 1e-5)


def test_softmax_extreme_logits():
    p = softmax(np.array([1e4, -1e4, 0.0, 1e4]))
    assert np.all(np.isfinite(p))
    assert abs(p.sum() - 1) < 1e-12
