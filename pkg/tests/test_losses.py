import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from mpmath import mp, mpf

from gbcelab import autograd as ag
from gbcelab.losses import (LossSpec, SaturatedScoreError, ClampStats, bce_sampled, beta_from_t, gamma_transform,
                            gbce, gbce_direct, probabilities, sampled_loss, sampled_softmax_loss, softmax_loss)

LN2 = math.log(2.0)


def _v(t):
    return float(np.asarray(t.data).ravel()[0])


def test_bce_zero_scores():
    assert _v(bce_sampled([0.0], [[0.0]])) == pytest.approx(LN2)
    assert _v(bce_sampled([0.0], [[0.0, 0.0, 0.0]])) == pytest.approx(LN2)


def test_bce_extreme_scores_match_extended_precision():
    mp.dps = 50
    exact = -(mp.log(1 / (1 + mp.e ** -50)) + mp.log(1 - 1 / (1 + mp.e ** 50))) / 2
    assert _v(bce_sampled([50.0], [[-50.0]])) == pytest.approx(float(exact), abs=1e-30)


def test_beta_from_t_endpoints():
    assert beta_from_t(0.0, 0.07) == 1.0
    assert beta_from_t(1.0, 0.07) == pytest.approx(0.07)
    assert beta_from_t(0.5, 0.5) == pytest.approx(0.75)


def test_gamma_identity_at_beta_one():
    s = np.array([-3.0, 0.0, 7.5])
    np.testing.assert_array_equal(gamma_transform(s, 1.0).data, s)


def test_gamma_value():
    assert _v(gamma_transform([0.0], 0.5)) == pytest.approx(-math.log(math.sqrt(2) - 1), abs=1e-12)
    assert _v(gamma_transform([0.0], 0.5)) == pytest.approx(0.8814, abs=1e-4)


def test_gamma_sigmoid_power_property():
    rng = np.random.default_rng(0)
    s = rng.uniform(-20, 20, 1000)
    beta = rng.uniform(0.01, 1.0, 1000)
    for si, bi in zip(s, beta):
        g = _v(gamma_transform([si], bi))
        sig = 1 / (1 + math.exp(-si))
        assert 1 / (1 + math.exp(-g)) == pytest.approx(sig ** bi, abs=1e-12)


def test_gamma_saturation_raises_or_clamps():
    with pytest.raises(SaturatedScoreError):
        gamma_transform([60.0], 0.5)
    stats = ClampStats()
    out = gamma_transform([60.0, 0.0], 0.5, clamp=True, stats=stats)
    assert np.all(np.isfinite(out.data))
    assert stats.clamped == 1 and stats.positives == 2
    assert stats.rate() == 0.5


def test_gbce_half_beta_value():
    assert _v(gbce([0.0], [[0.0]], 0.5)) == pytest.approx(0.75 * LN2, abs=1e-12)
    assert _v(gbce([0.0], [[0.0]], 0.5)) == pytest.approx(0.5199, abs=1e-4)


def test_gbce_beta_one_is_bce():
    rng = np.random.default_rng(1)
    sp, sn = rng.normal(size=50) * 5, rng.normal(size=(50, 8)) * 5
    np.testing.assert_allclose(gbce(sp, sn, 1.0).data, bce_sampled(sp, sn).data, atol=1e-12, rtol=0)


def test_gbce_identity_random_draws():
    rng = np.random.default_rng(2)
    for _ in range(10_000 // 500):
        sp = rng.uniform(-10, 10, 500)
        sn = rng.uniform(-10, 10, (500, 4))
        beta = rng.uniform(0.01, 1.0)
        a = gbce(sp, sn, beta).data
        b = bce_sampled(gamma_transform(sp, beta), sn).data
        c = gbce_direct(sp, sn, beta).data
        np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)
        np.testing.assert_allclose(a, c, atol=1e-9, rtol=0)


def test_gbce_beta_one_gradient_equals_bce_gradient():
    rng = np.random.default_rng(3)
    sp, sn = rng.normal(size=6), rng.normal(size=(6, 3))
    grads = []
    for fn in (lambda a, b: gbce(a, b, 1.0), bce_sampled):
        a, b = ag.parameter(sp, "p"), ag.parameter(sn, "n")
        ag.sum_(fn(a, b)).backward()
        grads.append((a.grad, b.grad))
    np.testing.assert_array_equal(grads[0][0], grads[1][0])
    np.testing.assert_array_equal(grads[0][1], grads[1][1])


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(-5, 5), st.floats(0.0, 3.0))
def test_gbce_monotone_in_positive_and_negative_scores(beta, s, d):
    base = _v(gbce([s], [[0.0, 1.0]], beta))
    assert _v(gbce([s + d], [[0.0, 1.0]], beta)) <= base + 1e-12
    assert _v(gbce([s], [[d, 1.0]], beta)) >= _v(gbce([s], [[0.0, 1.0]], beta)) - 1e-12


def test_losses_finite_over_wide_range():
    s = np.linspace(-500, 500, 201)
    neg = np.tile(s[::-1, None], (1, 3))
    assert np.all(np.isfinite(bce_sampled(s, neg).data))
    assert np.all(np.isfinite(gbce(s, neg, 0.3, clamp=True).data))
    assert np.all(np.isfinite(sampled_softmax_loss(s, neg).data))
    assert np.all(np.isfinite(softmax_loss(np.stack([s, -s], 1), np.zeros(201, int)).data))


def test_softmax_values():
    assert _v(softmax_loss(np.zeros((1, 4)), [0])) == pytest.approx(math.log(4))
    assert _v(softmax_loss(np.zeros((1, 2)), [1])) == pytest.approx(LN2)
    assert _v(softmax_loss(np.array([[1000.0, 0, 0]]), [0])) == pytest.approx(0.0, abs=1e-300)


def test_sampled_softmax_values():
    assert _v(sampled_softmax_loss([0.0], [[0.0]])) == pytest.approx(LN2)
    assert _v(sampled_softmax_loss([0.0], [[0.0, 0.0, 0.0]])) == pytest.approx(math.log(4))


def test_sampled_softmax_bounded_by_full_softmax():
    rng = np.random.default_rng(4)
    for _ in range(200):
        scores = rng.normal(size=12) * 3
        neg = rng.choice(np.arange(1, 12), size=4, replace=False)
        ssm = _v(sampled_softmax_loss([scores[0]], [scores[neg]]))
        full = _v(softmax_loss(scores[None], [0]))
        assert ssm <= full + 1e-12


def test_loss_spec_validation_and_dispatch():
    with pytest.raises(ValueError):
        LossSpec(kind="hinge")
    with pytest.raises(ValueError):
        LossSpec(kind="gbce", t=1.5)
    assert LossSpec("bce", k=4).beta(100) == 1.0
    spec = LossSpec("gbce", k=1, t=1.0)
    assert spec.beta(3) == pytest.approx(0.5)
    out = sampled_loss(spec, np.array([0.0]), np.array([[0.0]]), 3)
    assert _v(out) == pytest.approx(0.75 * LN2)
    with pytest.raises(ValueError):
        sampled_loss(LossSpec("softmax"), np.array([0.0]), np.array([[0.0]]), 3)


def test_probabilities():
    s = np.array([[0.0, 0.0, 0.0, 0.0]])
    np.testing.assert_allclose(probabilities(s, "bce"), 0.5)
    assert probabilities(s, "softmax").sum() == pytest.approx(1.0, abs=1e-12)
