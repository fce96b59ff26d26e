import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gbcelab.losses import beta_from_t
from gbcelab.theory import (ConvergenceError, PriorDistribution, bce_converged_sigmoid, converged_sigmoid,
                            expected_item_loss, expected_item_loss_derivative, invert_converged_sigmoid,
                            lr_schedule, numeric_minimizer, oracle_grid, predict, sasrec_converged_sigmoid,
                            synthetic_convergence_experiment)

LN2 = np.log(2.0)


@settings(max_examples=100)
@given(st.floats(0.0, 1.0), st.floats(1e-4, 1.0))
def test_calibrated_when_beta_equals_alpha(p, alpha):
    assert converged_sigmoid(p, alpha, alpha) == pytest.approx(p, abs=1e-12)


def test_converged_sigmoid_values():
    assert converged_sigmoid(0.0, 0.3, 0.6) == 0.0
    assert converged_sigmoid(1.0, 0.3, 0.6) == 1.0
    assert converged_sigmoid(0.1, 0.01, 1.0) == pytest.approx(0.1 / 0.109, abs=1e-12)
    assert converged_sigmoid(0.1, 0.01, 1.0) == pytest.approx(0.91743, abs=1e-5)


def test_bce_converged_values():
    assert bce_converged_sigmoid(0.5, 0.5) == pytest.approx(2 / 3)
    assert bce_converged_sigmoid(0.37, 1.0) == pytest.approx(0.37)
    for p in (0.01, 0.3, 0.9):
        assert bce_converged_sigmoid(p, 0.2) == converged_sigmoid(p, 0.2, 1.0)


def test_sasrec_converged_values():
    n = 3416
    assert sasrec_converged_sigmoid(0.01, n) == pytest.approx(34.15 / 35.14, abs=1e-12)
    assert sasrec_converged_sigmoid(0.01, n) == pytest.approx(0.97183, abs=1e-5)
    assert sasrec_converged_sigmoid(1 / n, n) == pytest.approx(0.5, abs=1e-3)
    for p in np.linspace(0.001, 0.999, 25):
        assert sasrec_converged_sigmoid(p, n) == pytest.approx(bce_converged_sigmoid(p, 1 / (n - 1)), abs=1e-12)


def test_inversion_roundtrip():
    for p in (0.001, 0.2, 0.77):
        s = converged_sigmoid(p, 0.05, 0.4)
        assert invert_converged_sigmoid(s, 0.05, 0.4) == pytest.approx(p, abs=1e-12)


def test_predict_uses_beta_from_t():
    pred = predict(PriorDistribution(np.array([0.5, 0.3, 0.2])), k=1, t=0.5)
    assert pred.beta == pytest.approx(beta_from_t(0.5, 0.5))
    np.testing.assert_allclose(pred.sigma, converged_sigmoid(np.array([0.5, 0.3, 0.2]), 0.5, 0.75))


def test_prior_must_sum_to_one():
    with pytest.raises(ValueError):
        PriorDistribution(np.array([0.5, 0.4]))


def test_expected_loss_values():
    assert expected_item_loss(0.5, 1.0, 0.3, 1.0) == pytest.approx(LN2)
    assert expected_item_loss(0.5, 0.0, 1.0, 0.7) == pytest.approx(LN2)
    with pytest.raises(ValueError):
        expected_item_loss(1.0, 0.5, 0.5, 0.5)


@settings(max_examples=100)
@given(st.floats(0.001, 0.999), st.floats(0.001, 1.0), st.floats(0.001, 1.0))
def test_derivative_vanishes_at_closed_form(p, alpha, beta):
    s = converged_sigmoid(p, alpha, beta)
    if 1e-9 < s < 1 - 1e-9:
        scale = beta * p / s + alpha * (1 - p) / (1 - s)
        assert abs(expected_item_loss_derivative(s, p, alpha, beta)) < 1e-9 * max(1.0, scale)


def test_numeric_minimizer_values():
    assert numeric_minimizer(0.3, 0.5, 0.5) == pytest.approx(0.3, abs=1e-9)
    assert numeric_minimizer(0.5, 1.0, 1.0) == pytest.approx(0.5, abs=1e-9)
    assert numeric_minimizer(0.3, 0.5, 0.5, method="golden") == pytest.approx(0.3, abs=1e-7)
    with pytest.raises(ValueError):
        numeric_minimizer(0.3, 0.5, 0.5, method="newton")


def test_numeric_minimizer_iteration_cap():
    with pytest.raises(ConvergenceError):
        numeric_minimizer(0.3, 0.5, 0.7, max_iter=3)


def test_oracle_grid_agreement():
    rows = oracle_grid()
    assert len(rows) >= 100
    assert max(r["abs_error"] for r in rows) < 1e-6


def test_lr_schedule():
    assert lr_schedule(0, 100, 0.1) == 0.1
    assert lr_schedule(50, 100, 0.1) == pytest.approx(0.01)
    assert lr_schedule(80, 100, 0.1) == pytest.approx(0.001)


def test_synthetic_two_item_uniform():
    res = synthetic_convergence_experiment([0.5, 0.5], k=1, t=0.0, steps=50_000, loss="bce", seed=0)
    np.testing.assert_allclose(res.sigma, [0.5, 0.5], atol=0.02)


@pytest.mark.parametrize("seed", range(5))
def test_synthetic_calibrated_and_biased(seed):
    prior = [0.5, 0.3, 0.2]
    cal = synthetic_convergence_experiment(prior, k=1, t=1.0, steps=200_000, seed=seed)
    np.testing.assert_allclose(cal.sigma, prior, atol=0.02)
    bce = synthetic_convergence_experiment(prior, k=1, t=0.0, steps=200_000, seed=seed, loss="bce")
    np.testing.assert_allclose(bce.sigma, [0.6667, 0.4615, 0.3333], atol=0.02)
