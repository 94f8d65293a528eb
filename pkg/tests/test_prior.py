import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid

from distill_lab.prior import (
    AnalyticPrior,
    Condition,
    NoiseSchedule,
    add_noise,
    alpha_bar,
    corrupt,
    denoise,
    log_density,
    posterior_mean,
    predict_noise,
    responsibilities,
    score,
    score_check,
)

from helpers import t_for_alpha_bar

SCHED = NoiseSchedule()


def test_alpha_bar_closed_form_and_monotone():
    assert alpha_bar(SCHED, 0.0) == 1.0
    # exp(-integral of the linear beta ramp), integral done by hand at t = 0.5
    assert alpha_bar(SCHED, 0.5) == pytest.approx(np.exp(-(0.1 * 0.5 + 0.5 * 19.9 * 0.25)), rel=1e-14)
    ts = np.linspace(0, 1, 101)
    assert np.all(np.diff(alpha_bar(SCHED, ts)) < 0)
    assert alpha_bar(SCHED, 1.0) > 0
    t = t_for_alpha_bar(0.25)
    assert alpha_bar(SCHED, t) == pytest.approx(0.25, rel=1e-12)
    with pytest.raises(ValueError):
        alpha_bar(SCHED, 1.5)
    with pytest.raises(ValueError):
        NoiseSchedule(0.0, 1.0)


def test_forward_noising(rng):
    x = rng.uniform(size=(3, 3, 3))
    eps = rng.normal(size=x.shape)
    assert np.array_equal(add_noise(SCHED, x, 0.0, eps).x_t, x)
    t = t_for_alpha_bar(0.36)
    np.testing.assert_allclose(add_noise(SCHED, np.zeros_like(x), t, eps).x_t, 0.8 * eps, rtol=1e-12)
    np.testing.assert_allclose(add_noise(SCHED, x, t, np.zeros_like(x)).x_t, 0.6 * x, rtol=1e-12)
    ab = alpha_bar(SCHED, 0.4)
    x_t = add_noise(SCHED, x, 0.4, eps).x_t
    np.testing.assert_allclose((x_t - np.sqrt(1 - ab) * eps) / np.sqrt(ab), x, atol=1e-12)
    with pytest.raises(ValueError):
        add_noise(SCHED, x, 0.4, eps[:2])


def test_gaussian_predictor_closed_form():
    t = t_for_alpha_bar(0.25)
    prior = AnalyticPrior(np.zeros((1, 1, 3)), np.ones((1, 1, 3)), 1.0, 1.0)
    eps_hat = predict_noise(prior, SCHED, np.ones((1, 1, 3)), t, Condition.POSITIVE)
    np.testing.assert_allclose(eps_hat, np.sqrt(0.75), rtol=1e-12)
    assert not predict_noise(prior, SCHED, np.ones((1, 1, 3)), 0.0, Condition.NEGATIVE).any()


def test_gaussian_predictor_is_affine_with_known_slope(rng):
    prior = AnalyticPrior(rng.uniform(size=(2, 2, 3)), rng.uniform(size=(2, 2, 3)), 0.3, 2.0)
    for t in (0.1, 0.6):
        ab = alpha_bar(SCHED, t)
        a, b = rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 2, 3))
        for cond, var in ((Condition.POSITIVE, 0.3), (Condition.NEGATIVE, 2.0)):
            ea = predict_noise(prior, SCHED, a, t, cond)
            eb = predict_noise(prior, SCHED, b, t, cond)
            slope = np.sqrt(1 - ab) / (ab * var + 1 - ab)
            np.testing.assert_allclose((ea - eb) / (a - b), slope, rtol=1e-9)


def test_degenerate_mixture_is_the_positive_predictor(rng):
    prior = AnalyticPrior(rng.uniform(size=(3, 2, 3)), rng.uniform(size=(3, 2, 3)), 0.2, 0.7, mixture_weight=1.0)
    x_t = rng.normal(size=(3, 2, 3))
    np.testing.assert_allclose(predict_noise(prior, SCHED, x_t, 0.3, Condition.UNCONDITIONAL),
                               predict_noise(prior, SCHED, x_t, 0.3, Condition.POSITIVE), rtol=1e-14)


@pytest.mark.parametrize("t", [0.02, 0.5, 0.98])
@pytest.mark.parametrize("cond", list(Condition))
def test_score_matches_finite_differences(rng, t, cond):
    prior = AnalyticPrior(rng.uniform(size=(3, 3, 3)), rng.uniform(size=(3, 3, 3)), 0.05, 0.4, 0.35)
    x_t = add_noise(SCHED, rng.uniform(size=(3, 3, 3)), t, rng.normal(size=(3, 3, 3))).x_t
    assert score_check(prior, SCHED, x_t, t, cond) <= 1e-6


def test_symmetric_midpoint_has_no_score_along_the_component_axis(rng):
    mp, mn = rng.uniform(size=(2, 2, 3)), rng.uniform(size=(2, 2, 3))
    prior = AnalyticPrior(mp, mn, 0.5, 0.5, 0.5)
    t = 0.3
    a = np.sqrt(alpha_bar(SCHED, t))
    mid = a * 0.5 * (mp + mn)
    s = score(prior, SCHED, mid, t, Condition.UNCONDITIONAL)
    assert abs(np.sum(s * (mp - mn))) < 1e-12


def test_posterior_mean_denoiser(rng):
    prior = AnalyticPrior(rng.uniform(size=(2, 3, 3)), rng.uniform(size=(2, 3, 3)), 0.2, 0.9, 0.6)
    for t in (0.02, 0.5, 0.98):
        ab = alpha_bar(SCHED, t)
        x_t = rng.normal(size=(2, 3, 3))
        for cond, (m, v) in ((Condition.POSITIVE, (prior.mean_pos, 0.2)), (Condition.NEGATIVE, (prior.mean_neg, 0.9))):
            # Gaussian conjugacy written out independently
            expected = m + np.sqrt(ab) * v / (ab * v + 1 - ab) * (x_t - np.sqrt(ab) * m)
            np.testing.assert_allclose(denoise(prior, SCHED, x_t, t, cond), expected, atol=1e-9)
            np.testing.assert_allclose(posterior_mean(prior, SCHED, x_t, t, cond), expected, atol=1e-9)
        np.testing.assert_allclose(denoise(prior, SCHED, x_t, t, Condition.UNCONDITIONAL),
                                   posterior_mean(prior, SCHED, x_t, t, Condition.UNCONDITIONAL), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(-30, 30), st.floats(0.01, 5.0))
def test_responsibilities_are_a_distribution(pi, t, shift, var):
    prior = AnalyticPrior(np.zeros((2, 2, 3)), np.ones((2, 2, 3)), var, 1.0, pi)
    r = responsibilities(prior, SCHED, np.full((2, 2, 3), shift), t)
    assert all(0.0 <= v <= 1.0 for v in r)
    assert sum(r) == pytest.approx(1.0, abs=1e-12)


def test_log_density_normalizes_in_one_dimension():
    prior = AnalyticPrior(np.array([[0.3]]), np.array([[-0.4]]), 0.2, 0.5, 0.3)
    xs = np.linspace(-12, 12, 20001)
    for cond in Condition:
        p = np.exp([log_density(prior, SCHED, np.array([[x]]), 0.4, cond) for x in xs])
        assert trapezoid(p, xs) == pytest.approx(1.0, abs=1e-8)


def test_prior_validation():
    with pytest.raises(ValueError):
        AnalyticPrior(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))
    with pytest.raises(ValueError):
        AnalyticPrior(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), var_pos=0.0)
    with pytest.raises(ValueError):
        AnalyticPrior(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), mixture_weight=1.5)
    with pytest.raises(ValueError):
        AnalyticPrior(np.full((1, 1, 3), np.nan), np.zeros((1, 1, 3)))


def test_corruptions(rng):
    img = rng.uniform(size=(8, 8, 3))
    np.testing.assert_allclose(corrupt(img, "invert"), 1 - img)
    assert np.allclose(corrupt(img, "gray"), img.mean())
    blurred = corrupt(img, "blur", 2.0)
    assert blurred.shape == img.shape and blurred.std() < img.std()
    np.testing.assert_allclose(blurred.mean(axis=(0, 1)), img.mean(axis=(0, 1)), atol=0.05)
    with pytest.raises(ValueError):
        corrupt(img, "sepia")
