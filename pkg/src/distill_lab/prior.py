"""Closed-form diffusion priors.

A variance-preserving schedule ``alpha_bar(t) = exp(-b0 t - (b1 - b0) t^2 / 2)``
and exact noise predictors for Gaussian data, ``x ~ N(mu_c, var_c I)``,
per condition. Under the forward process
``x_t = sqrt(ab) x + sqrt(1 - ab) eps`` the noisy marginal is again Gaussian,
``N(sqrt(ab) mu_c, (ab var_c + 1 - ab) I)``, so the optimal predictor is
``eps_hat = -sqrt(1 - ab) * grad log p_t(x_t)``. The unconditional model is the
image-level two-component mixture of the positive and negative conditionals.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import logsumexp


class Condition(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    UNCONDITIONAL = "unconditional"


class Modality(enum.Enum):
    RGB = "rgb"
    NORMAL = "normal"


@dataclass(frozen=True)
class NoiseSchedule:
    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if not (self.beta_min > 0 and self.beta_max > 0):
            raise ValueError("beta_min and beta_max must be positive")

    def alpha_bar(self, t):
        return alpha_bar(self, t)


def alpha_bar(schedule: NoiseSchedule, t):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or np.any(np.isnan(t_arr)):
        raise ValueError(f"timestep must lie in [0, 1], got {t}")
    out = np.exp(-schedule.beta_min * t_arr - 0.5 * (schedule.beta_max - schedule.beta_min) * t_arr ** 2)
    return float(out) if out.ndim == 0 else out


@dataclass
class NoisyImage:
    x_t: np.ndarray
    t: float
    eps: np.ndarray


def add_noise(schedule: NoiseSchedule, x, t: float, eps) -> NoisyImage:
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"image shape {x.shape} and noise shape {eps.shape} differ")
    ab = alpha_bar(schedule, t)
    return NoisyImage(np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps, float(t), eps)


@dataclass
class AnalyticPrior:
    """Per-condition Gaussian image distributions for one modality.

    ``mixture_weight`` is the probability of the positive component in the
    unconditional mixture.
    """

    mean_pos: np.ndarray
    mean_neg: np.ndarray
    var_pos: float = 1.0
    var_neg: float = 1.0
    mixture_weight: float = 0.5
    modality: Modality = Modality.RGB

    def __post_init__(self):
        self.mean_pos = np.asarray(self.mean_pos, dtype=np.float64)
        self.mean_neg = np.asarray(self.mean_neg, dtype=np.float64)
        if self.mean_pos.shape != self.mean_neg.shape:
            raise ValueError("positive and negative means must share a shape")
        if not (np.all(np.isfinite(self.mean_pos)) and np.all(np.isfinite(self.mean_neg))):
            raise ValueError("prior means must be finite")
        if not (self.var_pos > 0 and self.var_neg > 0):
            raise ValueError("prior variances must be positive")
        if not 0.0 <= self.mixture_weight <= 1.0:
            raise ValueError("mixture_weight must lie in [0, 1]")

    @property
    def shape(self):
        return self.mean_pos.shape

    def component(self, condition: Condition):
        if condition is Condition.POSITIVE:
            return self.mean_pos, self.var_pos
        if condition is Condition.NEGATIVE:
            return self.mean_neg, self.var_neg
        raise ValueError("the unconditional model is a mixture, not a single component")


def _gauss_terms(mean, var, ab):
    return np.sqrt(ab) * mean, ab * var + 1.0 - ab


def _log_normal(x_t, loc, v):
    d = x_t.size
    return -0.5 * d * np.log(2.0 * np.pi * v) - 0.5 * np.sum((x_t - loc) ** 2) / v


def responsibilities(prior: AnalyticPrior, schedule: NoiseSchedule, x_t, t):
    """Posterior probabilities of the (positive, negative) mixture components."""
    x_t = np.asarray(x_t, dtype=np.float64)
    ab = alpha_bar(schedule, t)
    with np.errstate(divide="ignore"):
        log_pi = np.log([prior.mixture_weight, 1.0 - prior.mixture_weight])
    ll = np.array([
        _log_normal(x_t, *_gauss_terms(prior.mean_pos, prior.var_pos, ab)),
        _log_normal(x_t, *_gauss_terms(prior.mean_neg, prior.var_neg, ab)),
    ]) + log_pi
    r = np.exp(ll - logsumexp(ll))
    return float(r[0]), float(r[1])


def log_density(prior: AnalyticPrior, schedule: NoiseSchedule, x_t, t, condition: Condition) -> float:
    x_t = np.asarray(x_t, dtype=np.float64)
    ab = alpha_bar(schedule, t)
    if condition is Condition.UNCONDITIONAL:
        with np.errstate(divide="ignore"):
            log_pi = np.log([prior.mixture_weight, 1.0 - prior.mixture_weight])
        ll = np.array([
            _log_normal(x_t, *_gauss_terms(prior.mean_pos, prior.var_pos, ab)),
            _log_normal(x_t, *_gauss_terms(prior.mean_neg, prior.var_neg, ab)),
        ]) + log_pi
        return float(logsumexp(ll))
    return float(_log_normal(x_t, *_gauss_terms(*prior.component(condition), ab)))


def score(prior: AnalyticPrior, schedule: NoiseSchedule, x_t, t, condition: Condition) -> np.ndarray:
    """Analytic ``grad_x log p_t(x_t | condition)``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    ab = alpha_bar(schedule, t)
    if condition is Condition.UNCONDITIONAL:
        r_pos, r_neg = responsibilities(prior, schedule, x_t, t)
        loc_p, v_p = _gauss_terms(prior.mean_pos, prior.var_pos, ab)
        loc_n, v_n = _gauss_terms(prior.mean_neg, prior.var_neg, ab)
        return -(r_pos * (x_t - loc_p) / v_p + r_neg * (x_t - loc_n) / v_n)
    loc, v = _gauss_terms(*prior.component(condition), ab)
    return -(x_t - loc) / v


def predict_noise(prior: AnalyticPrior, schedule: NoiseSchedule, x_t, t, condition: Condition) -> np.ndarray:
    ab = alpha_bar(schedule, t)
    return -np.sqrt(1.0 - ab) * score(prior, schedule, x_t, t, condition)


def denoise(prior: AnalyticPrior, schedule: NoiseSchedule, x_t, t, condition: Condition) -> np.ndarray:
    """Posterior-mean estimate of the clean image from the noise predictor."""
    ab = alpha_bar(schedule, t)
    eps_hat = predict_noise(prior, schedule, x_t, t, condition)
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def posterior_mean(prior: AnalyticPrior, schedule: NoiseSchedule, x_t, t, condition: Condition) -> np.ndarray:
    """Closed-form ``E[x | x_t]`` (Gaussian conjugacy, mixed by responsibilities)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    ab = alpha_bar(schedule, t)
    a = np.sqrt(ab)

    def gauss(mean, var):
        gain = a * var / (ab * var + 1.0 - ab)
        return mean + gain * (x_t - a * mean)

    if condition is Condition.UNCONDITIONAL:
        r_pos, r_neg = responsibilities(prior, schedule, x_t, t)
        return r_pos * gauss(prior.mean_pos, prior.var_pos) + r_neg * gauss(prior.mean_neg, prior.var_neg)
    return gauss(*prior.component(condition))


def score_check(prior: AnalyticPrior, schedule: NoiseSchedule, x_t, t, condition: Condition,
                h: float = 1e-5) -> float:
    """Max abs deviation between the analytic score and central differences of
    ``log p_t``. Costs two density evaluations per component."""
    x_t = np.array(x_t, dtype=np.float64)
    analytic = score(prior, schedule, x_t, t, condition)
    numeric = np.empty_like(x_t)
    flat = x_t.reshape(-1)
    out = numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        lp = log_density(prior, schedule, x_t, t, condition)
        flat[i] = old - h
        lm = log_density(prior, schedule, x_t, t, condition)
        flat[i] = old
        out[i] = (lp - lm) / (2.0 * h)
    return float(np.max(np.abs(analytic - numeric)))


def corrupt(mean: np.ndarray, kind: str = "blur", strength: float = 3.0) -> np.ndarray:
    """Degraded copy of an image used as a negative-condition mean.

    ``blur`` applies a Gaussian of ``strength`` pixels over the spatial axes,
    ``invert`` maps v to 1 - v, ``gray`` replaces the image by its global mean.
    """
    mean = np.asarray(mean, dtype=np.float64)
    if kind == "blur":
        sig = (strength, strength) + (0,) * (mean.ndim - 2)
        return gaussian_filter(mean, sig, mode="nearest")
    if kind == "invert":
        return 1.0 - mean
    if kind == "gray":
        return np.full_like(mean, mean.mean())
    raise ValueError(f"unknown corruption {kind!r}; expected blur, invert or gray")
