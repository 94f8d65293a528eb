"""Score-distillation gradient estimators and their push-through to the grid.

Every estimator turns a rendered image ``x``, a timestep ``t`` and a noise
draw ``eps`` into a per-pixel update direction ``delta``:

* ``SDS``     ``eps_hat_w(y) - eps`` with ``eps_hat_w = (1 + w) eps_hat(y) - w eps_hat(0)``
* ``CFG_SDS`` the same quantity assembled as ``delta_gen + w * delta_cls``
* ``CSD``     ``w1 eps_hat(y) + (w2 - w1) eps_hat(0) - w2 eps_hat(y_neg)``
* ``CSD_W3``  ``w1 eps_hat(y) + w3 eps_hat(0) - w2 eps_hat(y_neg)``
* ``BSD``     ``w1 eps_hat(y) - w2 eps_hat(y_neg)``

The image-space gradient is ``w(t) * delta * mask``, times ``d x_t / d x =
sqrt(alpha_bar(t))`` unless that factor is switched off. No Jacobian of the
noise predictor is ever formed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .field import ParamGradient, VoxelGrid
from .prior import AnalyticPrior, Condition, Modality, NoiseSchedule, add_noise, alpha_bar, predict_noise
from .renderer import (
    Camera,
    RenderOutput,
    SamplingConfig,
    camera_rays,
    encode_normals,
    render,
    render_vjp,
)


class Estimator(enum.Enum):
    SDS = "sds"
    CFG_SDS = "cfg_sds"
    CSD = "csd"
    CSD_W3 = "csd_w3"
    BSD = "bsd"


W_T_MODES = ("constant", "one_minus_alpha_bar")


@dataclass(frozen=True)
class DistillWeights:
    omega: float = 0.0
    omega1: float = 7.5
    omega2: float = 6.5
    omega3: float = 0.0
    w_t_mode: str = "constant"

    def __post_init__(self):
        for name in ("omega", "omega1", "omega2", "omega3"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.w_t_mode not in W_T_MODES:
            raise ValueError(f"w_t_mode must be one of {W_T_MODES}, got {self.w_t_mode!r}")


APPEARANCE_WEIGHTS = DistillWeights(omega1=7.5, omega2=6.5)
GEOMETRY_WEIGHTS = DistillWeights(omega1=1.5, omega2=0.5)


@dataclass
class DeltaDecomposition:
    gen: np.ndarray
    cls: np.ndarray

    def combine(self, omega: float) -> np.ndarray:
        return self.gen + omega * self.cls


def time_weight(schedule: NoiseSchedule, t: float, mode: str) -> float:
    if mode == "constant":
        return 1.0
    if mode == "one_minus_alpha_bar":
        return 1.0 - alpha_bar(schedule, t)
    raise ValueError(f"unknown w(t) mode {mode!r}")


def _noisy(schedule, x, t, eps):
    return add_noise(schedule, x, t, eps).x_t


def _pred(prior, schedule, x_t, t, cond):
    return predict_noise(prior, schedule, x_t, t, cond)


def guided_noise(prior, schedule, x_t, t, omega: float) -> np.ndarray:
    """Classifier-free-guided prediction; ``omega == 0`` skips the unconditional model."""
    e_y = _pred(prior, schedule, x_t, t, Condition.POSITIVE)
    if omega == 0.0:
        return e_y
    e_0 = _pred(prior, schedule, x_t, t, Condition.UNCONDITIONAL)
    return (1.0 + omega) * e_y - omega * e_0


def sds_delta(prior: AnalyticPrior, schedule: NoiseSchedule, x, t, eps, weights: DistillWeights) -> np.ndarray:
    x_t = _noisy(schedule, x, t, eps)
    return guided_noise(prior, schedule, x_t, t, weights.omega) - np.asarray(eps, dtype=np.float64)


def cfg_decompose(prior: AnalyticPrior, schedule: NoiseSchedule, x, t, eps, omega: float = 0.0) -> DeltaDecomposition:
    """Split the guided delta into its generative and classifier parts.

    ``omega`` is accepted for call symmetry; the parts do not depend on it.
    """
    x_t = _noisy(schedule, x, t, eps)
    e_y = _pred(prior, schedule, x_t, t, Condition.POSITIVE)
    e_0 = _pred(prior, schedule, x_t, t, Condition.UNCONDITIONAL)
    return DeltaDecomposition(e_y - np.asarray(eps, dtype=np.float64), e_y - e_0)


def _three_term(prior, schedule, x_t, t, w1, w0, w2):
    e_pos = _pred(prior, schedule, x_t, t, Condition.POSITIVE)
    e_unc = _pred(prior, schedule, x_t, t, Condition.UNCONDITIONAL)
    e_neg = _pred(prior, schedule, x_t, t, Condition.NEGATIVE)
    # same association for every caller so that the identities hold bit for bit
    return (w1 * e_pos + w0 * e_unc) - w2 * e_neg


def csd_delta(prior: AnalyticPrior, schedule: NoiseSchedule, x, t, eps, weights: DistillWeights) -> np.ndarray:
    """Classifier score with a negative condition (the unconditional weight is tied to ``w2 - w1``)."""
    x_t = _noisy(schedule, x, t, eps)
    return _three_term(prior, schedule, x_t, t, weights.omega1, weights.omega2 - weights.omega1, weights.omega2)


def csd_w3_delta(prior: AnalyticPrior, schedule: NoiseSchedule, x, t, eps, weights: DistillWeights) -> np.ndarray:
    x_t = _noisy(schedule, x, t, eps)
    return _three_term(prior, schedule, x_t, t, weights.omega1, weights.omega3, weights.omega2)


def bsd_delta(prior: AnalyticPrior, schedule: NoiseSchedule, x, t, eps, weights: DistillWeights) -> np.ndarray:
    """Two predictor evaluations; ``eps`` only forms ``x_t`` and never enters the delta."""
    x_t = _noisy(schedule, x, t, eps)
    e_pos = _pred(prior, schedule, x_t, t, Condition.POSITIVE)
    e_neg = _pred(prior, schedule, x_t, t, Condition.NEGATIVE)
    # "+ 0.0" mirrors the vanishing unconditional term of the three-term form
    return (weights.omega1 * e_pos + 0.0) - weights.omega2 * e_neg


def estimator_delta(estimator: Estimator, prior: AnalyticPrior, schedule: NoiseSchedule, x, t, eps,
                    weights: DistillWeights) -> np.ndarray:
    estimator = Estimator(estimator)
    if estimator is Estimator.SDS:
        return sds_delta(prior, schedule, x, t, eps, weights)
    if estimator is Estimator.CFG_SDS:
        return cfg_decompose(prior, schedule, x, t, eps, weights.omega).combine(weights.omega)
    if estimator is Estimator.CSD:
        return csd_delta(prior, schedule, x, t, eps, weights)
    if estimator is Estimator.CSD_W3:
        return csd_w3_delta(prior, schedule, x, t, eps, weights)
    return bsd_delta(prior, schedule, x, t, eps, weights)


# ---------------------------------------------------------------------------
# image and parameter gradients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DistillDraw:
    """The random quantities of one distillation evaluation, drawn in this order."""

    t: float
    eps: np.ndarray


def draw(rng: np.random.Generator, shape, t_range) -> DistillDraw:
    t_min, t_max = map(float, t_range)
    if not 0.0 <= t_min <= t_max <= 1.0:
        raise ValueError(f"timestep range must satisfy 0 <= t_min <= t_max <= 1, got {t_range}")
    t = float(rng.uniform(t_min, t_max))
    return DistillDraw(t, rng.standard_normal(shape))


@dataclass
class DistillResult:
    image_grad: np.ndarray   # d loss / d x, already masked and weighted
    delta: np.ndarray
    t: float
    active_pixels: int


def distill_image_grad(estimator: Estimator, prior: AnalyticPrior, schedule: NoiseSchedule, x,
                       mask, weights: DistillWeights, d: DistillDraw, chain_rule: bool = True) -> DistillResult:
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {x.shape[:2]}")
    delta = estimator_delta(estimator, prior, schedule, x, d.t, d.eps, weights)
    scale = time_weight(schedule, d.t, weights.w_t_mode)
    if chain_rule:
        scale *= np.sqrt(alpha_bar(schedule, d.t))
    m = mask[..., None] if x.ndim == 3 else mask
    g = np.where(m, scale * delta, 0.0)
    return DistillResult(g, delta, d.t, int(mask.sum()))


def modality_image(out: RenderOutput, modality: Modality) -> np.ndarray:
    if Modality(modality) is Modality.RGB:
        return out.color
    if out.normal is None:
        raise ValueError("normal distillation needs a render with normals")
    return encode_normals(out.normal)


def modality_upstream(grad_img: np.ndarray, modality: Modality) -> dict:
    """Map an image-space gradient to :func:`render_vjp` keyword upstreams."""
    if Modality(modality) is Modality.RGB:
        return {"d_color": grad_img}
    # encoded normal image is (n + 1) / 2
    return {"d_normal": 0.5 * grad_img}


def distill_param_grad(grid: VoxelGrid, camera: Camera, modality: Modality, estimator: Estimator,
                       weights: DistillWeights, prior: AnalyticPrior, mask, schedule: NoiseSchedule,
                       t_range, rng: np.random.Generator, cfg: SamplingConfig | None = None, *,
                       chain_rule: bool = True, jobs: int = 1):
    """Render at ``camera``, form the masked distillation gradient and pull it
    back onto the grid. Returns ``(ParamGradient, DistillResult)``.

    The draw (t, then eps) is taken from ``rng`` even when the mask is empty
    so that the stream position does not depend on the mask.
    """
    cfg = cfg or SamplingConfig()
    modality = Modality(modality)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (camera.height, camera.width):
        raise ValueError(f"mask shape {mask.shape} does not match camera {(camera.height, camera.width)}")
    if prior.shape[:2] != mask.shape:
        raise ValueError(f"prior image shape {prior.shape} does not match camera")
    d = draw(rng, prior.shape, t_range)
    render_seed = int(rng.integers(2 ** 63))
    if not mask.any():
        return ParamGradient.zeros_like(grid), DistillResult(np.zeros(prior.shape), np.zeros(prior.shape), d.t, 0)
    out = render(grid, camera_rays(camera, cfg, grid), cfg, normals=modality is Modality.NORMAL,
                 seed=render_seed, jobs=jobs)
    res = distill_image_grad(estimator, prior, schedule, modality_image(out, modality), mask, weights, d,
                             chain_rule)
    return render_vjp(grid, out, **modality_upstream(res.image_grad, modality), jobs=jobs), res
