"""Masked inpainting objective and the optimization loop.

Unmasked pixels are fitted by the photometric and depth reconstruction
losses; masked pixels receive only the two distillation gradients (RGB and
encoded normal map) rendered at a random training view. Each step draws its
randomness from ``SeedSequence([seed, step])`` split into independent streams
(ray batch, distillation view, RGB draw, normal draw), so a run can be resumed
bit-exactly from any checkpoint and disabling one term leaves the others'
random numbers untouched.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from .distill import (
    DistillWeights,
    Estimator,
    distill_image_grad,
    draw,
    modality_image,
    modality_upstream,
)
from .field import GridFormatError, ParamGradient, VoxelGrid, load_grid, save_grid
from .prior import AnalyticPrior, Modality, NoiseSchedule, corrupt
from .renderer import (
    Camera,
    Rays,
    SamplingConfig,
    camera_rays,
    decode_normals,
    encode_normals,
    render,
    render_vjp,
    rescale_camera,
    resample_nearest,
)
from .scene import SceneDataset

PSNR_CAP = 99.0
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 1e-4
    lambda3: float = 1e-4

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class PriorSpec:
    """How a per-view analytic prior is built from the target render."""

    var_pos: float = 0.01
    var_neg: float = 0.25
    mixture_weight: float = 0.5
    negative: str = "blur"
    strength: float = 3.0


@dataclass
class TrainConfig:
    iterations: int = 10000
    lr: float = 1e-4
    batch_size: int = 1024
    t_min: float = 0.02
    t_max: float = 0.98
    seed: int = 0
    estimator: str = "bsd"
    appearance: DistillWeights = dc_field(default_factory=lambda: DistillWeights(omega1=7.5, omega2=6.5))
    geometry: DistillWeights = dc_field(default_factory=lambda: DistillWeights(omega1=1.5, omega2=0.5))
    loss: LossWeights = dc_field(default_factory=LossWeights)
    depth_supervision: bool = True
    rgb_prior: PriorSpec = dc_field(default_factory=PriorSpec)
    normal_prior: PriorSpec = dc_field(default_factory=PriorSpec)
    schedule: NoiseSchedule = dc_field(default_factory=NoiseSchedule)
    sampling: SamplingConfig = dc_field(default_factory=lambda: SamplingConfig(n_samples=48, near=1.0, far=5.0,
                                                                                clip_to_bbox=True))
    distill_resolution: int = 64
    chain_rule: bool = True
    init_density: float = -2.0
    init_color: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 50
    checkpoint_every: int = 1000
    eval_every: int = 500
    eval_views: tuple = (2, 7, 12, 17)
    eval_resolution: int | None = None
    jobs: int = 1

    def __post_init__(self):
        if not 0.0 <= self.t_min < self.t_max <= 1.0:
            raise ValueError("need 0 <= t_min < t_max <= 1")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        Estimator(self.estimator)
        self.eval_views = tuple(int(v) for v in self.eval_views)

    @property
    def t_range(self):
        return (self.t_min, self.t_max)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: ParamGradient
    v: ParamGradient
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, grid: VoxelGrid, beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        return cls(ParamGradient.zeros_like(grid), ParamGradient.zeros_like(grid), 0, beta1, beta2, eps)

    def save(self, path) -> None:
        np.savez(path, m_d=self.m.d_raw_density, m_c=self.m.d_raw_color,
                 v_d=self.v.d_raw_density, v_c=self.v.d_raw_color)

    @classmethod
    def load(cls, path, meta: dict) -> "OptimizerState":
        with np.load(path) as z:
            return cls(ParamGradient(z["m_d"], z["m_c"]), ParamGradient(z["v_d"], z["v_c"]),
                       int(meta["step"]), meta["beta1"], meta["beta2"], meta["eps"])


def adam_update(grid: VoxelGrid, grad: ParamGradient, state: OptimizerState, lr: float) -> None:
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in ((grid.raw_density, grad.d_raw_density, state.m.d_raw_density, state.v.d_raw_density),
                       (grid.raw_color, grad.d_raw_color, state.m.d_raw_color, state.v.d_raw_color)):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# reconstruction losses
# ---------------------------------------------------------------------------


@dataclass
class RayBatch:
    rays: Rays
    colors: np.ndarray
    depths: np.ndarray | None = None

    def __len__(self):
        return len(self.rays)


def _empty(grid):
    return 0.0, ParamGradient.zeros_like(grid)


def reconstruction_loss_appearance(grid: VoxelGrid, batch: RayBatch, cfg: SamplingConfig, *, out=None, jobs=1):
    """``sum_r |C_hat(r) - C(r)|^2`` and its gradient."""
    if len(batch) == 0:
        return _empty(grid)
    out = out or render(grid, batch.rays, cfg, normals=False, jobs=jobs)
    diff = out.color - batch.colors
    return float(np.sum(diff * diff)), render_vjp(grid, out, d_color=2.0 * diff, jobs=jobs)


def reconstruction_loss_depth(grid: VoxelGrid, batch: RayBatch, cfg: SamplingConfig, *, out=None, jobs=1):
    """``sum_r (D_hat(r) - D(r))^2`` and its gradient."""
    if len(batch) == 0:
        return _empty(grid)
    if batch.depths is None:
        raise ValueError("depth supervision is on but the batch carries no depth")
    out = out or render(grid, batch.rays, cfg, normals=False, jobs=jobs)
    diff = out.depth - batch.depths
    return float(np.sum(diff * diff)), render_vjp(grid, out, d_depth=2.0 * diff, jobs=jobs)


# ---------------------------------------------------------------------------
# problem setup
# ---------------------------------------------------------------------------


@dataclass
class ViewPriors:
    camera: Camera
    mask: np.ndarray
    rgb: AnalyticPrior
    normal: AnalyticPrior


def make_prior(target: np.ndarray, spec: PriorSpec, modality: Modality) -> AnalyticPrior:
    return AnalyticPrior(target, corrupt(target, spec.negative, spec.strength), spec.var_pos, spec.var_neg,
                         spec.mixture_weight, modality)


class TrainingProblem:
    """Everything derived once from a dataset: training rays, the unmasked
    pixel pool and (lazily) the per-view distillation priors."""

    def __init__(self, dataset: SceneDataset, cfg: TrainConfig):
        self.dataset = dataset
        self.cfg = cfg
        n = len(dataset)
        bad = [v for v in cfg.eval_views if not 0 <= v < n]
        if bad:
            raise ValueError(f"evaluation views {bad} outside the dataset's {n} views")
        self.train_views = [v for v in range(n) if v not in cfg.eval_views]
        if not self.train_views:
            raise ValueError("no training views left after holding out the evaluation views")
        if cfg.depth_supervision and any(d is None for d in dataset.depths):
            raise ValueError("depth supervision is on but the dataset has no depth channel")
        bbox_grid = self.init_grid()
        origins, dirs, near, far, colors, depths = [], [], [], [], [], []
        for v in self.train_views:
            rays = camera_rays(dataset.cameras[v], cfg.sampling, bbox_grid)
            keep = ~dataset.masks[v].reshape(-1)
            origins.append(rays.origins[keep])
            dirs.append(rays.directions[keep])
            near.append(rays.near[keep])
            far.append(rays.far[keep])
            colors.append(dataset.images[v].reshape(-1, 3)[keep])
            depths.append(dataset.depths[v].reshape(-1)[keep])
        self.rays = Rays(np.concatenate(origins), np.concatenate(dirs), np.concatenate(near), np.concatenate(far))
        self.colors = np.concatenate(colors)
        self.depths = np.concatenate(depths)
        self._priors: dict[int, ViewPriors] = {}

    def init_grid(self) -> VoxelGrid:
        ds = self.dataset
        ref = ds.target_grid if ds.target_grid is not None else ds.grid
        if ref is None:
            raise ValueError("dataset carries no grid to take the lattice layout from")
        return VoxelGrid.filled(ref.dims, ref.bbox_min, ref.bbox_max, self.cfg.init_density, self.cfg.init_color)

    def sample_batch(self, rng: np.random.Generator) -> RayBatch:
        idx = rng.integers(0, len(self.rays), self.cfg.batch_size)
        return RayBatch(self.rays.subset(idx), self.colors[idx], self.depths[idx])

    def distill_camera(self, view: int) -> Camera:
        return rescale_camera(self.dataset.cameras[view], self.cfg.distill_resolution)

    def view_priors(self, view: int) -> ViewPriors:
        """Priors whose positive mean is the object-free target seen from ``view``."""
        if view in self._priors:
            return self._priors[view]
        ds, cfg = self.dataset, self.cfg
        cam = self.distill_camera(view)
        mask = resample_nearest(ds.masks[view], cam.height, cam.width)
        if ds.target_grid is not None:
            out = render(ds.target_grid, camera_rays(cam, cfg.sampling, ds.target_grid), cfg.sampling,
                         normals=True, keep_segments=False, jobs=cfg.jobs)
            rgb, nrm = out.color, encode_normals(out.normal)
        elif ds.target is not None:
            rgb = resample_nearest(ds.target.images[view], cam.height, cam.width)
            nrm = encode_normals(resample_nearest(ds.target.normals[view], cam.height, cam.width))
        else:
            raise ValueError("distillation priors need the object-free target")
        vp = ViewPriors(cam, mask, make_prior(rgb, cfg.rgb_prior, Modality.RGB),
                        make_prior(nrm, cfg.normal_prior, Modality.NORMAL))
        self._priors[view] = vp
        return vp


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------


@dataclass
class StepReport:
    step: int
    loss_app: float = 0.0
    loss_depth: float = 0.0
    grad_app: float = 0.0
    grad_depth: float = 0.0
    grad_rgb: float = 0.0
    grad_normal: float = 0.0
    grad_total: float = 0.0
    distill_view: int = -1
    t_rgb: float = float("nan")
    t_normal: float = float("nan")

    def row(self) -> dict:
        return asdict(self)

    def finite(self) -> bool:
        return all(np.isfinite(v) for k, v in asdict(self).items() if not k.startswith("t_"))


def step_streams(seed: int, step: int):
    """Independent generators for (batch, view, rgb, normal) at ``step``."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence([int(seed), int(step)]).spawn(4)]


def train_step(grid: VoxelGrid, opt: OptimizerState, problem: TrainingProblem, cfg: TrainConfig,
               step: int | None = None) -> StepReport:
    """Accumulate the four gradient terms and apply one Adam update.

    Raises :class:`NonFiniteError` (carrying the report) before touching the
    grid if any loss or gradient is not finite.
    """
    step = opt.step + 1 if step is None else step
    rng_batch, rng_view, rng_rgb, rng_nrm = step_streams(cfg.seed, step)
    rep = StepReport(step)
    lam = cfg.loss
    jobs = cfg.jobs
    scfg = cfg.sampling

    batch = problem.sample_batch(rng_batch)
    out = render(grid, batch.rays, scfg, normals=False, jobs=jobs)
    rep.loss_app, total = reconstruction_loss_appearance(grid, batch, scfg, out=out, jobs=jobs)
    rep.grad_app = total.norm()
    if cfg.depth_supervision and lam.lambda1 > 0:
        rep.loss_depth, g = reconstruction_loss_depth(grid, batch, scfg, out=out, jobs=jobs)
        rep.grad_depth = g.norm()
        total += g * lam.lambda1

    view = problem.train_views[int(rng_view.integers(len(problem.train_views)))]
    rep.distill_view = view
    terms = [(Modality.RGB, lam.lambda2, cfg.appearance, rng_rgb),
             (Modality.NORMAL, lam.lambda3, cfg.geometry, rng_nrm)]
    active = [tm for tm in terms if tm[1] > 0]
    if active:
        vp = problem.view_priors(view)
        seed = int(rng_view.integers(2 ** 63))
        d_out = None
        for modality, weight, dw, rng in active:
            prior = vp.rgb if modality is Modality.RGB else vp.normal
            d = draw(rng, prior.shape, cfg.t_range)
            if modality is Modality.RGB:
                rep.t_rgb = d.t
            else:
                rep.t_normal = d.t
            if not vp.mask.any():
                continue
            if d_out is None:
                want_normals = any(m is Modality.NORMAL for m, *_ in active)
                d_out = render(grid, camera_rays(vp.camera, scfg, grid), scfg, normals=want_normals,
                               seed=seed, jobs=jobs)
            res = distill_image_grad(Estimator(cfg.estimator), prior, cfg.schedule, modality_image(d_out, modality),
                                     vp.mask, dw, d, cfg.chain_rule)
            g = render_vjp(grid, d_out, **modality_upstream(res.image_grad, modality), jobs=jobs)
            if modality is Modality.RGB:
                rep.grad_rgb = g.norm()
            else:
                rep.grad_normal = g.norm()
            total += g * weight

    rep.grad_total = total.norm()
    if not (rep.finite() and total.is_finite()):
        raise NonFiniteError(f"non-finite loss or gradient at step {step}: {rep.row()}", rep)
    opt.step = step - 1
    adam_update(grid, total, opt, cfg.lr)
    return rep


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def psnr(a, b, mask=None) -> float:
    """PSNR for [0, 1] images; a zero error is reported as :data:`PSNR_CAP`."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if mask is not None:
        d = d[np.asarray(mask, dtype=bool)]
    if d.size == 0:
        return float("nan")
    mse = float(np.mean(d * d))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def high_frequency_energy(image, mask) -> float:
    """Mean gradient magnitude of ``image`` over masked pixels (forward differences)."""
    img = np.asarray(image, dtype=np.float64)
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, :-1] = img[:, 1:] - img[:, :-1]
    gy[:-1] = img[1:] - img[:-1]
    mag = np.sqrt(np.sum(gx * gx + gy * gy, axis=-1))
    m = np.asarray(mask, dtype=bool)
    return float(mag[m].mean()) if m.any() else 0.0


EVAL_COLUMNS = ("step", "psnr", "psnr_masked", "psnr_unmasked", "mse_masked", "depth_rmse", "normal_deg",
                "hf_masked")


def evaluate(grid: VoxelGrid, dataset: SceneDataset, views, sampling: SamplingConfig,
             resolution: int | None = None, jobs: int = 1, return_renders: bool = False):
    """Metrics against the object-free target (or the images when no target is stored).

    Per-view errors are pooled over all pixels of all views before forming
    PSNR. Depth and normal errors use pixels where the target depth is
    positive.
    """
    tgt = dataset.target
    sq = {"all": [], "masked": [], "unmasked": []}
    depth_sq, angles, hf = [], [], []
    renders = []
    for v in views:
        cam = dataset.cameras[v]
        ref_img = (tgt.images if tgt is not None else dataset.images)[v]
        ref_depth = (tgt.depths if tgt is not None else dataset.depths)[v]
        ref_nrm = (tgt.normals if tgt is not None else dataset.normals)[v]
        mask = dataset.masks[v]
        if resolution is not None and resolution != cam.width:
            cam = rescale_camera(cam, resolution)
            ref_img = resample_nearest(ref_img, cam.height, cam.width)
            ref_depth = resample_nearest(ref_depth, cam.height, cam.width)
            ref_nrm = resample_nearest(ref_nrm, cam.height, cam.width)
            mask = resample_nearest(mask, cam.height, cam.width)
        out = render(grid, camera_rays(cam, sampling, grid), sampling, normals=True, keep_segments=False, jobs=jobs)
        renders.append(out)
        d2 = np.sum((out.color - ref_img) ** 2, axis=-1) / 3.0
        sq["all"].append(d2.ravel())
        sq["masked"].append(d2[mask])
        sq["unmasked"].append(d2[~mask])
        solid = ref_depth > 0
        depth_sq.append((out.depth - ref_depth)[solid] ** 2)
        cos = np.sum(out.normal * ref_nrm, axis=-1)
        denom = np.linalg.norm(out.normal, axis=-1) * np.linalg.norm(ref_nrm, axis=-1)
        ok = solid & (denom > 1e-12)
        angles.append(np.degrees(np.arccos(np.clip(cos[ok] / denom[ok], -1.0, 1.0))))
        hf.append(high_frequency_energy(out.color, mask) if mask.any() else np.nan)

    def to_psnr(chunks):
        d = np.concatenate(chunks)
        if d.size == 0:
            return float("nan"), float("nan")
        mse = float(d.mean())
        return (PSNR_CAP if mse <= 10.0 ** (-PSNR_CAP / 10.0) else float(10 * np.log10(1 / mse))), mse

    p_all, _ = to_psnr(sq["all"])
    p_m, mse_m = to_psnr(sq["masked"])
    p_u, _ = to_psnr(sq["unmasked"])
    dsq = np.concatenate(depth_sq)
    ang = np.concatenate(angles)
    hf = np.asarray(hf)
    metrics = {
        "psnr": p_all,
        "psnr_masked": p_m,
        "psnr_unmasked": p_u,
        "mse_masked": mse_m,
        "depth_rmse": float(np.sqrt(dsq.mean())) if dsq.size else float("nan"),
        "normal_deg": float(ang.mean()) if ang.size else float("nan"),
        "hf_masked": float(np.nanmean(hf)) if np.any(np.isfinite(hf)) else float("nan"),
    }
    return (metrics, renders) if return_renders else metrics


# ---------------------------------------------------------------------------
# checkpoints and the loop
# ---------------------------------------------------------------------------


METRIC_COLUMNS = tuple(StepReport(0).row().keys())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def save_checkpoint(directory, grid: VoxelGrid, opt: OptimizerState, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / f"step_{opt.step:06d}"
    save_grid(grid, stem.with_suffix(".vxg"))
    opt.save(stem.with_suffix(".npz"))
    meta = {"format": "VXG1", "version": CHECKPOINT_VERSION, "step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2,
            "eps": opt.eps, "grid": stem.with_suffix(".vxg").name, "moments": stem.with_suffix(".npz").name}
    meta.update(extra or {})
    path = stem.with_suffix(".json")
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    """Return ``(grid, optimizer state, sidecar dict)`` from a sidecar JSON or grid path."""
    path = Path(path)
    if path.suffix == ".vxg":
        path = path.with_suffix(".json")
    meta = json.loads(path.read_text())
    fmt, version = meta.get("format"), meta.get("version")
    if fmt != "VXG1" or version != CHECKPOINT_VERSION:
        raise GridFormatError(f"unsupported checkpoint: stored format {fmt!r} version {version!r}, "
                              f"expected 'VXG1' version {CHECKPOINT_VERSION}")
    grid = load_grid(path.parent / meta["grid"])
    opt = OptimizerState.load(path.parent / meta["moments"], meta)
    return grid, opt, meta


@dataclass
class TrainResult:
    grid: VoxelGrid
    opt: OptimizerState
    reports: list
    evals: list
    status: str = "ok"
    error: str = ""


class _CsvLog:
    def __init__(self, path: Path | None, columns, resume_step: int | None):
        self.path = path
        self.columns = list(columns)
        if path is None:
            return
        rows = []
        if resume_step is not None and path.exists():
            with open(path, newline="") as f:
                rows = [r for r in csv.DictReader(f) if int(r["step"]) <= resume_step]
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, self.columns, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)

    def add(self, row: dict):
        if self.path is None:
            return
        with open(self.path, "a", newline="") as f:
            csv.DictWriter(f, self.columns, lineterminator="\n").writerow({k: _fmt(row[k]) for k in self.columns})


def train(problem: TrainingProblem, cfg: TrainConfig | None = None, out_dir=None, resume=None,
          iterations: int | None = None, grid: VoxelGrid | None = None, progress=None) -> TrainResult:
    """Run the loop, logging and checkpointing into ``out_dir`` when given.

    ``metrics.csv`` (every ``log_every`` steps) and ``eval.csv`` (every
    ``eval_every`` steps plus step 0 and step ``cfg.iterations``) are deterministic;
    wall-clock time goes to ``timing.csv``. A non-finite step stops the loop
    with status ``"nonfinite"``, leaving the last good checkpoint on disk.
    """
    cfg = cfg or problem.cfg
    total = cfg.iterations if iterations is None else int(iterations)
    out = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        grid, opt, _ = load_checkpoint(resume)
    else:
        grid = grid.copy() if grid is not None else problem.init_grid()
        opt = OptimizerState.fresh(grid, cfg.beta1, cfg.beta2, cfg.adam_eps)
    start = opt.step
    resumed = start if resume is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics_log = _CsvLog(out / "metrics.csv" if out else None, METRIC_COLUMNS, resumed)
    eval_log = _CsvLog(out / "eval.csv" if out else None, EVAL_COLUMNS, resumed)
    timing_log = _CsvLog(out / "timing.csv" if out else None, ("step", "seconds"), resumed)
    ckpt_dir = out / "checkpoints" if out else None
    eval_res = cfg.eval_resolution
    result = TrainResult(grid, opt, [], [])

    def run_eval(step):
        m = evaluate(grid, problem.dataset, cfg.eval_views, cfg.sampling, eval_res, cfg.jobs)
        m = {"step": step, **m}
        result.evals.append(m)
        eval_log.add(m)

    if start == 0 and cfg.eval_every > 0:
        run_eval(0)
    t0 = time.perf_counter()
    for step in range(start + 1, total + 1):
        try:
            rep = train_step(grid, opt, problem, cfg, step)
        except NonFiniteError as exc:
            result.status, result.error = "nonfinite", str(exc)
            if exc.report is not None:
                result.reports.append(exc.report)
            break
        result.reports.append(rep)
        # only the configured last step forces a row, so chunked runs log like one run
        if step % cfg.log_every == 0 or step == cfg.iterations:
            metrics_log.add(rep.row())
            timing_log.add({"step": step, "seconds": round(time.perf_counter() - t0, 3)})
        if cfg.eval_every > 0 and (step % cfg.eval_every == 0 or step == cfg.iterations):
            run_eval(step)
        if ckpt_dir is not None and (step % cfg.checkpoint_every == 0 or step == total):
            save_checkpoint(ckpt_dir, grid, opt)
        if progress is not None:
            progress(rep)
    return result
