"""Differentiable emission-absorption volume rendering of a :class:`VoxelGrid`.

Color, depth, opacity and normal maps are composited with the standard
quadrature ``w_i = T_i (1 - exp(-sigma_i delta_i))``. :func:`render_vjp` is the
exact reverse-mode adjoint of :func:`render`, including the dependence of every
transmittance on all earlier densities and the normal renormalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .field import (
    DEFAULT_NORMAL_EPS,
    ParamGradient,
    VoxelGrid,
    field_vjp,
    normal_from_gradient,
    normal_from_gradient_vjp,
    sample_field,
)

ORTHONORMAL_TOL = 1e-9


@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map camera to world.

    Camera axes follow the OpenCV convention: x right, y down, z forward.
    Pixel ``(u, v)`` is column ``u``, row ``v`` with no half-pixel offset.
    """

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.fx, self.fy, self.cx, self.cy = map(float, (self.fx, self.fy, self.cx, self.cy))
        self.width, self.height = int(self.width), int(self.height)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def validate(self) -> None:
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise ValueError(f"camera rotation is not orthonormal (max |R^T R - I| = {err:.3g})")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    def to_dict(self) -> dict:
        c2w = np.concatenate([self.rotation, self.translation[:, None]], axis=1)
        return {
            "camera_to_world": [float(v) for v in c2w.ravel()],
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
        }

    @classmethod
    def from_dict(cls, d: dict, width: int, height: int) -> "Camera":
        c2w = np.asarray(d["camera_to_world"], dtype=np.float64)
        if c2w.size != 12:
            raise ValueError("camera_to_world must hold 12 numbers (3x4 row-major)")
        c2w = c2w.reshape(3, 4)
        return cls(c2w[:, :3], c2w[:, 3], d["fx"], d["fy"], d["cx"], d["cy"], width, height)


def look_at(eye, target, up=(0.0, 0.0, 1.0), *, fx, width, height, fy=None, cx=None, cy=None) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(r) < 1e-12:
        raise ValueError("view direction is parallel to the up vector")
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    rot = np.stack([r, d, f], axis=1)
    return Camera(
        rot, eye, fx, fx if fy is None else fy,
        (width - 1) / 2.0 if cx is None else cx,
        (height - 1) / 2.0 if cy is None else cy,
        width, height,
    )


def rescale_camera(camera: Camera, width: int, height: int | None = None) -> Camera:
    """Same view at a new resolution; ``height`` defaults to preserving aspect."""
    if height is None:
        height = max(1, int(round(camera.height * width / camera.width)))
    sx = width / camera.width
    sy = height / camera.height
    return replace(
        camera,
        fx=camera.fx * sx,
        fy=camera.fy * sy,
        cx=(camera.cx + 0.5) * sx - 0.5,
        cy=(camera.cy + 0.5) * sy - 0.5,
        width=int(width),
        height=int(height),
    )


def resample_nearest(image: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = image.shape[:2]
    rows = np.minimum((np.arange(height) + 0.5) * h / height, h - 1).astype(int)
    cols = np.minimum((np.arange(width) + 0.5) * w / width, w - 1).astype(int)
    return image[rows][:, cols]


@dataclass
class Rays:
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    shape: tuple = ()

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        n = self.origins.shape[0]
        self.near = np.broadcast_to(np.asarray(self.near, dtype=np.float64), (n,)).copy()
        self.far = np.broadcast_to(np.asarray(self.far, dtype=np.float64), (n,)).copy()
        if not self.shape:
            self.shape = (n,)
        if int(np.prod(self.shape)) != n:
            raise ValueError(f"ray shape {self.shape} does not hold {n} rays")

    def __len__(self):
        return self.origins.shape[0]

    def validate(self) -> None:
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("ray directions must be unit length")
        if np.any(self.near < 0) or np.any(self.far <= self.near):
            raise ValueError("rays need 0 <= near < far")

    def subset(self, index) -> "Rays":
        return Rays(self.origins[index], self.directions[index], self.near[index], self.far[index])


def pixel_directions(camera: Camera, rows, cols) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    d_cam = np.stack([(cols - camera.cx) / camera.fx,
                      (rows - camera.cy) / camera.fy,
                      np.ones_like(cols)], axis=-1)
    d = d_cam @ camera.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def make_rays(camera: Camera, near: float, far: float) -> Rays:
    """One ray per pixel, row-major, image shape ``(height, width)``."""
    camera.validate()
    rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    d = pixel_directions(camera, rows.ravel(), cols.ravel())
    o = np.broadcast_to(camera.translation, d.shape)
    rays = Rays(o, d, near, far, (camera.height, camera.width))
    rays.validate()
    return rays


def ray_box_interval(rays: Rays, box_min, box_max):
    """Slab test: entry/exit distances and a hit flag for each ray."""
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    d = rays.directions
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (box_min - rays.origins) * inv
        t1 = (box_max - rays.origins) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    # axis-parallel rays outside the slab never hit
    para = d == 0.0
    outside = para & ((rays.origins < box_min) | (rays.origins > box_max))
    t_in = lo.max(axis=1)
    t_out = hi.min(axis=1)
    hit = (t_out >= t_in) & ~outside.any(axis=1)
    return t_in, t_out, hit


def segment_hits_box(rays: Rays, box_min, box_max) -> np.ndarray:
    """Whether each ray's ``[near, far]`` segment meets the box."""
    t_in, t_out, hit = ray_box_interval(rays, box_min, box_max)
    return hit & (t_out >= rays.near) & (t_in <= rays.far)


def clip_rays(rays: Rays, box_min, box_max) -> Rays:
    """Narrow each ray to the part of ``[near, far]`` inside the box; rays
    that miss keep their bounds (all of their samples read empty space)."""
    t_in, t_out, hit = ray_box_interval(rays, box_min, box_max)
    near = np.maximum(t_in, rays.near)
    far = np.minimum(t_out, rays.far)
    ok = hit & (far - near > 1e-9)
    return Rays(rays.origins, rays.directions,
                np.where(ok, near, rays.near), np.where(ok, far, rays.far), rays.shape)


@dataclass
class SamplingConfig:
    """Ray bounds and partitioning plus the normal-map options.

    ``normal_step`` of ``None`` means one voxel edge of the rendered grid.
    With ``clip_to_bbox`` each ray's ``[near, far]`` is narrowed to its
    intersection with the grid's box, so all samples land inside it.
    """

    n_samples: int = 64
    stratified: bool = False
    rng_seed: int = 0
    near: float = 0.0
    far: float = 6.0
    clip_to_bbox: bool = False
    normal_step: float | None = None
    normal_eps: float = DEFAULT_NORMAL_EPS
    depth_normalize: bool = False

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.normal_eps <= 0:
            raise ValueError("normal_eps must be positive")
        if not 0.0 <= self.near < self.far:
            raise ValueError("need 0 <= near < far")


@dataclass
class RenderSegments:
    """Per-sample state retained from the forward pass for :func:`render_vjp`."""

    points: np.ndarray       # (R*N, 3)
    t: np.ndarray            # (R, N)
    delta: np.ndarray        # (R, 1)
    sigma: np.ndarray        # (R, N)
    color: np.ndarray        # (R, N, 3)
    grad: np.ndarray | None  # (R, N, 3)
    normals: np.ndarray | None
    weights: np.ndarray      # (R, N)
    transmittance: np.ndarray
    cum_tau: np.ndarray
    normal_sum: np.ndarray | None
    step: float
    cfg: SamplingConfig


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    normal: np.ndarray | None
    segments: RenderSegments | None = dc_field(default=None, repr=False)


def camera_rays(camera: Camera, cfg: SamplingConfig, grid: VoxelGrid | None = None) -> Rays:
    rays = make_rays(camera, cfg.near, cfg.far)
    if cfg.clip_to_bbox:
        if grid is None:
            raise ValueError("clip_to_bbox needs the grid's bounding box")
        rays = clip_rays(rays, grid.bbox_min, grid.bbox_max)
    return rays


def sample_depths(rays: Rays, cfg: SamplingConfig, seed: int | None = None):
    """Sample positions ``t`` (R, N) and the common interval length ``delta`` (R, 1)."""
    n = cfg.n_samples
    span = (rays.far - rays.near)[:, None]
    delta = span / n
    if cfg.stratified:
        rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
        u = rng.random((len(rays), n))
    else:
        u = 0.5
    t = rays.near[:, None] + (np.arange(n)[None, :] + u) * delta
    return t, delta


def composite_weights(sigma: np.ndarray, delta: np.ndarray):
    """Return ``(weights, transmittance, cumulative optical depth)`` along the last axis."""
    tau = sigma * delta
    cum = np.cumsum(tau, axis=-1)
    excl = np.concatenate([np.zeros_like(cum[..., :1]), cum[..., :-1]], axis=-1)
    trans = np.exp(-excl)
    w = trans * -np.expm1(-tau)
    return w, trans, cum


def _renormalize(m, eps):
    r = np.sqrt(np.sum(m * m, axis=-1, keepdims=True) + eps * eps)
    return m / r


def render(grid: VoxelGrid, rays: Rays, cfg: SamplingConfig | None = None, *, normals=True,
           seed: int | None = None, keep_segments=True, jobs=1) -> RenderOutput:
    cfg = cfg or SamplingConfig()
    t, delta = sample_depths(rays, cfg, seed)
    nr, ns = t.shape
    pts = (rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]).reshape(-1, 3)
    step = grid.default_step if cfg.normal_step is None else float(cfg.normal_step)
    sigma, color, grad = sample_field(grid, pts, color=True, gradient=normals, step=step, jobs=jobs)
    sigma = sigma.reshape(nr, ns)
    color = color.reshape(nr, ns, 3)

    w, trans, cum = composite_weights(sigma, delta)
    opacity = w.sum(axis=1)
    rgb = np.einsum("rn,rnc->rc", w, color)
    depth = np.sum(w * t, axis=1)
    if cfg.depth_normalize:
        depth = depth / (opacity + 1e-10)

    nrm = n_pts = m = None
    if normals:
        grad = grad.reshape(nr, ns, 3)
        n_pts = normal_from_gradient(grad, cfg.normal_eps)
        m = np.einsum("rn,rnc->rc", w, n_pts)
        nrm = _renormalize(m, cfg.normal_eps)

    shape = rays.shape
    out = RenderOutput(
        rgb.reshape(shape + (3,)),
        depth.reshape(shape),
        opacity.reshape(shape),
        None if nrm is None else nrm.reshape(shape + (3,)),
    )
    if keep_segments:
        out.segments = RenderSegments(pts, t, delta, sigma, color, grad, n_pts, w, trans, cum, m, step, cfg)
    return out


def render_vjp(grid: VoxelGrid, out: RenderOutput, d_color=None, d_depth=None, d_normal=None,
               d_opacity=None, *, jobs=1) -> ParamGradient:
    """Pull per-pixel upstream gradients back onto the grid parameters.

    Rays whose upstream is zero on every channel are skipped; their
    contribution is exactly zero.
    """
    seg = out.segments
    if seg is None:
        raise RuntimeError("render_vjp needs the forward segments; render with keep_segments=True")
    nr, ns = seg.t.shape
    ups = {}
    if d_color is not None:
        ups["color"] = np.asarray(d_color, dtype=np.float64).reshape(nr, 3)
    if d_depth is not None:
        ups["depth"] = np.asarray(d_depth, dtype=np.float64).reshape(nr, 1)
    if d_opacity is not None:
        ups["opacity"] = np.asarray(d_opacity, dtype=np.float64).reshape(nr, 1)
    if d_normal is not None:
        if seg.normal_sum is None:
            raise RuntimeError("normal upstream given but the forward pass skipped normals")
        ups["normal"] = np.asarray(d_normal, dtype=np.float64).reshape(nr, 3)
    if not ups:
        return ParamGradient.zeros_like(grid)
    active = np.zeros(nr, dtype=bool)
    for u in ups.values():
        active |= np.any(u != 0.0, axis=1)
    idx = np.flatnonzero(active)
    if idx.size == 0:
        return ParamGradient.zeros_like(grid)
    if idx.size == nr:
        idx = slice(None)
    ups = {k: v[idx] for k, v in ups.items()}

    w = seg.weights[idx]
    t = seg.t[idx]
    na = w.shape[0]
    dw = np.zeros_like(w)
    d_col_pts = None
    d_grad_pts = None

    if "color" in ups:
        dC = ups["color"]
        dw += np.einsum("rc,rnc->rn", dC, seg.color[idx])
        d_col_pts = w[..., None] * dC[:, None, :]
    dA = np.zeros(na)
    if "opacity" in ups:
        dA += ups["opacity"][:, 0]
    if "depth" in ups:
        dD = ups["depth"][:, 0]
        if seg.cfg.depth_normalize:
            a = w.sum(axis=1) + 1e-10
            s = np.sum(w * t, axis=1)
            dw += (dD / a)[:, None] * t
            dA += -dD * s / a ** 2
        else:
            dw += dD[:, None] * t
    dw += dA[:, None]
    if "normal" in ups:
        dN = ups["normal"]
        m = seg.normal_sum[idx]
        eps = seg.cfg.normal_eps
        r = np.sqrt(np.sum(m * m, axis=1, keepdims=True) + eps * eps)
        dm = dN / r - m * (np.sum(m * dN, axis=1, keepdims=True) / r ** 3)
        dw += np.einsum("rc,rnc->rn", dm, seg.normals[idx])
        dn = w[..., None] * dm[:, None, :]
        d_grad_pts = normal_from_gradient_vjp(seg.grad[idx], dn, eps)

    # d tau_k = dw_k T_{k+1} - sum_{i>k} dw_i w_i
    t_next = np.exp(-seg.cum_tau[idx])
    prod = dw * w
    tail = np.cumsum(prod[:, ::-1], axis=1)[:, ::-1]
    later = np.concatenate([tail[:, 1:], np.zeros((na, 1))], axis=1)
    d_sigma = (dw * t_next - later) * seg.delta[idx]

    points = seg.points.reshape(nr, ns, 3)[idx].reshape(-1, 3)
    return field_vjp(
        grid,
        points,
        d_sigma.reshape(-1),
        None if d_col_pts is None else d_col_pts.reshape(-1, 3),
        None if d_grad_pts is None else d_grad_pts.reshape(-1, 3),
        step=seg.step,
        jobs=jobs,
    )


def encode_normals(n: np.ndarray) -> np.ndarray:
    """Map normals in [-1, 1] to the [0, 1] image range used by the priors."""
    return 0.5 * (n + 1.0)


def decode_normals(img: np.ndarray) -> np.ndarray:
    return 2.0 * img - 1.0
