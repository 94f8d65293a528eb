"""Voxel-grid radiance field: trilinear density/color sampling, density-gradient
normals, and the exact vector-Jacobian product into the raw lattices.

The lattice nodes sit on the bounding-box corners, so node ``i`` along an axis
is at ``bbox_min + i * (bbox_max - bbox_min) / (n - 1)``. Density is
``softplus`` of the interpolated raw value, color is ``sigmoid`` of the
interpolated (clamped) raw color. Outside the box both are zero.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

COLOR_CLAMP = 30.0
DEFAULT_NORMAL_EPS = 1e-6
MAGIC = b"VXG1"


# ---------------------------------------------------------------------------
# scalar kernels
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True, inline="always")
def _softplus(x):
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


@njit(cache=True, nogil=True, inline="always")
def _sigmoid(x):
    z = math.exp(-abs(x))
    if x >= 0.0:
        return 1.0 / (1.0 + z)
    return z / (1.0 + z)


@njit(cache=True, nogil=True, inline="always")
def _locate(x, y, z, lo, sc, nx, ny, nz):
    # sc = (n - 1) / extent per axis; u >= 0 here so int() is floor
    ux = (x - lo[0]) * sc[0]
    uy = (y - lo[1]) * sc[1]
    uz = (z - lo[2]) * sc[2]
    inside = (
        ux >= 0.0 and ux <= nx - 1
        and uy >= 0.0 and uy <= ny - 1
        and uz >= 0.0 and uz <= nz - 1
    )
    if not inside:
        return False, 0, 0, 0, 0.0, 0.0, 0.0
    i = min(int(ux), nx - 2)
    j = min(int(uy), ny - 2)
    k = min(int(uz), nz - 2)
    return True, i, j, k, ux - i, uy - j, uz - k


@njit(cache=True, nogil=True, inline="always")
def _lerp3(a, i, j, k, fx, fy, fz):
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    return (
        gx * (gy * (gz * a[i, j, k] + fz * a[i, j, k + 1])
              + fy * (gz * a[i, j + 1, k] + fz * a[i, j + 1, k + 1]))
        + fx * (gy * (gz * a[i + 1, j, k] + fz * a[i + 1, j, k + 1])
                + fy * (gz * a[i + 1, j + 1, k] + fz * a[i + 1, j + 1, k + 1]))
    )


@njit(cache=True, nogil=True, inline="always")
def _lerp3c(a, i, j, k, fx, fy, fz, c):
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    return (
        gx * (gy * (gz * a[i, j, k, c] + fz * a[i, j, k + 1, c])
              + fy * (gz * a[i, j + 1, k, c] + fz * a[i, j + 1, k + 1, c]))
        + fx * (gy * (gz * a[i + 1, j, k, c] + fz * a[i + 1, j, k + 1, c])
                + fy * (gz * a[i + 1, j + 1, k, c] + fz * a[i + 1, j + 1, k + 1, c]))
    )


@njit(cache=True, nogil=True, inline="always")
def _splat3(g, i, j, k, fx, fy, fz, v):
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    g[i, j, k] += gx * gy * gz * v
    g[i, j, k + 1] += gx * gy * fz * v
    g[i, j + 1, k] += gx * fy * gz * v
    g[i, j + 1, k + 1] += gx * fy * fz * v
    g[i + 1, j, k] += fx * gy * gz * v
    g[i + 1, j, k + 1] += fx * gy * fz * v
    g[i + 1, j + 1, k] += fx * fy * gz * v
    g[i + 1, j + 1, k + 1] += fx * fy * fz * v


@njit(cache=True, nogil=True, inline="always")
def _splat3c(g, i, j, k, fx, fy, fz, c, v):
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    g[i, j, k, c] += gx * gy * gz * v
    g[i, j, k + 1, c] += gx * gy * fz * v
    g[i, j + 1, k, c] += gx * fy * gz * v
    g[i, j + 1, k + 1, c] += gx * fy * fz * v
    g[i + 1, j, k, c] += fx * gy * gz * v
    g[i + 1, j, k + 1, c] += fx * gy * fz * v
    g[i + 1, j + 1, k, c] += fx * fy * gz * v
    g[i + 1, j + 1, k + 1, c] += fx * fy * fz * v


@njit(cache=True, nogil=True, inline="always")
def _density_at(raw_d, lo, sc, x, y, z):
    nx, ny, nz = raw_d.shape
    ux = (x - lo[0]) * sc[0]
    uy = (y - lo[1]) * sc[1]
    uz = (z - lo[2]) * sc[2]
    if not (ux >= 0.0 and ux <= nx - 1 and uy >= 0.0 and uy <= ny - 1 and uz >= 0.0 and uz <= nz - 1):
        return 0.0
    i = min(int(ux), nx - 2)
    j = min(int(uy), ny - 2)
    k = min(int(uz), nz - 2)
    return _softplus(_lerp3(raw_d, i, j, k, ux - i, uy - j, uz - k))


@njit(cache=True, nogil=True, inline="always")
def _density_splat(raw_d, lo, sc, x, y, z, up, g):
    if up == 0.0:
        return
    nx, ny, nz = raw_d.shape
    ux = (x - lo[0]) * sc[0]
    uy = (y - lo[1]) * sc[1]
    uz = (z - lo[2]) * sc[2]
    if not (ux >= 0.0 and ux <= nx - 1 and uy >= 0.0 and uy <= ny - 1 and uz >= 0.0 and uz <= nz - 1):
        return
    i = min(int(ux), nx - 2)
    j = min(int(uy), ny - 2)
    k = min(int(uz), nz - 2)
    fx = ux - i
    fy = uy - j
    fz = uz - k
    r = _lerp3(raw_d, i, j, k, fx, fy, fz)
    _splat3(g, i, j, k, fx, fy, fz, up * _sigmoid(r))


@njit(cache=True, nogil=True)
def _forward_kernel(raw_d, raw_c, lo, sc, pts, step, want_color, want_grad,
                    sigma, color, grad):
    nx, ny, nz = raw_d.shape
    for m in range(pts.shape[0]):
        x = pts[m, 0]
        y = pts[m, 1]
        z = pts[m, 2]
        inside, i, j, k, fx, fy, fz = _locate(x, y, z, lo, sc, nx, ny, nz)
        if inside:
            sigma[m] = _softplus(_lerp3(raw_d, i, j, k, fx, fy, fz))
        else:
            sigma[m] = 0.0
        if want_color:
            for c in range(3):
                if inside:
                    r = _lerp3c(raw_c, i, j, k, fx, fy, fz, c)
                    r = min(max(r, -COLOR_CLAMP), COLOR_CLAMP)
                    color[m, c] = _sigmoid(r)
                else:
                    color[m, c] = 0.0
    if want_grad:
        _gradient_kernel(raw_d, lo, sc, pts, step, grad)


@njit(cache=True, nogil=True)
def _gradient_kernel(raw_d, lo, sc, pts, step, grad):
    inv2h = 0.5 / step
    for m in range(pts.shape[0]):
        x = pts[m, 0]
        y = pts[m, 1]
        z = pts[m, 2]
        grad[m, 0] = (_density_at(raw_d, lo, sc, x + step, y, z)
                      - _density_at(raw_d, lo, sc, x - step, y, z)) * inv2h
        grad[m, 1] = (_density_at(raw_d, lo, sc, x, y + step, z)
                      - _density_at(raw_d, lo, sc, x, y - step, z)) * inv2h
        grad[m, 2] = (_density_at(raw_d, lo, sc, x, y, z + step)
                      - _density_at(raw_d, lo, sc, x, y, z - step)) * inv2h


@njit(cache=True, nogil=True)
def _backward_kernel(raw_d, raw_c, lo, sc, pts, step, use_sigma, use_color, use_grad,
                     d_sigma, d_color, d_grad, g_d, g_c):
    nx, ny, nz = raw_d.shape
    inv2h = 0.5 / step
    for m in range(pts.shape[0]):
        x = pts[m, 0]
        y = pts[m, 1]
        z = pts[m, 2]
        if use_sigma:
            _density_splat(raw_d, lo, sc, x, y, z, d_sigma[m], g_d)
        if use_color:
            inside, i, j, k, fx, fy, fz = _locate(x, y, z, lo, sc, nx, ny, nz)
            if inside:
                for c in range(3):
                    up = d_color[m, c]
                    if up == 0.0:
                        continue
                    r = _lerp3c(raw_c, i, j, k, fx, fy, fz, c)
                    if r <= -COLOR_CLAMP or r >= COLOR_CLAMP:
                        continue
                    s = _sigmoid(r)
                    _splat3c(g_c, i, j, k, fx, fy, fz, c, up * s * (1.0 - s))
        if use_grad:
            u = d_grad[m, 0] * inv2h
            _density_splat(raw_d, lo, sc, x + step, y, z, u, g_d)
            _density_splat(raw_d, lo, sc, x - step, y, z, -u, g_d)
            u = d_grad[m, 1] * inv2h
            _density_splat(raw_d, lo, sc, x, y + step, z, u, g_d)
            _density_splat(raw_d, lo, sc, x, y - step, z, -u, g_d)
            u = d_grad[m, 2] * inv2h
            _density_splat(raw_d, lo, sc, x, y, z + step, u, g_d)
            _density_splat(raw_d, lo, sc, x, y, z - step, -u, g_d)


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------


@dataclass
class VoxelGrid:
    """Trainable lattice of pre-activation density and color.

    ``raw_density`` has shape ``dims`` and ``raw_color`` has shape
    ``dims + (3,)``; both are float64 and indexed ``[x, y, z]``.
    """

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    raw_density: np.ndarray
    raw_color: np.ndarray

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        self.raw_density = np.ascontiguousarray(self.raw_density, dtype=np.float64)
        self.raw_color = np.ascontiguousarray(self.raw_color, dtype=np.float64)
        if self.raw_density.ndim != 3 or min(self.raw_density.shape) < 2:
            raise ValueError(f"raw_density must be 3-D with every side >= 2, got {self.raw_density.shape}")
        if self.raw_color.shape != self.raw_density.shape + (3,):
            raise ValueError(
                f"raw_color shape {self.raw_color.shape} does not match density {self.raw_density.shape}"
            )
        if not np.all(self.bbox_max > self.bbox_min):
            raise ValueError("bbox_max must exceed bbox_min on every axis")

    @classmethod
    def filled(cls, dims, bbox_min, bbox_max, density=-2.0, color=0.0) -> "VoxelGrid":
        dims = tuple(int(d) for d in dims)
        return cls(
            bbox_min,
            bbox_max,
            np.full(dims, float(density)),
            np.full(dims + (3,), float(color)),
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.raw_density.shape)

    @property
    def extent(self) -> np.ndarray:
        return self.bbox_max - self.bbox_min

    @property
    def lattice_scale(self) -> np.ndarray:
        """Lattice units per world unit along each axis."""
        return (np.asarray(self.dims) - 1) / self.extent

    @property
    def voxel_size(self) -> np.ndarray:
        return self.extent / (np.asarray(self.dims) - 1)

    @property
    def default_step(self) -> float:
        """Central-difference step used for normals: one (smallest) voxel edge."""
        return float(self.voxel_size.min())

    def node_positions(self) -> np.ndarray:
        axes = [np.linspace(self.bbox_min[a], self.bbox_max[a], self.dims[a]) for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.bbox_min.copy(), self.bbox_max.copy(),
                         self.raw_density.copy(), self.raw_color.copy())

    def apply(self, update: "ParamGradient", scale: float = 1.0) -> None:
        self.raw_density += scale * update.d_raw_density
        self.raw_color += scale * update.d_raw_color


@dataclass
class ParamGradient:
    """Gradient (or any update) shaped like a :class:`VoxelGrid`'s parameters."""

    d_raw_density: np.ndarray
    d_raw_color: np.ndarray

    @classmethod
    def zeros_like(cls, grid: VoxelGrid) -> "ParamGradient":
        return cls(np.zeros_like(grid.raw_density), np.zeros_like(grid.raw_color))

    def __add__(self, other: "ParamGradient") -> "ParamGradient":
        return ParamGradient(self.d_raw_density + other.d_raw_density,
                             self.d_raw_color + other.d_raw_color)

    def __iadd__(self, other: "ParamGradient") -> "ParamGradient":
        self.d_raw_density += other.d_raw_density
        self.d_raw_color += other.d_raw_color
        return self

    def __mul__(self, s: float) -> "ParamGradient":
        return ParamGradient(self.d_raw_density * s, self.d_raw_color * s)

    __rmul__ = __mul__

    def flat(self) -> np.ndarray:
        return np.concatenate([self.d_raw_density.ravel(), self.d_raw_color.ravel()])

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.d_raw_density ** 2) + np.sum(self.d_raw_color ** 2)))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.d_raw_density)) and np.all(np.isfinite(self.d_raw_color)))


# ---------------------------------------------------------------------------
# point queries
# ---------------------------------------------------------------------------


def _as_points(points):
    pts = np.ascontiguousarray(points, dtype=np.float64)
    single = pts.ndim == 1
    return pts.reshape(-1, 3), single


def _chunks(n, jobs):
    jobs = max(1, min(int(jobs), n)) if n else 1
    bounds = np.linspace(0, n, jobs + 1).astype(int)
    return [(bounds[i], bounds[i + 1]) for i in range(jobs)]


def sample_field(grid: VoxelGrid, points, *, color=True, gradient=False, step=None, jobs=1):
    """Evaluate density, optionally color and the density gradient, at ``points``.

    Returns ``(sigma, color, grad)``; entries that were not requested are
    ``None``.
    """
    pts, _ = _as_points(points)
    n = pts.shape[0]
    h = grid.default_step if step is None else float(step)
    if h <= 0:
        raise ValueError("gradient step must be positive")
    sigma = np.empty(n)
    col = np.empty((n, 3)) if color else np.empty((0, 3))
    grad = np.empty((n, 3)) if gradient else np.empty((0, 3))

    def run(lo_hi):
        a, b = lo_hi
        _forward_kernel(grid.raw_density, grid.raw_color, grid.bbox_min, grid.lattice_scale,
                        pts[a:b], h, color, gradient, sigma[a:b],
                        col[a:b] if color else col, grad[a:b] if gradient else grad)

    parts = _chunks(n, jobs)
    if len(parts) == 1:
        run(parts[0])
    else:
        with ThreadPoolExecutor(len(parts)) as pool:
            list(pool.map(run, parts))
    return sigma, (col if color else None), (grad if gradient else None)


def sample_density(grid: VoxelGrid, points):
    """Activated density at one point (returns a float) or an ``(M, 3)`` batch."""
    pts, single = _as_points(points)
    sigma, _, _ = sample_field(grid, pts, color=False)
    return float(sigma[0]) if single else sigma


def sample_color(grid: VoxelGrid, points):
    pts, single = _as_points(points)
    _, col, _ = sample_field(grid, pts, color=True)
    return col[0] if single else col


def density_gradient(grid: VoxelGrid, points, step=None):
    """Central-difference gradient of the activated density along the world axes."""
    pts, single = _as_points(points)
    _, _, g = sample_field(grid, pts, color=False, gradient=True, step=step)
    return g[0] if single else g


def normal_from_gradient(g, eps=DEFAULT_NORMAL_EPS):
    """``n = -g / sqrt(|g|^2 + eps^2)`` along the last axis."""
    g = np.asarray(g, dtype=np.float64)
    r = np.sqrt(np.sum(g * g, axis=-1, keepdims=True) + eps * eps)
    return -g / r


def normal_from_gradient_vjp(g, d_n, eps=DEFAULT_NORMAL_EPS):
    r = np.sqrt(np.sum(g * g, axis=-1, keepdims=True) + eps * eps)
    return -(d_n / r - g * (np.sum(g * d_n, axis=-1, keepdims=True) / r ** 3))


def normal(grid: VoxelGrid, points, step=None, eps=DEFAULT_NORMAL_EPS):
    if eps <= 0:
        raise ValueError("eps must be positive")
    return normal_from_gradient(density_gradient(grid, points, step), eps)


def field_vjp(grid: VoxelGrid, points, d_sigma=None, d_color=None, d_grad=None, *,
              step=None, out: ParamGradient | None = None, jobs=1) -> ParamGradient:
    """Pull per-point upstream gradients on (sigma, color, density gradient)
    back onto the raw lattices.

    With ``jobs > 1`` the points are split into contiguous chunks, each
    accumulated privately and merged in chunk order.
    """
    pts, _ = _as_points(points)
    n = pts.shape[0]
    h = grid.default_step if step is None else float(step)
    use_s, use_c, use_g = d_sigma is not None, d_color is not None, d_grad is not None
    ds = np.ascontiguousarray(d_sigma, dtype=np.float64).reshape(n) if use_s else np.empty(0)
    dc = np.ascontiguousarray(d_color, dtype=np.float64).reshape(n, 3) if use_c else np.empty((0, 3))
    dg = np.ascontiguousarray(d_grad, dtype=np.float64).reshape(n, 3) if use_g else np.empty((0, 3))
    acc = ParamGradient.zeros_like(grid) if out is None else out

    def run(lo_hi, target):
        a, b = lo_hi
        _backward_kernel(grid.raw_density, grid.raw_color, grid.bbox_min, grid.lattice_scale,
                         pts[a:b], h, use_s, use_c, use_g,
                         ds[a:b] if use_s else ds, dc[a:b] if use_c else dc,
                         dg[a:b] if use_g else dg,
                         target.d_raw_density, target.d_raw_color)
        return target

    parts = _chunks(n, jobs)
    if len(parts) == 1:
        run(parts[0], acc)
        return acc
    privates = [ParamGradient.zeros_like(grid) for _ in parts]
    with ThreadPoolExecutor(len(parts)) as pool:
        done = list(pool.map(run, parts, privates))
    for part in done:
        acc += part
    return acc


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


class GridFormatError(ValueError):
    pass


def save_grid(grid: VoxelGrid, path) -> None:
    """Write the VXG1 container: magic, dims (3 x uint32 LE), bbox (6 x f64 LE),
    density then per-node RGB color, both with x varying fastest."""
    nx, ny, nz = grid.dims
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<3I", nx, ny, nz))
        f.write(np.concatenate([grid.bbox_min, grid.bbox_max]).astype("<f8").tobytes())
        f.write(grid.raw_density.ravel(order="F").astype("<f8").tobytes())
        f.write(grid.raw_color.transpose(2, 1, 0, 3).ravel().astype("<f8").tobytes())


def load_grid(path) -> VoxelGrid:
    data = Path(path).read_bytes()
    magic = data[:4]
    if magic != MAGIC:
        raise GridFormatError(f"unsupported grid container: magic {magic!r}, expected {MAGIC!r}")
    nx, ny, nz = struct.unpack_from("<3I", data, 4)
    n = nx * ny * nz
    expected = 4 + 12 + 48 + 8 * n * 4
    if len(data) != expected:
        raise GridFormatError(f"grid file size {len(data)} does not match dims {(nx, ny, nz)}")
    bbox = np.frombuffer(data, "<f8", 6, 16)
    dens = np.frombuffer(data, "<f8", n, 64).reshape((nz, ny, nx)).transpose(2, 1, 0)
    col = np.frombuffer(data, "<f8", 3 * n, 64 + 8 * n).reshape((nz, ny, nx, 3)).transpose(2, 1, 0, 3)
    return VoxelGrid(bbox[:3].copy(), bbox[3:].copy(), dens.copy(), col.copy())
