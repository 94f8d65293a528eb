"""Synthetic ground-truth scenes, posed datasets and their on-disk layout.

A scene is a list of solid primitives rasterized into a :class:`VoxelGrid` by
inverting the field activations. Primitives flagged ``removable`` are present
in the training images but absent from the target (evaluation) grid, so the
region they occupied has a known ground truth after removal.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .field import VoxelGrid, load_grid, save_grid
from .imageio import read_mask_png, read_pfm, write_mask_png, write_pfm
from .renderer import Camera, SamplingConfig, camera_rays, look_at, make_rays, render, segment_hits_box

RAW_DENSITY_FLOOR = -10.0
RAW_COLOR_LIMIT = 10.0


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


@dataclass
class Sphere:
    center: tuple
    radius: float
    color: tuple
    amplitude: float = 50.0
    removable: bool = False

    def signed_distance(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - np.asarray(self.center, dtype=np.float64), axis=-1) - self.radius

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius

    def to_dict(self) -> dict:
        return {"type": "sphere", "center": list(map(float, self.center)), "radius": float(self.radius),
                "color": list(map(float, self.color)), "amplitude": float(self.amplitude),
                "removable": bool(self.removable)}


@dataclass
class Box:
    min_corner: tuple
    max_corner: tuple
    color: tuple
    amplitude: float = 50.0
    removable: bool = False

    def signed_distance(self, p: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.min_corner, dtype=np.float64)
        hi = np.asarray(self.max_corner, dtype=np.float64)
        c, h = 0.5 * (lo + hi), 0.5 * (hi - lo)
        q = np.abs(p - c) - h
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def bounds(self):
        return np.asarray(self.min_corner, dtype=np.float64), np.asarray(self.max_corner, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"type": "box", "min": list(map(float, self.min_corner)), "max": list(map(float, self.max_corner)),
                "color": list(map(float, self.color)), "amplitude": float(self.amplitude),
                "removable": bool(self.removable)}


def primitive_from_dict(d: dict):
    kind = d.get("type")
    common = {"color": tuple(d["color"]), "amplitude": d.get("amplitude", 50.0),
              "removable": d.get("removable", False)}
    if kind == "sphere":
        return Sphere(tuple(d["center"]), d["radius"], **common)
    if kind == "box":
        return Box(tuple(d["min"]), tuple(d["max"]), **common)
    raise ValueError(f"unknown primitive type {kind!r}")


@dataclass
class SceneSpec:
    primitives: list
    dims: tuple = (32, 32, 32)
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    falloff_voxels: float = 1.5

    def validate(self) -> None:
        lo = np.asarray(self.bbox_min, dtype=np.float64)
        hi = np.asarray(self.bbox_max, dtype=np.float64)
        if not np.all(hi > lo):
            raise ValueError("scene bbox is empty")
        if self.falloff_voxels <= 0:
            raise ValueError("falloff width must be positive")
        for k, prim in enumerate(self.primitives):
            if not prim.amplitude > 0:
                raise ValueError(f"primitive {k}: density amplitude must be positive")
            p_lo, p_hi = prim.bounds()
            if np.any(p_lo < lo - 1e-12) or np.any(p_hi > hi + 1e-12):
                raise ValueError(f"primitive {k} extends outside the scene bbox")

    def to_dict(self) -> dict:
        return {"primitives": [p.to_dict() for p in self.primitives], "dims": list(self.dims),
                "bbox_min": list(self.bbox_min), "bbox_max": list(self.bbox_max),
                "falloff_voxels": self.falloff_voxels}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls([primitive_from_dict(p) for p in d["primitives"]],
                   tuple(d.get("dims", (32, 32, 32))),
                   tuple(d.get("bbox_min", (-1.0, -1.0, -1.0))),
                   tuple(d.get("bbox_max", (1.0, 1.0, 1.0))),
                   d.get("falloff_voxels", 1.5))


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def build_scene(spec: SceneSpec, include_removable: bool = True) -> VoxelGrid:
    """Rasterize the primitives onto the lattice nodes.

    Occupancy falls from 1 to 0 across a band of ``falloff_voxels`` voxel
    edges centred on each surface. Density is the max over primitives of
    ``amplitude * occupancy``; color is that of the primitive whose surface is
    nearest (so empty space next to a surface carries the surface color).
    """
    spec.validate()
    grid = VoxelGrid.filled(spec.dims, spec.bbox_min, spec.bbox_max, RAW_DENSITY_FLOOR, 0.0)
    prims = [p for p in spec.primitives if include_removable or not p.removable]
    if not prims:
        return grid
    nodes = grid.node_positions()
    width = spec.falloff_voxels * grid.default_step
    sigma = np.zeros(grid.dims)
    best = np.full(grid.dims, np.inf)
    color = np.full(grid.dims + (3,), 0.5)
    for prim in prims:
        sd = prim.signed_distance(nodes)
        occ = 1.0 - _smoothstep(sd / width + 0.5)
        sigma = np.maximum(sigma, prim.amplitude * occ)
        closer = sd < best
        best = np.where(closer, sd, best)
        color[closer] = np.asarray(prim.color, dtype=np.float64)
    floor = np.log1p(np.exp(RAW_DENSITY_FLOOR))
    raw = np.where(sigma > floor, softplus_inverse(np.maximum(sigma, floor)), RAW_DENSITY_FLOOR)
    c = np.clip(color, 1e-12, 1.0 - 1e-12)
    grid.raw_density = np.ascontiguousarray(raw)
    grid.raw_color = np.ascontiguousarray(np.clip(np.log(c) - np.log1p(-c), -RAW_COLOR_LIMIT, RAW_COLOR_LIMIT))
    return grid


# ---------------------------------------------------------------------------
# cameras and masks
# ---------------------------------------------------------------------------


@dataclass
class CameraRing:
    """Cameras on a horizontal arc looking at ``target`` (z is up).

    Azimuths are spread evenly over ``azimuth_span`` degrees centred on
    ``azimuth_center``; a span of 360 gives a closed ring.
    """

    count: int = 20
    radius: float = 3.0
    elevation: float = 20.0
    azimuth_center: float = 0.0
    azimuth_span: float = 120.0
    target: tuple = (0.0, 0.0, -0.3)
    width: int = 128
    height: int = 128
    fov: float = 45.0

    def validate(self) -> None:
        if self.count < 1:
            raise ValueError("camera ring needs at least one camera")
        if not self.radius > 0:
            raise ValueError("camera ring is degenerate: radius must be positive")
        if not 0 < self.fov < 180:
            raise ValueError("field of view must lie in (0, 180) degrees")

    def cameras(self) -> list[Camera]:
        self.validate()
        closed = self.azimuth_span >= 360.0
        half = 0.5 * self.azimuth_span
        if self.count == 1:
            az = np.array([self.azimuth_center])
        else:
            az = np.linspace(self.azimuth_center - half, self.azimuth_center + half, self.count,
                             endpoint=not closed)
        az = np.radians(az)
        el = np.radians(self.elevation)
        tgt = np.asarray(self.target, dtype=np.float64)
        fx = 0.5 * self.width / np.tan(0.5 * np.radians(self.fov))
        cams = []
        for a in az:
            eye = tgt + self.radius * np.array([np.cos(el) * np.cos(a), np.cos(el) * np.sin(a), np.sin(el)])
            cams.append(look_at(eye, tgt, fx=fx, width=self.width, height=self.height))
        return cams


def box_mask(camera: Camera, cfg: SamplingConfig, box_min, box_max) -> np.ndarray:
    """Pixels whose ``[near, far]`` ray segment meets the box."""
    rays = make_rays(camera, cfg.near, cfg.far)
    return segment_hits_box(rays, box_min, box_max).reshape(camera.height, camera.width)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


class DatasetError(ValueError):
    pass


@dataclass
class ViewSet:
    images: list
    depths: list
    normals: list


@dataclass
class SceneDataset:
    """Posed views with masks; ``target`` holds the object-free renders when known."""

    cameras: list
    images: list
    masks: list
    depths: list
    normals: list
    sampling: SamplingConfig
    target: ViewSet | None = None
    grid: VoxelGrid | None = dc_field(default=None, repr=False)
    target_grid: VoxelGrid | None = dc_field(default=None, repr=False)

    def __len__(self):
        return len(self.cameras)

    @property
    def width(self) -> int:
        return self.cameras[0].width

    @property
    def height(self) -> int:
        return self.cameras[0].height

    def masked_fraction(self) -> np.ndarray:
        return np.array([m.mean() for m in self.masks])

    def validate(self) -> None:
        if not self.cameras:
            raise DatasetError("dataset has no views")
        h, w = self.height, self.width
        for k, cam in enumerate(self.cameras):
            if (cam.height, cam.width) != (h, w):
                raise DatasetError(f"view {k}: resolution differs from view 0")
            chans = [("image", self.images[k], (h, w, 3)), ("mask", self.masks[k], (h, w)),
                     ("depth", self.depths[k], (h, w)), ("normal", self.normals[k], (h, w, 3))]
            if self.target is not None:
                chans += [("target image", self.target.images[k], (h, w, 3)),
                          ("target depth", self.target.depths[k], (h, w)),
                          ("target normal", self.target.normals[k], (h, w, 3))]
            for name, arr, shape in chans:
                if np.shape(arr) != shape:
                    raise DatasetError(f"view {k}: {name} shape mismatch, {np.shape(arr)} != {shape}")


def _sampling_to_dict(cfg: SamplingConfig) -> dict:
    return {"n_samples": cfg.n_samples, "stratified": cfg.stratified, "rng_seed": cfg.rng_seed,
            "near": cfg.near, "far": cfg.far, "clip_to_bbox": cfg.clip_to_bbox,
            "normal_step": cfg.normal_step, "normal_eps": cfg.normal_eps,
            "depth_normalize": cfg.depth_normalize}


def render_views(grid: VoxelGrid, cameras, cfg: SamplingConfig, jobs: int = 1) -> ViewSet:
    out = ViewSet([], [], [])
    for cam in cameras:
        r = render(grid, camera_rays(cam, cfg, grid), cfg, normals=True, keep_segments=False, jobs=jobs)
        out.images.append(r.color)
        out.depths.append(r.depth)
        out.normals.append(r.normal)
    return out


def generate_dataset(grid: VoxelGrid, ring: CameraRing, mask_box, cfg: SamplingConfig,
                     target_grid: VoxelGrid | None = None, jobs: int = 1) -> SceneDataset:
    """Render every ring view of ``grid``; the mask marks rays through ``mask_box``."""
    cams = ring.cameras()
    lo, hi = np.asarray(mask_box[0], dtype=np.float64), np.asarray(mask_box[1], dtype=np.float64)
    views = render_views(grid, cams, cfg, jobs)
    masks = [box_mask(c, cfg, lo, hi) for c in cams]
    target = None if target_grid is None else render_views(target_grid, cams, cfg, jobs)
    ds = SceneDataset(cams, views.images, masks, views.depths, views.normals, cfg, target, grid, target_grid)
    ds.validate()
    return ds


LAYOUT = {
    "images": "images", "depth": "depth", "normals": "normals",
    "target_images": "targets", "target_depth": "target_depth", "target_normals": "target_normals",
}


def save_dataset(ds: SceneDataset, directory) -> None:
    root = Path(directory)
    for sub in ("images", "masks", "depth", "normals"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for k in range(len(ds)):
        name = f"view_{k:03d}"
        write_pfm(root / "images" / f"{name}.pfm", ds.images[k])
        write_mask_png(root / "masks" / f"{name}.png", ds.masks[k])
        write_pfm(root / "depth" / f"{name}.pfm", ds.depths[k])
        write_pfm(root / "normals" / f"{name}.pfm", ds.normals[k])
    if ds.target is not None:
        for key, chans in (("target_images", ds.target.images), ("target_depth", ds.target.depths),
                           ("target_normals", ds.target.normals)):
            (root / LAYOUT[key]).mkdir(exist_ok=True)
            for k, arr in enumerate(chans):
                write_pfm(root / LAYOUT[key] / f"view_{k:03d}.pfm", arr)
    if ds.grid is not None:
        save_grid(ds.grid, root / "grid.vxg")
    if ds.target_grid is not None:
        save_grid(ds.target_grid, root / "target_grid.vxg")
    poses = {
        "width": ds.width,
        "height": ds.height,
        "render": _sampling_to_dict(ds.sampling),
        "has_target": ds.target is not None,
        "frames": [c.to_dict() for c in ds.cameras],
    }
    (root / "poses.json").write_text(json.dumps(poses, indent=2) + "\n")


def _read(path: Path, reader):
    if not path.exists():
        raise DatasetError(f"missing file {path}")
    try:
        return reader(path)
    except DatasetError:
        raise
    except ValueError as exc:
        raise DatasetError(str(exc)) from exc


def load_dataset(directory) -> SceneDataset:
    root = Path(directory)
    pose_path = root / "poses.json"
    if not pose_path.exists():
        raise DatasetError(f"poses not found: {pose_path}")
    try:
        poses = json.loads(pose_path.read_text())
        width, height = int(poses["width"]), int(poses["height"])
        frames = poses["frames"]
        cams = [Camera.from_dict(f, width, height) for f in frames]
        sampling = SamplingConfig(**poses.get("render", {}))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed poses file {pose_path}: {exc}") from exc
    for c in cams:
        c.validate()

    def channel(sub):
        return [_read(root / sub / f"view_{k:03d}.pfm", read_pfm) for k in range(len(cams))]

    masks = [_read(root / "masks" / f"view_{k:03d}.png", read_mask_png) for k in range(len(cams))]
    target = None
    if poses.get("has_target", False):
        target = ViewSet(channel(LAYOUT["target_images"]), channel(LAYOUT["target_depth"]),
                         channel(LAYOUT["target_normals"]))
    grid = load_grid(root / "grid.vxg") if (root / "grid.vxg").exists() else None
    tgrid = load_grid(root / "target_grid.vxg") if (root / "target_grid.vxg").exists() else None
    ds = SceneDataset(cams, channel("images"), masks, channel("depth"), channel("normals"),
                      sampling, target, grid, tgrid)
    ds.validate()
    return ds


def directory_checksums(directory) -> dict:
    """sha256 of every file under ``directory`` keyed by relative path."""
    root = Path(directory)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# canonical toy scene
# ---------------------------------------------------------------------------

FLOOR_A = (0.85, 0.8, 0.65)
FLOOR_B = (0.35, 0.45, 0.3)
WALL_A = (0.9, 0.9, 0.85)
WALL_B = (0.75, 0.55, 0.2)


def canonical_spec(dims=(32, 32, 32)) -> SceneSpec:
    """Checkered floor, two-tone back wall, a kept blue sphere and a removable
    red sphere resting on the floor inside :data:`CANONICAL_MASK_BOX`."""
    prims = []
    for i, (x0, x1) in enumerate(((-1.0, 0.0), (0.0, 1.0))):
        for j, (y0, y1) in enumerate(((-1.0, -0.35), (-0.35, 1.0))):
            prims.append(Box((x0, y0, -1.0), (x1, y1, -0.8), FLOOR_A if (i + j) % 2 == 0 else FLOOR_B))
    for j, (y0, y1) in enumerate(((-1.0, -0.6), (-0.6, -0.2), (-0.2, 0.2), (0.2, 0.6), (0.6, 1.0))):
        prims.append(Box((-1.0, y0, -0.8), (-0.8, y1, 1.0), WALL_A if j % 2 == 0 else WALL_B))
    prims.append(Sphere((0.0, 0.45, -0.48), 0.3, (0.15, 0.3, 0.85)))
    prims.append(Sphere((0.0, -0.35, -0.52), 0.28, (0.85, 0.15, 0.1), removable=True))
    return SceneSpec(prims, tuple(dims))


CANONICAL_MASK_BOX = ((-0.35, -0.7, -0.8), (0.35, 0.0, -0.15))


def canonical_ring(count=20, resolution=128) -> CameraRing:
    return CameraRing(count=count, radius=3.0, elevation=20.0, azimuth_center=0.0, azimuth_span=120.0,
                      target=(0.0, 0.0, -0.3), width=resolution, height=resolution, fov=45.0)


def canonical_sampling() -> SamplingConfig:
    return SamplingConfig(n_samples=64, near=1.0, far=5.0, clip_to_bbox=True)


def canonical_dataset(count=20, resolution=128, jobs=1, sampling: SamplingConfig | None = None) -> SceneDataset:
    spec = canonical_spec()
    return generate_dataset(build_scene(spec), canonical_ring(count, resolution), CANONICAL_MASK_BOX,
                            sampling or canonical_sampling(), target_grid=build_scene(spec, False), jobs=jobs)
