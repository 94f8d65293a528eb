import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from distill_lab.field import VoxelGrid
from distill_lab.renderer import (
    Camera,
    Rays,
    SamplingConfig,
    camera_rays,
    clip_rays,
    composite_weights,
    decode_normals,
    encode_normals,
    look_at,
    make_rays,
    ray_box_interval,
    render,
    render_vjp,
    rescale_camera,
    resample_nearest,
    sample_depths,
)


def axis_rays(n=1, near=0.5, far=1.5):
    o = np.tile([[-1.0, 0.1, 0.2]], (n, 1))
    d = np.tile([[1.0, 0.0, 0.0]], (n, 1))
    return Rays(o, d, near, far)


def test_uniform_medium_matches_closed_form():
    raw, raw_c = 0.4, 0.3
    sigma = np.log1p(np.exp(raw))
    c = 1 / (1 + np.exp(-raw_c))
    g = VoxelGrid.filled((4, 4, 4), (-1, -1, -1), (1, 1, 1), density=raw, color=raw_c)
    near, far, n = 0.5, 1.5, 16
    out = render(g, axis_rays(near=near, far=far), SamplingConfig(n_samples=n), normals=False)
    length = far - near
    np.testing.assert_allclose(out.color[0], c * (1 - np.exp(-sigma * length)), rtol=1e-13)
    np.testing.assert_allclose(out.opacity[0], 1 - np.exp(-sigma * length), rtol=1e-13)
    d = length / n
    q = np.exp(-sigma * d)
    mids = near + (np.arange(n) + 0.5) * d
    np.testing.assert_allclose(out.depth[0], np.sum(q ** np.arange(n) * (1 - q) * mids), rtol=1e-13)


def test_sample_positions_are_interval_midpoints():
    t, delta = sample_depths(axis_rays(near=1.0, far=3.0), SamplingConfig(n_samples=4))
    np.testing.assert_allclose(t[0], [1.25, 1.75, 2.25, 2.75])
    np.testing.assert_allclose(delta[0], 0.5)
    ts, _ = sample_depths(axis_rays(3, 1.0, 3.0), SamplingConfig(n_samples=4, stratified=True), seed=5)
    assert np.all((ts >= 1.0) & (ts <= 3.0)) and np.all(np.diff(ts, axis=1) > 0)
    again, _ = sample_depths(axis_rays(3, 1.0, 3.0), SamplingConfig(n_samples=4, stratified=True), seed=5)
    assert np.array_equal(ts, again)


def test_empty_field_renders_black():
    g = VoxelGrid.filled((3, 3, 3), (-1, -1, -1), (1, 1, 1), density=-200.0)
    out = render(g, axis_rays(2), SamplingConfig(n_samples=8))
    assert np.all(out.color < 1e-80) and np.all(out.opacity < 1e-80)
    assert np.all(np.isfinite(out.normal))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (5, 12), elements=st.floats(0, 1e4)),
       arrays(np.float64, (5, 1), elements=st.floats(1e-4, 2.0)))
def test_compositing_invariants(sigma, delta):
    w, trans, _ = composite_weights(sigma, delta)
    assert np.all(np.isfinite(w)) and np.all(w >= 0)
    total = w.sum(axis=1)
    assert np.all(total <= 1 + 1e-12)
    assert np.all(np.diff(trans, axis=1) <= 0)
    np.testing.assert_allclose(total, -np.expm1(-np.sum(sigma * delta, axis=1)), atol=1e-12)


def test_camera_roundtrip_and_validation():
    cam = look_at([3, 1, 1], [0, 0, 0], fx=50, width=9, height=7)
    back = Camera.from_dict(cam.to_dict(), 9, 7)
    np.testing.assert_allclose(back.rotation, cam.rotation)
    np.testing.assert_allclose(back.translation, cam.translation)
    assert len(cam.to_dict()["camera_to_world"]) == 12
    rays = make_rays(cam, 0.1, 10)
    center = rays.directions.reshape(7, 9, 3)[3, 4]
    np.testing.assert_allclose(center, -np.array([3, 1, 1]) / np.sqrt(11), atol=1e-12)
    bad = Camera(np.diag([1, 1, 2.0]), np.zeros(3), 10, 10, 1, 1, 3, 3)
    with pytest.raises(ValueError, match="orthonormal"):
        bad.validate()
    with pytest.raises(ValueError):
        Camera.from_dict({"camera_to_world": [0] * 9, "fx": 1, "fy": 1, "cx": 0, "cy": 0}, 2, 2)
    with pytest.raises(ValueError, match="parallel"):
        look_at([0, 0, 3], [0, 0, 0], fx=1, width=2, height=2)


def test_rescale_preserves_aspect_and_view():
    cam = look_at([3, 0, 1], [0, 0, 0], fx=100, width=128, height=96)
    small = rescale_camera(cam, 64)
    assert (small.width, small.height) == (64, 48)
    assert small.fx == pytest.approx(50)
    # the image centre keeps looking along the same direction
    big = make_rays(cam, 0.1, 1).directions.reshape(96, 128, 3)
    sm = make_rays(small, 0.1, 1).directions.reshape(48, 64, 3)
    np.testing.assert_allclose(big[47:49, 63:65].mean(axis=(0, 1)), sm[23:25, 31:33].mean(axis=(0, 1)),
                               atol=1e-3)
    img = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(resample_nearest(img, 2, 2), [[5, 7], [13, 15]])


def test_ray_box_interval():
    rays = Rays([[-2, 0, 0], [-2, 2, 0], [0, 0, 0]], [[1, 0, 0], [1, 0, 0], [0, 0, 1]], 0, 10)
    t_in, t_out, hit = ray_box_interval(rays, (-1, -1, -1), (1, 1, 1))
    assert list(hit) == [True, False, True]
    np.testing.assert_allclose([t_in[0], t_out[0]], [1, 3])
    np.testing.assert_allclose([t_in[2], t_out[2]], [-1, 1])
    clipped = clip_rays(rays, (-1, -1, -1), (1, 1, 1))
    np.testing.assert_allclose(clipped.near, [1, 0, 0])
    np.testing.assert_allclose(clipped.far, [3, 10, 1])


def test_clipped_samples_stay_inside_the_box():
    g = VoxelGrid.filled((3, 3, 3), (-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    cam = look_at([2, 0.3, 0.4], [0, 0, 0], fx=4, width=6, height=6)
    cfg = SamplingConfig(n_samples=8, near=0.5, far=5, clip_to_bbox=True)
    rays = camera_rays(cam, cfg, g)
    out = render(g, rays, cfg)
    hit = ray_box_interval(rays, g.bbox_min, g.bbox_max)[2]
    pts = out.segments.points.reshape(36, 8, 3)[hit]
    assert np.all(np.abs(pts) <= 0.5 + 1e-12)
    with pytest.raises(ValueError):
        camera_rays(cam, cfg)


def test_render_vjp_matches_finite_differences(rng):
    g = VoxelGrid((-1, -1, -1), (1, 1, 1), rng.normal(0, 1.5, (4, 4, 3)), rng.normal(0, 1.5, (4, 4, 3, 3)))
    cam = look_at([2.5, 1.0, 0.8], [0, 0, 0], fx=4, width=3, height=3)
    rays = make_rays(cam, 1.0, 4.5)
    cfg = SamplingConfig(n_samples=10, stratified=True, normal_eps=1e-3)
    out = render(g, rays, cfg, seed=3)
    uc, ud, un = rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3, 3))
    analytic = render_vjp(g, out, d_color=uc, d_depth=ud, d_normal=un).flat()

    def loss(grid):
        o = render(grid, rays, cfg, seed=3)
        return np.sum(o.color * uc) + np.sum(o.depth * ud) + np.sum(o.normal * un)

    numeric, h = [], 1e-6
    for arr in (g.raw_density, g.raw_color):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss(g)
            flat[i] = old - h
            lm = loss(g)
            flat[i] = old
            numeric.append((lp - lm) / (2 * h))
    numeric = np.array(numeric)
    assert np.max(np.abs(analytic - numeric)) / np.max(np.abs(numeric)) < 1e-6


def test_render_vjp_zero_upstream_and_jobs(rng):
    g = VoxelGrid((-1, -1, -1), (1, 1, 1), rng.normal(size=(5, 5, 5)), rng.normal(size=(5, 5, 5, 3)))
    cam = look_at([2.5, 1.0, 0.8], [0, 0, 0], fx=10, width=12, height=12)
    rays = make_rays(cam, 1.0, 4.5)
    out = render(g, rays, SamplingConfig(n_samples=16))
    assert not render_vjp(g, out, d_color=np.zeros((12, 12, 3))).flat().any()
    par = render(g, rays, SamplingConfig(n_samples=16), jobs=3)
    assert np.array_equal(par.color, out.color) and np.array_equal(par.normal, out.normal)
    up = rng.normal(size=(12, 12, 3))
    np.testing.assert_allclose(render_vjp(g, par, d_color=up, jobs=3).flat(),
                               render_vjp(g, out, d_color=up).flat(), rtol=1e-11, atol=1e-14)
    nos = render(g, rays, SamplingConfig(n_samples=16), keep_segments=False)
    with pytest.raises(RuntimeError):
        render_vjp(g, nos, d_color=up)


def test_normal_encoding_roundtrip(rng):
    n = rng.uniform(-1, 1, (4, 4, 3))
    np.testing.assert_allclose(decode_normals(encode_normals(n)), n)
    assert np.all((encode_normals(n) >= 0) & (encode_normals(n) <= 1))


def test_sampling_config_validation():
    with pytest.raises(ValueError):
        SamplingConfig(n_samples=1)
    with pytest.raises(ValueError):
        SamplingConfig(near=2, far=1)
    with pytest.raises(ValueError):
        SamplingConfig(normal_eps=0)
