import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from distill_lab.field import (
    GridFormatError,
    ParamGradient,
    VoxelGrid,
    density_gradient,
    field_vjp,
    load_grid,
    normal,
    normal_from_gradient,
    sample_color,
    sample_density,
    sample_field,
    save_grid,
)


def softplus(x):
    return np.log1p(np.exp(x))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def linear_grid(a, b, ca, cb, dims=(5, 6, 7)):
    """Grid whose raw lattices hold the affine functions a.p + b and ca.p + cb."""
    g = VoxelGrid.filled(dims, (-1, -1.5, -0.5), (1, 0.5, 2.0))
    nodes = g.node_positions()
    g.raw_density[:] = nodes @ np.asarray(a) + b
    g.raw_color[:] = nodes @ np.asarray(ca) + np.asarray(cb)
    return g


def test_node_values_are_activated_raw_values(rng):
    g = VoxelGrid((-1, -1, -1), (1, 1, 1), rng.normal(size=(4, 4, 4)), rng.normal(size=(4, 4, 4, 3)))
    nodes = g.node_positions().reshape(-1, 3)
    # nodes on the upper faces are included: the last cell is closed on the right
    np.testing.assert_allclose(sample_density(g, nodes), softplus(g.raw_density.ravel()), rtol=1e-13)
    np.testing.assert_allclose(sample_color(g, nodes), sigmoid(g.raw_color.reshape(-1, 3)), rtol=1e-13)


def test_trilinear_reproduces_affine_fields(rng):
    a, b = np.array([0.7, -1.2, 0.4]), 0.3
    ca = np.array([[0.2, -0.5, 1.0], [0.3, 0.1, -0.4], [-0.6, 0.8, 0.2]])
    cb = np.array([0.1, -0.2, 0.05])
    g = linear_grid(a, b, ca, cb)
    pts = rng.uniform(g.bbox_min, g.bbox_max, (200, 3))
    np.testing.assert_allclose(sample_density(g, pts), softplus(pts @ a + b), rtol=1e-12)
    np.testing.assert_allclose(sample_color(g, pts), sigmoid(pts @ ca + cb), rtol=1e-12)


def test_gradient_is_central_difference_of_the_density(rng):
    a, b = np.array([0.7, -1.2, 0.4]), 0.3
    g = linear_grid(a, b, np.zeros((3, 3)), np.zeros(3))
    h = g.default_step
    pts = rng.uniform(g.bbox_min + h, g.bbox_max - h, (50, 3))
    expected = np.stack([(softplus((pts + h * e) @ a + b) - softplus((pts - h * e) @ a + b)) / (2 * h)
                         for e in np.eye(3)], axis=1)
    np.testing.assert_allclose(density_gradient(g, pts), expected, rtol=1e-12)
    assert g.default_step == pytest.approx(min(2 / 4, 2 / 5, 2.5 / 6))


def test_outside_the_box_is_empty():
    g = VoxelGrid.filled((3, 3, 3), (0, 0, 0), (1, 1, 1), density=5.0, color=2.0)
    pts = np.array([[-0.01, 0.5, 0.5], [0.5, 1.01, 0.5], [2, 2, 2]])
    sigma, color, _ = sample_field(g, pts)
    assert np.all(sigma == 0.0) and np.all(color == 0.0)


def test_normal_formula(rng):
    g = VoxelGrid((-1, -1, -1), (1, 1, 1), rng.normal(size=(5, 5, 5)), np.zeros((5, 5, 5, 3)))
    pts = rng.uniform(-0.5, 0.5, (20, 3))
    grad = density_gradient(g, pts)
    eps = 1e-3
    expected = -grad / np.sqrt(np.sum(grad ** 2, axis=1, keepdims=True) + eps ** 2)
    np.testing.assert_allclose(normal(g, pts, eps=eps), expected, rtol=1e-14)
    assert np.all(np.linalg.norm(normal_from_gradient(grad, eps), axis=1) < 1.0)
    with pytest.raises(ValueError):
        normal(g, pts, eps=0.0)


def test_flat_density_has_zero_normal():
    g = VoxelGrid.filled((4, 4, 4), (-1, -1, -1), (1, 1, 1), density=1.0)
    assert np.all(normal(g, np.zeros((3, 3))) == 0.0)


@pytest.mark.parametrize("channel", ["d_sigma", "d_color", "d_grad"])
def test_field_vjp_matches_finite_differences(rng, channel):
    g = VoxelGrid((-1, -1, -1), (1, 1, 1), rng.normal(size=(4, 3, 5)), rng.normal(size=(4, 3, 5, 3)))
    pts = rng.uniform(-0.9, 0.9, (12, 3))
    up = rng.normal(size=12 if channel == "d_sigma" else (12, 3))

    def loss(grid):
        s, c, gr = sample_field(grid, pts, gradient=True)
        return np.sum({"d_sigma": s, "d_color": c, "d_grad": gr}[channel] * up)

    analytic = field_vjp(g, pts, **{channel: up}).flat()
    numeric = []
    h = 1e-6
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


def test_vjp_accumulates_into_given_buffer_and_jobs_agree(rng):
    g = VoxelGrid((-1, -1, -1), (1, 1, 1), rng.normal(size=(6, 6, 6)), rng.normal(size=(6, 6, 6, 3)))
    pts = rng.uniform(-1, 1, (500, 3))
    up = rng.normal(size=500)
    one = field_vjp(g, pts, d_sigma=up)
    many = field_vjp(g, pts, d_sigma=up, jobs=4)
    np.testing.assert_allclose(many.flat(), one.flat(), rtol=1e-12, atol=1e-14)
    again = field_vjp(g, pts, d_sigma=up, jobs=4)
    assert np.array_equal(many.flat(), again.flat())
    acc = ParamGradient.zeros_like(g)
    field_vjp(g, pts, d_sigma=up, out=acc)
    field_vjp(g, pts, d_sigma=up, out=acc)
    np.testing.assert_allclose(acc.flat(), 2 * one.flat(), rtol=1e-14)
    s1, _, _ = sample_field(g, pts)
    s4, _, _ = sample_field(g, pts, jobs=4)
    assert np.array_equal(s1, s4)


def test_grid_validation():
    with pytest.raises(ValueError):
        VoxelGrid((0, 0, 0), (1, 1, 1), np.zeros((1, 3, 3)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ValueError):
        VoxelGrid((0, 0, 0), (1, 1, 1), np.zeros((3, 3, 3)), np.zeros((3, 3, 3, 2)))
    with pytest.raises(ValueError):
        VoxelGrid((0, 0, 0), (1, 0, 1), np.zeros((3, 3, 3)), np.zeros((3, 3, 3, 3)))


def test_grid_file_roundtrip(tmp_path, rng):
    g = VoxelGrid((-1, -2, -3), (1, 2, 3.5), rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5, 3)))
    path = tmp_path / "g.vxg"
    save_grid(g, path)
    back = load_grid(path)
    assert np.array_equal(back.raw_density, g.raw_density)
    assert np.array_equal(back.raw_color, g.raw_color)
    assert np.array_equal(back.bbox_min, g.bbox_min) and np.array_equal(back.bbox_max, g.bbox_max)
    assert path.read_bytes()[:4] == b"VXG1"
    assert path.stat().st_size == 4 + 12 + 48 + 8 * 60 * 4


def test_grid_file_errors(tmp_path):
    bad = tmp_path / "bad.vxg"
    bad.write_bytes(b"NOPE" + bytes(100))
    with pytest.raises(GridFormatError, match="magic"):
        load_grid(bad)
    g = VoxelGrid.filled((2, 2, 2), (0, 0, 0), (1, 1, 1))
    path = tmp_path / "g.vxg"
    save_grid(g, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(GridFormatError, match="size"):
        load_grid(path)


@settings(max_examples=60, deadline=None)
@given(raw=arrays(np.float64, (3, 3, 3), elements=st.floats(-60, 60)),
       raw_c=arrays(np.float64, (3, 3, 3, 3), elements=st.floats(-80, 80)),
       pts=arrays(np.float64, (8, 3), elements=st.floats(-1.5, 1.5)))
def test_activations_stay_in_range(raw, raw_c, pts):
    g = VoxelGrid((-1, -1, -1), (1, 1, 1), raw, raw_c)
    sigma, color, grad = sample_field(g, pts, gradient=True)
    assert np.all(np.isfinite(sigma)) and np.all(sigma >= 0)
    assert np.all(np.isfinite(color)) and np.all((color >= 0) & (color <= 1))
    assert np.all(np.isfinite(grad))
