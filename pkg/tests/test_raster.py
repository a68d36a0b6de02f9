import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsegs.core import Camera, GaussianCloud
from sparsegs.raster import (
    ALPHA_MAX,
    RenderGrads,
    project,
    render,
    render_backward,
    render_bruteforce,
)
from sparsegs.scenes import random_cloud, simple_camera
from sparsegs.sh import rgb_to_dc


def flat_gaussians(means, colors, opacity, scales=(0.5, 0.5, 1e-3)):
    means = np.atleast_2d(np.asarray(means, float))
    n = len(means)
    p = np.broadcast_to(np.asarray(opacity, float), (n,))
    return GaussianCloud(
        means,
        np.tile([1.0, 0, 0, 0], (n, 1)),
        np.tile(np.log(scales), (n, 1)),
        np.log(p) - np.log1p(-p),
        rgb_to_dc(np.atleast_2d(np.asarray(colors, float)))[:, None, :],
    )


def test_project_on_axis():
    cam = Camera(101, 101, 100, 100, 50, 50)
    cloud = GaussianCloud([[0, 0, 5]], [[1, 0, 0, 0]], [[0, 0, 0]], [0.0], np.zeros((1, 1, 3)))
    (g,) = project(cloud, cam).gaussians()
    np.testing.assert_allclose(g.mean2d, [50, 50])
    assert g.depth == 5
    # oracle: J W Sigma W^T J^T with W = I, Sigma = I, evaluated with explicit products
    J = np.array([[100 / 5, 0, -100 * 0 / 25], [0, 100 / 5, 0]])
    np.testing.assert_allclose(g.cov2d, J @ np.eye(3) @ J.T, atol=1e-9)
    np.testing.assert_allclose(g.cov2d, 400 * np.eye(2), atol=1e-9)


def test_project_culls_near():
    cam = Camera(10, 10, 10, 10, 5, 5, near=0.5)
    cloud = GaussianCloud([[0, 0, 0.4], [0, 0, 3]], np.tile([1.0, 0, 0, 0], (2, 1)), np.zeros((2, 3)),
                          [0.0, 0.0], np.zeros((2, 1, 3)))
    assert project(cloud, cam).index.tolist() == [1]


def test_empty_cloud_renders_background():
    cam = simple_camera(8)
    bg = (0.1, 0.2, 0.3)
    out = render(GaussianCloud.empty(), cam, bg)
    assert np.all(out.color == np.array(bg))
    assert np.all(out.alpha == 0)
    assert np.all(np.isnan(out.depth_plane)) and np.all(np.isnan(out.depth_accum))
    ref = render_bruteforce(GaussianCloud.empty(), cam, bg)
    np.testing.assert_array_equal(ref.color, out.color)


def test_single_plane_distance():
    cam = simple_camera(9, 20.0)
    cloud = flat_gaussians([[0, 0, 5]], [[0.5, 0.5, 0.5]], 0.999, scales=(2.0, 2.0, 1e-4))
    out = render(cloud, cam)
    c = 4
    assert out.alpha[c, c] == pytest.approx(ALPHA_MAX)
    assert out.depth_plane[c, c] / out.alpha[c, c] == pytest.approx(5.0, abs=1e-6)
    # single contributor: D = d * alpha exactly
    assert out.depth_plane[c, c] == 5.0 * out.alpha[c, c]


def test_two_layer_blend():
    cam = simple_camera(9, 20.0)
    bg = np.array([0.0, 1.0, 0.0])
    big = (50.0, 50.0, 1e-3)
    front = flat_gaussians([[0, 0, 4]], [[1, 0, 0]], 0.5, big)
    back = flat_gaussians([[0, 0, 6]], [[0, 0, 1]], 0.5, big)
    # blue listed first so the depth sort, not the index, decides the order
    cloud = GaussianCloud.concat([back, front])
    out = render(cloud, cam, bg)
    c = 4
    a = out.contributors.pixel(c, c)
    assert [g for g, _, _ in a] == [1, 0]
    a1, a2 = a[0][1], a[1][1]
    expected = a1 * np.array([1, 0, 0]) + (1 - a1) * a2 * np.array([0, 0, 1]) + (1 - a1) * (1 - a2) * bg
    np.testing.assert_allclose(out.color[c, c], expected, atol=1e-12)
    np.testing.assert_allclose(out.color[c, c], [0.5, 0.25, 0.25], atol=1e-4)


def test_depth_tie_breaks_by_index():
    cam = simple_camera(5, 10.0)
    big = (20.0, 20.0, 1e-3)
    cloud = GaussianCloud.concat([flat_gaussians([[0, 0, 5]], [[1, 0, 0]], 0.5, big),
                                  flat_gaussians([[0, 0, 5]], [[0, 0, 1]], 0.5, big)])
    out = render(cloud, cam)
    assert [g for g, _, _ in out.contributors.pixel(2, 2)] == [0, 1]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_compositing_invariants(seed, n):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, n, sh_degree=int(rng.integers(0, 4)), opacity_range=(0.05, 0.999))
    cam = simple_camera(16, 15.0)
    out = render(cloud, cam, early_stop=False)
    con = out.contributors
    assert np.all((out.alpha >= 0) & (out.alpha <= 1 + 1e-12))
    np.testing.assert_allclose(out.alpha.ravel() + con.T_final, 1.0, atol=1e-12)
    # telescoping transmittance
    for p in rng.integers(0, 16 * 16, 10):
        T = 1.0
        for k in range(con.count[p]):
            assert con.T[p, k] == T
            T = T * (1.0 - con.alpha[p, k])
        assert con.T_final[p] == T
    assert np.all(np.linalg.norm(out.normals, axis=2) <= out.alpha + 1e-9)
    # ascending depth per pixel
    z = np.full(len(cloud), np.nan)
    proj = project(cloud, cam)
    z[proj.index] = proj.depth
    for p in range(16 * 16):
        gids = con.gid[p, : con.count[p]]
        assert np.all(np.diff(z[gids]) >= 0)


def test_thread_count_does_not_change_output():
    rng = np.random.default_rng(11)
    cloud = random_cloud(rng, 40, sh_degree=2, opacity_range=(0.3, 0.99))
    cam = simple_camera(30, 28.0)
    ref = render(cloud, cam, (0.2, 0.1, 0.3), threads=1)
    for threads in (2, 3, 8):
        out = render(cloud, cam, (0.2, 0.1, 0.3), threads=threads)
        for f in ("color", "depth_plane", "depth_accum", "normals", "alpha"):
            assert getattr(out, f).tobytes() == getattr(ref, f).tobytes()


def test_early_stop_bounded_difference():
    cam = simple_camera(9, 20.0)
    big = (30.0, 30.0, 1e-3)
    stack = GaussianCloud.concat([flat_gaussians([[0, 0, 4 + 0.1 * i]], [[0.1 * i, 0.5, 1 - 0.1 * i]], 0.99, big)
                                  for i in range(6)])
    on = render(stack, cam)
    ref = render_bruteforce(stack, cam)
    assert on.contributors.count.max() < 6
    assert np.abs(on.color - ref.color).max() < 1e-3


def test_backward_zero_upstream(small_cloud, cam32):
    out = render(small_cloud, cam32)
    grads = render_backward(small_cloud, cam32, out, RenderGrads(color=np.zeros_like(out.color)))
    assert all(np.all(g == 0) for g in grads.values())


def test_backward_color_weights():
    # d colour / d c_i = alpha_i T_i: with unit upstream on channel 0, the DC
    # gradient is Y00 times the summed blend weights
    cam = simple_camera(12, 12.0)
    cloud = flat_gaussians([[0.1, -0.2, 5]], [[0.3, 0.4, 0.5]], 0.7, scales=(0.4, 0.3, 1e-3))
    out = render(cloud, cam)
    up = np.zeros_like(out.color)
    up[..., 0] = 1.0
    g = render_backward(cloud, cam, out, RenderGrads(color=up))
    con = out.contributors
    weights = (con.alpha * con.T)[con.gid == 0].sum()
    assert g["sh"][0, 0, 0] == pytest.approx(0.28209479177387814 * weights, rel=1e-12)
    assert g["sh"][0, 0, 1] == 0.0


def test_backward_matches_finite_differences():
    from sparsegs.optim import gradcheck, photometric_objective

    rng = np.random.default_rng(21)
    cloud = random_cloud(rng, 6, sh_degree=2)
    cam = simple_camera(20, 19.0)
    gt = rng.uniform(0, 1, (20, 20, 3))
    report = gradcheck(cloud, cam, photometric_objective(gt))
    assert report.passed, report.max_rel_error


def test_backward_without_cache_matches(small_cloud, cam32):
    import dataclasses

    out = render(small_cloud, cam32)
    up = RenderGrads(color=np.ones_like(out.color), depth_plane=np.ones_like(out.alpha))
    a = render_backward(small_cloud, cam32, out, up)
    b = render_backward(small_cloud, cam32, dataclasses.replace(out, cache=None), up)
    for k in a:
        np.testing.assert_allclose(a[k], b[k], rtol=1e-12, atol=1e-15)
