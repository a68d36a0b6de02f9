import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from sparsegs.core import Camera
from sparsegs.errors import DegenerateInput, DegenerateTrajectory, DimensionMismatch, LengthMismatch, TooFewCameras
from sparsegs.geometry import (
    ate,
    circle_interpolate,
    circumcircle,
    filter_points,
    interpolate_camera,
    nearest_cameras,
    normals_from_depth,
    patch_border_mask,
    plane_distance_from_depth,
    pseudo_cameras,
    umeyama,
    warp,
)
from sparsegs.scenes import simple_camera


# -- normals ---------------------------------------------------------------------------


def test_normals_flat_plane():
    cam = simple_camera(16, 14.0)
    n = normals_from_depth(np.full((16, 16), 5.0), cam)
    np.testing.assert_allclose(n, np.broadcast_to([0, 0, -1.0], n.shape), atol=1e-9)


def test_normals_ramp_matches_plane_oracle():
    # z = 5 + 0.01 x on rays x = z (u - cx) / fx  ->  z = 5 / (1 - 0.01 (u - cx) / fx)
    cam = simple_camera(21, 20.0)
    u, _ = cam.pixel_grid()
    depth = 5.0 / (1.0 - 0.01 * (u - cam.cx) / cam.fx)
    n = normals_from_depth(depth, cam)
    # the plane z - 0.01 x = 5 has gradient (-0.01, 0, 1); facing the camera flips it
    oracle = np.array([0.01, 0.0, -1.0]) / np.linalg.norm([0.01, 0.0, -1.0])
    np.testing.assert_allclose(n[1:-1, 1:-1], np.broadcast_to(oracle, n[1:-1, 1:-1].shape), atol=1e-3)


def test_normals_nan_and_shape():
    cam = simple_camera(6)
    assert np.all(normals_from_depth(np.full((6, 6), np.nan), cam) == 0)
    with pytest.raises(DimensionMismatch):
        normals_from_depth(np.ones((5, 6)), cam)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_normals_unit_or_zero(seed):
    rng = np.random.default_rng(seed)
    cam = simple_camera(10, 9.0)
    depth = rng.uniform(1, 8, (10, 10))
    depth[rng.uniform(size=depth.shape) < 0.2] = np.nan
    length = np.linalg.norm(normals_from_depth(depth, cam), axis=2)
    assert np.all((length == 0) | (np.abs(length - 1) < 1e-12))


def test_plane_distance_from_depth():
    cam = simple_camera(21, 20.0)
    np.testing.assert_allclose(plane_distance_from_depth(np.full((21, 21), 5.0), cam), 5.0, atol=1e-12)
    # the plane z - 0.01 x = 5 lies 5 / |(-0.01, 0, 1)| from the origin
    u, _ = cam.pixel_grid()
    depth = 5.0 / (1.0 - 0.01 * (u - cam.cx) / cam.fx)
    d = plane_distance_from_depth(depth, cam)
    np.testing.assert_allclose(d, 5.0 / np.sqrt(1.0001), rtol=1e-9)
    depth[3, 4] = np.nan
    d = plane_distance_from_depth(depth, cam)
    assert np.isnan(d[3, 4]) and np.isnan(d[2, 4]) and np.isfinite(d[10, 10])


# -- masks and filtering -------------------------------------------------------------------


@pytest.mark.parametrize("w,h,masked", [(28, 28, 208), (14, 14, 52), (5, 5, 16)])
def test_mask_examples(w, h, masked):
    m = patch_border_mask(w, h, 14)
    assert m.shape == (h, w)
    assert int((~m).sum()) == masked


def test_filter_points_inclusive():
    pts = np.arange(9.0).reshape(3, 3)
    kept = filter_points(pts, [0.1, 0.2, 0.9], 0.2)
    np.testing.assert_array_equal(kept, pts[1:])
    assert len(filter_points(pts, [0.0, 0.0, 0.0], 0.0)) == 3
    with pytest.raises(LengthMismatch):
        filter_points(pts, [0.5], 0.2)


def test_filter_points_count_oracle(rng):
    conf = rng.uniform(size=1000)
    pts = rng.normal(size=(1000, 3))
    count = 0
    for c in conf:
        if c >= 0.2:
            count += 1
    assert len(filter_points(pts, conf)) == count


# -- warping -----------------------------------------------------------------------------


def test_warp_zero_confidence():
    cam = simple_camera(8)
    img = np.ones((8, 8, 3))
    _, mask = warp(img, np.full((8, 8), 3.0), np.zeros((8, 8)), cam, cam)
    assert not mask.any()


def _warp_oracle(img, depth, conf, src, dst, thr):
    out = np.zeros((dst.height, dst.width) + img.shape[2:])
    best = np.full((dst.height, dst.width), np.inf)
    for v in range(src.height):
        for u in range(src.width):
            z = depth[v, u]
            if not np.isfinite(z) or conf[v, u] < thr:
                continue
            x = np.array([(u - src.cx) / src.fx * z, (v - src.cy) / src.fy * z, z])
            w = src.R @ x + src.center
            c = dst.R.T @ (w - dst.center)
            if c[2] <= dst.near:
                continue
            du = int(np.floor(dst.fx * c[0] / c[2] + dst.cx + 0.5))
            dv = int(np.floor(dst.fy * c[1] / c[2] + dst.cy + 0.5))
            if 0 <= du < dst.width and 0 <= dv < dst.height and c[2] < best[dv, du]:
                best[dv, du] = c[2]
                out[dv, du] = img[v, u]
    return out, np.isfinite(best)


def test_warp_zbuffer_matches_oracle(rng):
    src = simple_camera(14, 13.0)
    dst = Camera(9, 9, 6.0, 6.0, 4.0, 4.0, Rotation.from_euler("y", 4, degrees=True).as_matrix(), [0.2, 0.0, -0.1])
    img = rng.uniform(size=(14, 14, 3))
    depth = rng.uniform(2, 6, (14, 14))
    depth[rng.uniform(size=depth.shape) < 0.1] = np.nan
    conf = rng.uniform(size=(14, 14))
    out, mask = warp(img, depth, conf, src, dst, 0.2)
    ref, ref_mask = _warp_oracle(img, depth, conf, src, dst, 0.2)
    np.testing.assert_array_equal(mask, ref_mask)
    np.testing.assert_array_equal(out, ref)
    with pytest.raises(DimensionMismatch):
        warp(img[:-1], depth, conf, src, dst)


def test_warp_is_idempotent_under_identity(rng):
    cam = simple_camera(12)
    img = rng.uniform(size=(12, 12, 3))
    depth = rng.uniform(1, 4, (12, 12))
    conf = rng.uniform(size=(12, 12))
    out, mask = warp(img, depth, conf, cam, cam)
    again, mask2 = warp(out, np.where(mask, depth, np.nan), np.where(mask, 1.0, 0.0), cam, cam)
    np.testing.assert_array_equal(mask, mask2)
    np.testing.assert_array_equal(out[mask], again[mask2])


# -- circle interpolation ----------------------------------------------------------------


def test_circle_unit_examples():
    p = circle_interpolate([1, 0, 0], [0, 1, 0], [-1, 0, 0], 0.5)
    np.testing.assert_allclose(p, [np.sqrt(0.5), np.sqrt(0.5), 0], atol=1e-9)
    np.testing.assert_allclose(circle_interpolate([0, 0, 0], [1, 0, 0], [2, 0, 0], 0.5), [0.5, 0, 0])
    with pytest.raises(DegenerateInput):
        circle_interpolate([0, 0, 0], [0, 0, 0], [1, 0, 0], 0.5)


def test_circle_minor_arc():
    # third point on the major arc: the interpolant still takes the minor arc
    a, b = np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    c = np.array([-1.0, 0, 0])
    mid = circle_interpolate(a, b, c, 0.5)
    assert mid[0] > 0 and mid[1] > 0
    center, r, _ = circumcircle(a, b, c)
    np.testing.assert_allclose(center, 0, atol=1e-12)
    assert r == pytest.approx(1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 1))
def test_circle_points_stay_on_circle(seed, t):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(0, 2, (3, 3))
    area = np.linalg.norm(np.cross(b - a, c - a))
    if area < 1e-2:
        return
    center, r, _ = circumcircle(a, b, c)
    p = circle_interpolate(a, b, c, t)
    assert abs(np.linalg.norm(p - center) - r) < 1e-9 * max(1.0, r)


def test_interpolate_camera_endpoints():
    cams = [simple_camera(8, R=Rotation.from_euler("y", d, degrees=True).as_matrix(), center=[d / 10, 0, 0])
            for d in (-10, 0, 10)]
    assert interpolate_camera(cams[0], cams[1], cams[2].center, 0.0) is cams[0]
    end = interpolate_camera(cams[0], cams[1], cams[2].center, 1.0)
    np.testing.assert_array_equal(end.center, cams[1].center)
    np.testing.assert_array_equal(end.R, cams[1].R)


# -- pseudo cameras ----------------------------------------------------------------------


def _ring(n, radius=3.0):
    cams = []
    for k in range(n):
        th = 2 * np.pi * k / n + 0.1 * k
        cams.append(simple_camera(8, center=[radius * np.cos(th), 0.0, radius * np.sin(th)]))
    return cams


def test_pseudo_camera_count_and_circle():
    cams = _ring(3)
    out = pseudo_cameras(cams, 2)
    assert len(out) == 12
    for c in out:
        assert abs(np.linalg.norm(c.center) - 3.0) < 1e-9
        np.testing.assert_allclose(c.R, np.eye(3), atol=1e-12)
    with pytest.raises(TooFewCameras):
        pseudo_cameras(cams[:2])


def test_pseudo_camera_dedup():
    cams = _ring(3)
    assert len(pseudo_cameras(cams, 2, deduplicate=True)) <= 12


def test_nearest_cameras_tie_by_index():
    cams = [simple_camera(4, center=c) for c in ([0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 2, 0])]
    assert nearest_cameras(cams, 0, 2) == [1, 2]


# -- ATE ---------------------------------------------------------------------------------


def test_ate_identity_and_errors():
    gt = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.5]], float)
    assert ate(gt, gt) == pytest.approx((0.0, 0.0), abs=1e-12)
    with pytest.raises(LengthMismatch):
        ate(gt[:2], gt[:2])
    with pytest.raises(LengthMismatch):
        ate(gt, gt[:3])
    with pytest.raises(DegenerateTrajectory):
        ate(gt, np.zeros((4, 3)))


def test_ate_square_oracle():
    from scipy.optimize import minimize

    gt = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    est = gt.copy()
    est[2] += [0.1, 0.05, 0.0]
    mean, rmse = ate(est, gt)

    def cost(x):
        R = Rotation.from_rotvec(x[:3]).as_matrix()
        return np.sum((np.exp(x[3]) * est @ R.T + x[4:] - gt) ** 2)

    best = minimize(cost, np.zeros(7), method="BFGS", options={"gtol": 1e-12})
    assert rmse == pytest.approx(np.sqrt(best.fun / 4), abs=1e-6)
    assert mean <= rmse + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_ate_similarity_invariance(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(12, 3))
    est = gt + rng.normal(0, 0.05, gt.shape)
    base = ate(est, gt)
    R = Rotation.random(random_state=rng).as_matrix()
    moved = rng.uniform(0.5, 2) * est @ R.T + rng.normal(size=3)
    assert np.allclose(ate(moved, gt), base, atol=1e-9)


def test_umeyama_recovers_transform(rng):
    src = rng.normal(size=(20, 3))
    R = Rotation.random(random_state=3).as_matrix()
    s, Rr, t = umeyama(src, 2.0 * src @ R.T + [1, 2, 3])
    assert s == pytest.approx(2.0)
    np.testing.assert_allclose(Rr, R, atol=1e-12)
    np.testing.assert_allclose(t, [1, 2, 3], atol=1e-12)
