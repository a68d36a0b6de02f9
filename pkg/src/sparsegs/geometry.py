"""Depth-map geometry: normals, patch masks, warping, camera interpolation, ATE."""
from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .core import Camera
from .errors import (
    DegenerateInput,
    DegenerateTrajectory,
    DimensionMismatch,
    LengthMismatch,
    TooFewCameras,
)

COLLINEAR_RATIO = 1e6
COINCIDENT_TOL = 1e-12


def _check_shape(arr: np.ndarray, cam: Camera, what: str):
    if arr.shape[:2] != (cam.height, cam.width):
        raise DimensionMismatch(f"{what} has shape {arr.shape[:2]}, camera expects {(cam.height, cam.width)}")


def normals_from_depth(depth: np.ndarray, cam: Camera) -> np.ndarray:
    """Camera-frame unit normals of a z-depth map, facing the camera.

    Uses forward differences of the unprojected points (backward at the last
    row/column). Pixels touching a NaN depth get a zero normal.
    """
    depth = np.asarray(depth, dtype=np.float64)
    _check_shape(depth, cam, "depth")
    H, W = depth.shape
    pts = cam.unproject_depth(depth)
    normals = np.zeros((H, W, 3))
    if H < 2 or W < 2:
        return normals

    ddx = np.empty_like(pts)
    ddx[:, :-1] = pts[:, 1:] - pts[:, :-1]
    ddx[:, -1] = pts[:, -1] - pts[:, -2]
    ddy = np.empty_like(pts)
    ddy[:-1] = pts[1:] - pts[:-1]
    ddy[-1] = pts[-1] - pts[-2]
    n = np.cross(ddx, ddy)
    n = np.where(np.sum(n * pts, axis=-1, keepdims=True) > 0, -n, n)
    length = np.linalg.norm(n, axis=-1, keepdims=True)
    ok = np.isfinite(length[..., 0]) & (length[..., 0] > 0)
    normals[ok] = n[ok] / length[ok]
    return normals


def plane_distance_from_depth(depth: np.ndarray, cam: Camera, normals=None) -> np.ndarray:
    """Distance from the camera centre to each pixel's tangent plane, ``-n . X``.

    This puts an estimated z-depth map in the same units as the rendered
    plane-distance depth. NaN wherever the normal is undefined.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if normals is None:
        normals = normals_from_depth(depth, cam)
    _check_shape(depth, cam, "depth")
    d = -np.sum(normals * cam.unproject_depth(depth), axis=-1)
    return np.where(np.any(normals != 0, axis=-1), d, np.nan)


def patch_border_mask(width: int, height: int, patch: int = 14) -> np.ndarray:
    """``(H, W)`` boolean mask, False on the 1-pixel inner border of every patch cell."""
    def axis_mask(n):
        i = np.arange(n)
        start = (i // patch) * patch
        size = np.minimum(patch, n - start)
        local = i - start
        return (local > 0) & (local < size - 1)

    return axis_mask(height)[:, None] & axis_mask(width)[None, :]


def confidence_keep(confidences, threshold: float = 0.2) -> np.ndarray:
    return np.asarray(confidences, dtype=np.float64) >= threshold


def filter_points(points, confidences, threshold: float = 0.2) -> np.ndarray:
    """Points whose confidence is at least ``threshold``, in input order."""
    points = np.asarray(points)
    confidences = np.asarray(confidences)
    if len(points) != len(confidences):
        raise LengthMismatch(f"{len(points)} points but {len(confidences)} confidences")
    return points[confidence_keep(confidences, threshold)]


def warp(
    src_img: np.ndarray,
    src_depth: np.ndarray,
    src_conf: np.ndarray,
    src_cam: Camera,
    dst_cam: Camera,
    conf_threshold: float = 0.2,
):
    """Forward-warp an image into ``dst_cam`` using its z-depth.

    Each confident source pixel is unprojected, reprojected and splatted to
    the nearest destination pixel; the nearest destination depth wins and ties
    go to the earlier source pixel. Returns ``(image, mask)``; ``mask`` is
    False wherever nothing landed.
    """
    src_img = np.asarray(src_img, dtype=np.float64)
    src_depth = np.asarray(src_depth, dtype=np.float64)
    src_conf = np.asarray(src_conf, dtype=np.float64)
    _check_shape(src_img, src_cam, "image")
    _check_shape(src_depth, src_cam, "depth")
    _check_shape(src_conf, src_cam, "confidence")

    H2, W2 = dst_cam.height, dst_cam.width
    out = np.zeros((H2, W2) + src_img.shape[2:])
    mask = np.zeros((H2, W2), dtype=bool)

    with np.errstate(invalid="ignore"):
        ok = np.isfinite(src_depth) & (src_depth > 0) & (src_conf >= conf_threshold)
    src_idx = np.flatnonzero(ok)
    if len(src_idx) == 0:
        return out, mask
    pts = src_cam.unproject_depth(src_depth).reshape(-1, 3)[src_idx]
    world = src_cam.camera_to_world(pts)
    dst = dst_cam.world_to_camera(world)
    front = dst[:, 2] > dst_cam.near
    dst, src_idx = dst[front], src_idx[front]
    uv = dst_cam.project_camera_points(dst)
    u = np.floor(uv[:, 0] + 0.5)
    v = np.floor(uv[:, 1] + 0.5)
    inside = (u >= 0) & (u < W2) & (v >= 0) & (v < H2)
    u, v, z, src_idx = u[inside].astype(np.int64), v[inside].astype(np.int64), dst[inside, 2], src_idx[inside]
    dst_pix = v * W2 + u
    order = np.lexsort((src_idx, z, dst_pix))
    dst_pix, src_idx = dst_pix[order], src_idx[order]
    first = np.ones(len(dst_pix), dtype=bool)
    first[1:] = dst_pix[1:] != dst_pix[:-1]
    dst_pix, src_idx = dst_pix[first], src_idx[first]

    flat_src = src_img.reshape((-1,) + src_img.shape[2:])
    out.reshape((-1,) + out.shape[2:])[dst_pix] = flat_src[src_idx]
    mask.reshape(-1)[dst_pix] = True
    return out, mask


def circumcircle(p_a, p_b, p_c):
    """Centre, radius and plane normal of the circle through three points.

    Returns ``None`` for the centre when the points are (numerically) collinear.
    """
    p_a, p_b, p_c = (np.asarray(p, dtype=np.float64) for p in (p_a, p_b, p_c))
    a = p_a - p_c
    b = p_b - p_c
    axb = np.cross(a, b)
    denom = 2.0 * np.dot(axb, axb)
    dists = [np.linalg.norm(p_a - p_b), np.linalg.norm(p_a - p_c), np.linalg.norm(p_b - p_c)]
    if min(dists) < COINCIDENT_TOL:
        raise DegenerateInput("two of the three points coincide")
    if denom == 0.0:
        return None, np.inf, None
    radius = dists[0] * dists[1] * dists[2] / np.sqrt(2.0 * denom)
    if radius > COLLINEAR_RATIO * max(dists):
        return None, radius, None
    center = p_c + np.cross(np.dot(a, a) * b - np.dot(b, b) * a, axb) / denom
    return center, radius, axb / np.linalg.norm(axb)


def circle_interpolate(p_a, p_b, p_c, t: float) -> np.ndarray:
    """Point at fraction ``t`` along the minor arc from ``p_a`` to ``p_b``.

    The arc lies on the circle through all three points. Collinear input falls
    back to straight-line interpolation.
    """
    p_a, p_b, p_c = (np.asarray(p, dtype=np.float64) for p in (p_a, p_b, p_c))
    if not all(np.all(np.isfinite(p)) for p in (p_a, p_b, p_c)):
        raise DegenerateInput("points must be finite")
    center, radius, _ = circumcircle(p_a, p_b, p_c)
    if t == 0:
        return p_a.copy()
    if t == 1:
        return p_b.copy()
    if center is None:
        return p_a + t * (p_b - p_a)
    ea = p_a - center
    ea /= np.linalg.norm(ea)
    eb = p_b - center
    eb /= np.linalg.norm(eb)
    theta = np.arccos(np.clip(np.dot(ea, eb), -1.0, 1.0))
    tangent = eb - np.dot(eb, ea) * ea
    if np.linalg.norm(tangent) < 1e-12:
        # antipodal endpoints: take the half circle that avoids the third point
        ec = p_c - center
        tangent = -(ec - np.dot(ec, ea) * ea)
    tangent /= np.linalg.norm(tangent)
    ang = t * theta
    return center + radius * (np.cos(ang) * ea + np.sin(ang) * tangent)


def interpolate_camera(cam_a: Camera, cam_b: Camera, third_center, t: float) -> Camera:
    """Camera at fraction ``t`` from ``cam_a`` towards ``cam_b``.

    The centre follows the circle through both centres and ``third_center``;
    the orientation is slerped; intrinsics come from ``cam_a``.
    """
    if t == 0:
        return cam_a
    center = circle_interpolate(cam_a.center, cam_b.center, third_center, t)
    if t == 1:
        R = cam_b.R
    else:
        rots = Rotation.from_matrix(np.stack([cam_a.R, cam_b.R]))
        R = Slerp([0.0, 1.0], rots)([t]).as_matrix()[0]
        # re-orthonormalize to keep the camera invariant at 1e-9
        U, _, Vt = np.linalg.svd(R)
        R = U @ Vt
    return cam_a.replace(R=R, center=center)


def nearest_cameras(cams, i: int, k: int = 2) -> list[int]:
    centers = np.stack([c.center for c in cams])
    d = np.linalg.norm(centers - centers[i], axis=1)
    order = [j for j in np.argsort(d, kind="stable") if j != i]
    return [int(j) for j in order[:k]]


def pseudo_cameras(cams, views_per_pair: int = 2, deduplicate: bool = False) -> list[Camera]:
    """Pseudo cameras on the circle through each camera and its two nearest neighbours.

    For every target camera and each of its two neighbours, ``views_per_pair``
    cameras are placed at ``t = k / (views_per_pair + 1)`` along the arc.
    """
    cams = list(cams)
    if len(cams) < 3:
        raise TooFewCameras(f"need at least 3 cameras, got {len(cams)}")
    out = []
    for i, target in enumerate(cams):
        nb = nearest_cameras(cams, i, 2)
        for j, other in ((nb[0], nb[1]), (nb[1], nb[0])):
            for k in range(1, views_per_pair + 1):
                t = k / (views_per_pair + 1)
                out.append(interpolate_camera(target, cams[j], cams[other].center, t))
    if deduplicate:
        unique = []
        for c in out:
            if not any(
                np.allclose(c.center, u.center, atol=1e-9) and np.allclose(c.R, u.R, atol=1e-9) for u in unique
            ):
                unique.append(c)
        out = unique
    return out


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Similarity ``(s, R, t)`` minimizing ``sum ||s R src_i + t - dst_i||^2``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = np.mean(np.sum(xs * xs, axis=1))
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def ate(traj_est, traj_gt) -> tuple[float, float]:
    """Mean and RMS position error after similarity alignment of ``traj_est``."""
    est = np.asarray(traj_est, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(traj_gt, dtype=np.float64).reshape(-1, 3)
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimated vs {len(gt)} ground-truth positions")
    if len(gt) < 3:
        raise LengthMismatch("need at least 3 positions")
    if np.ptp(gt, axis=0).max() == 0.0:
        raise DegenerateTrajectory("all ground-truth positions coincide")
    if np.ptp(est, axis=0).max() == 0.0:
        raise DegenerateTrajectory("all estimated positions coincide")
    if np.array_equal(est, gt):
        # the identity alignment is exact; the SVD would leave ~1e-15 residue
        return 0.0, 0.0
    s, R, t = umeyama(est, gt)
    aligned = s * est @ R.T + t
    err = np.linalg.norm(aligned - gt, axis=1)
    return float(err.mean()), float(np.sqrt(np.mean(err * err)))
