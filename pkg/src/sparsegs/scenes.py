"""Synthetic scenes for tests, demos and the toy end-to-end run."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, GaussianCloud, rotmat_to_quat
from .raster import render
from .sh import rgb_to_dc


def look_at(center, target, down=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world rotation for a camera at ``center`` looking at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def simple_camera(size: int = 32, focal: float = 30.0, R=None, center=None) -> Camera:
    return Camera(
        size, size, focal, focal, (size - 1) / 2.0, (size - 1) / 2.0,
        np.eye(3) if R is None else R, np.zeros(3) if center is None else center,
    )


def random_cloud(rng: np.random.Generator, n: int = 10, sh_degree: int = 0, depth=(4.0, 6.0), spread=1.0,
                 scale_range=(0.08, 0.4), opacity_range=(0.2, 0.9)) -> GaussianCloud:
    """Random Gaussians in front of a camera at the origin looking down +z."""
    means = rng.uniform([-spread, -spread, depth[0]], [spread, spread, depth[1]], (n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    log_s = np.log(rng.uniform(*scale_range, (n, 3)))
    p = rng.uniform(*opacity_range, n)
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    sh[:, 0] = rgb_to_dc(rng.uniform(0.1, 0.9, (n, 3)))
    if sh_degree:
        sh[:, 1:] = rng.normal(0, 0.1, (n, sh.shape[1] - 1, 3))
    return GaussianCloud(means, quats, log_s, np.log(p) - np.log1p(-p), sh)


def plane_gaussians(origin, u_axis, v_axis, nu: int, nv: int, color_fn, thickness: float = 0.005,
                    opacity: float = 0.95, footprint: float = 0.75) -> GaussianCloud:
    """Flat Gaussians on a regular grid spanning ``origin + a*u_axis + b*v_axis``."""
    origin = np.asarray(origin, dtype=np.float64)
    u_axis = np.asarray(u_axis, dtype=np.float64)
    v_axis = np.asarray(v_axis, dtype=np.float64)
    a, b = np.meshgrid((np.arange(nu) + 0.5) / nu, (np.arange(nv) + 0.5) / nv, indexing="xy")
    a, b = a.ravel(), b.ravel()
    means = origin + a[:, None] * u_axis + b[:, None] * v_axis
    eu = u_axis / np.linalg.norm(u_axis)
    ev = v_axis / np.linalg.norm(v_axis)
    n = np.cross(eu, ev)
    R = np.stack([eu, ev, n], axis=1)
    quat = rotmat_to_quat(R)
    su = footprint * np.linalg.norm(u_axis) / nu
    sv = footprint * np.linalg.norm(v_axis) / nv
    count = len(means)
    colors = np.clip(color_fn(a, b), 0.02, 0.98)
    return GaussianCloud(
        means=means,
        quats=np.repeat(quat[None], count, axis=0),
        log_scales=np.repeat(np.log([[su, sv, thickness]]), count, axis=0),
        opacities=np.full(count, np.log(opacity) - np.log1p(-opacity)),
        sh=rgb_to_dc(colors)[:, None, :],
    )


def _wall_texture(a, b):
    check = ((np.floor(a * 6) + np.floor(b * 5)) % 2)
    return np.stack(
        [0.35 + 0.4 * check + 0.1 * np.sin(9 * b), 0.3 + 0.3 * np.sin(7 * a) ** 2, 0.6 - 0.35 * check * a], axis=1
    )


def _floor_texture(a, b):
    stripes = 0.5 + 0.5 * np.sin(14 * b + 3 * a)
    return np.stack([0.2 + 0.5 * stripes, 0.55 - 0.2 * a, 0.25 + 0.5 * (1 - stripes) * b], axis=1)


@dataclass
class ToyScene:
    gt: GaussianCloud
    train_cams: list
    heldout_cam: Camera
    extent: float


def two_plane_scene(size: int = 48, focal_ratio: float = 0.95, angles=(-18.0, 0.0, 18.0), heldout_angle: float = 9.0,
                    wall_grid=(36, 30), floor_grid=(36, 26)) -> ToyScene:
    """A textured back wall and floor (~2000 flat Gaussians) seen by cameras on an arc."""
    wall = plane_gaussians((-2.0, -2.0, 5.0), (4.0, 0.0, 0.0), (0.0, 3.2, 0.0), *wall_grid, _wall_texture)
    floor = plane_gaussians((-2.0, 1.2, 2.4), (4.0, 0.0, 0.0), (0.0, 0.0, 2.6), *floor_grid, _floor_texture)
    gt = GaussianCloud.concat([wall, floor])
    pivot = np.array([0.0, 0.2, 4.2])
    radius = 4.6
    focal = focal_ratio * size

    def cam_at(deg):
        th = np.deg2rad(deg)
        c = pivot + radius * np.array([np.sin(th), -0.12, -np.cos(th)])
        return Camera(size, size, focal, focal, (size - 1) / 2.0, (size - 1) / 2.0, look_at(c, pivot), c, 0.05, 50.0)

    pts = gt.means
    extent = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    return ToyScene(gt, [cam_at(a) for a in angles], cam_at(heldout_angle), extent)


def estimated_depth(cloud: GaussianCloud, cam: Camera, min_alpha: float = 0.5):
    """Normalized z-depth and confidence of a reference render, as a depth network would give."""
    out = render(cloud, cam)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = out.depth_accum / out.alpha
    valid = np.isfinite(depth) & (out.alpha >= min_alpha)
    return np.where(valid, depth, np.nan), np.where(valid, np.clip(out.alpha, 0.0, 1.0), 0.0)


def noisy_points(cloud: GaussianCloud, sigma: float, rng: np.random.Generator):
    """Gaussian centres perturbed by isotropic noise; confidence = exp(-|noise|)."""
    from .sh import dc_to_rgb

    noise = rng.normal(0.0, sigma, cloud.means.shape)
    pts = cloud.means + noise
    colors = np.clip(dc_to_rgb(cloud.sh[:, 0, :]), 0.0, 1.0)
    conf = np.exp(-np.linalg.norm(noise, axis=1))
    return pts, colors, conf


ABLATION_CONFIGS = {
    "photometric": dict(w_depth=0.0, w_normal=0.0, w_pseudo=0.0),
    "depth": dict(w_normal=0.0, w_pseudo=0.0),
    "depth_normal": dict(w_pseudo=0.0),
    "full": {},
}


def run_toy_ablation(iterations: int = 2000, size: int = 40, heldout_angle: float = -40.0, noise: float = 0.02,
                     w_depth: float = 0.5, seed: int = 0, configs=None, log=None) -> dict:
    """Train the two-plane scene under each regularization setting and score the held-out view.

    Training views and their depth estimates are rendered from the ground
    truth; the initial cloud is the ground-truth centres perturbed by
    ``noise * extent``. The held-out camera sits outside the training arc.
    Returns ``{config: {"psnr", "depth_err", "finite", "n_gaussians"}}`` in
    the order of ``configs``; ``depth_err`` is the mean absolute difference
    of rendered plane-distance depth where both renders have any coverage.
    """
    from .core import TrainConfig
    from .metrics import psnr
    from .optim import TrainState, init_from_points, make_pseudo_views, make_view, scene_extent, train

    scene = two_plane_scene(size=size, heldout_angle=heldout_angle)
    rng = np.random.default_rng(seed)
    pts, colors, _ = noisy_points(scene.gt, noise * scene.extent, rng)
    views = []
    for i, cam in enumerate(scene.train_cams):
        depth, conf = estimated_depth(scene.gt, cam)
        views.append(make_view(cam, render(scene.gt, cam).color, depth, conf, name=f"train{i}"))
    pseudo = make_pseudo_views(views)
    cloud = init_from_points(pts, colors, scene.train_cams)
    extent = scene_extent(scene.train_cams, pts)
    truth = render(scene.gt, scene.heldout_cam)

    results = {}
    for name, overrides in (configs or ABLATION_CONFIGS).items():
        cfg = TrainConfig.from_dict({"iterations": iterations, "w_depth": w_depth, "seed": seed, **overrides})
        state = train(TrainState(cloud.copy(), seed=seed, extent=extent), views, pseudo, cfg)
        out = render(state.cloud, scene.heldout_cam)
        both = np.isfinite(out.depth_plane) & np.isfinite(truth.depth_plane)
        results[name] = {
            "psnr": psnr(out.color, truth.color),
            "depth_err": float(np.mean(np.abs(out.depth_plane[both] - truth.depth_plane[both]))),
            "finite": all(np.isfinite(r["total"]) for r in state.loss_history),
            "n_gaussians": len(state.cloud),
        }
        if log is not None:
            log(name, results[name])
    return results
