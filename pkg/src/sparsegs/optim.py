"""Initialization, training loop and gradient checking."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import PARAM_GROUPS, Camera, GaussianCloud, TrainConfig, logit, quat_to_rotmat
from .errors import EmptyPointCloud, NoViews
from .geometry import (
    confidence_keep,
    interpolate_camera,
    nearest_cameras,
    normals_from_depth,
    patch_border_mask,
    plane_distance_from_depth,
    warp,
)
from .losses import (
    ViewTarget,
    normal_loss_grad,
    pearson_depth_loss_grad,
    photometric_loss_grad,
    scale_loss_grad,
    total_loss,
)
from .raster import RenderGrads, RenderOutput, render, render_backward
from .sh import rgb_to_dc

INIT_OPACITY = 0.1
MIN_INIT_SCALE = 1e-4
RESET_OPACITY = 0.01
SPLIT_SCALE_DIV = 1.6
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15


def scene_extent(cams=None, points=None) -> float:
    """Radius of the camera rig (x1.1), or the point bounding-box diagonal if larger."""
    ext = 0.0
    if cams:
        centers = np.stack([c.center for c in cams])
        ext = 1.1 * float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    if points is not None and len(points):
        pts = np.asarray(points, dtype=np.float64)
        ext = max(ext, float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))))
    return max(ext, MIN_INIT_SCALE)


def init_from_points(
    points,
    colors,
    cams=None,
    confidences=None,
    conf_threshold: Optional[float] = None,
    sh_degree: int = 0,
) -> GaussianCloud:
    """One isotropic Gaussian per (confident) point.

    The scale is the mean distance to the three nearest other points, clamped
    to ``[1e-4, scene extent]``; opacity starts at 0.1 and rotation at identity.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = np.asarray(colors)
    cols = cols.astype(np.float64) / 255.0 if cols.dtype == np.uint8 else cols.astype(np.float64)
    cols = cols.reshape(-1, 3)
    if confidences is not None and conf_threshold is not None:
        keep = confidence_keep(confidences, conf_threshold)
        pts, cols = pts[keep], cols[keep]
    n = len(pts)
    if n == 0:
        raise EmptyPointCloud("no points left to initialize from")
    extent = scene_extent(cams, pts)
    if n > 1:
        k = min(4, n)
        dist, _ = cKDTree(pts).query(pts, k=k)
        nn = dist[:, 1:].mean(axis=1)
    else:
        nn = np.zeros(1)
    scale = np.clip(nn, MIN_INIT_SCALE, extent)
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    sh[:, 0, :] = rgb_to_dc(cols)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianCloud(
        means=pts,
        quats=quats,
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        opacities=np.full(n, float(logit(INIT_OPACITY))),
        sh=sh,
    )


# -- views -------------------------------------------------------------------------


@dataclass
class TrainView:
    camera: Camera
    target: ViewTarget
    name: str = ""


def make_view(camera: Camera, image, depth=None, confidence=None, patch: int = 14, name: str = "") -> TrainView:
    """Real training view.

    Target normals, their patch mask and the plane-distance depth target are
    all derived from the estimated z-depth ``depth``.
    """
    normals = mask = plane = None
    if depth is not None:
        depth = np.asarray(depth, dtype=np.float64)
        if confidence is None:
            confidence = np.ones(depth.shape)
        normals = normals_from_depth(depth, camera)
        mask = patch_border_mask(camera.width, camera.height, patch) & np.any(normals != 0, axis=-1)
        plane = plane_distance_from_depth(depth, camera, normals)
    target = ViewTarget(np.asarray(image, dtype=np.float64), depth, confidence, normals, mask, plane_depth=plane)
    return TrainView(camera, target, name)


def pseudo_camera_sources(cams, views_per_pair: int = 2):
    """``(source index, camera)`` pairs in the order :func:`geometry.pseudo_cameras` emits them."""
    out = []
    for i, target in enumerate(cams):
        nb = nearest_cameras(cams, i, 2)
        for j, other in ((nb[0], nb[1]), (nb[1], nb[0])):
            for k in range(1, views_per_pair + 1):
                t = k / (views_per_pair + 1)
                out.append((i, interpolate_camera(target, cams[j], cams[other].center, t)))
    return out


def make_pseudo_views(views, views_per_pair: int = 2, conf_threshold: float = 0.2) -> list[TrainView]:
    """Warp every real view into its circle-interpolated pseudo cameras."""
    cams = [v.camera for v in views]
    if len(cams) < 3:
        return []
    out = []
    for n, (i, cam) in enumerate(pseudo_camera_sources(cams, views_per_pair)):
        src = views[i]
        if src.target.depth is None:
            continue
        img, mask = warp(src.target.image, src.target.depth, src.target.confidence, src.camera, cam, conf_threshold)
        out.append(TrainView(cam, ViewTarget(img, pseudo_mask=mask), name=f"pseudo_{n:03d}"))
    return out


# -- optimizer state ---------------------------------------------------------------


@dataclass
class TrainState:
    cloud: GaussianCloud
    iteration: int = 0
    seed: int = 0
    extent: float = 1.0
    moments: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)
    grad_accum: Optional[np.ndarray] = None
    grad_count: Optional[np.ndarray] = None
    rng: Optional[np.random.Generator] = None

    def __post_init__(self):
        if not self.moments:
            self.moments = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in self.cloud.params().items()}
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(len(self.cloud))
            self.grad_count = np.zeros(len(self.cloud))

    def copy(self) -> "TrainState":
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng.bit_generator.state
        return TrainState(
            cloud=self.cloud.copy(),
            iteration=self.iteration,
            seed=self.seed,
            extent=self.extent,
            moments={k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()},
            loss_history=list(self.loss_history),
            grad_accum=self.grad_accum.copy(),
            grad_count=self.grad_count.copy(),
            rng=rng,
        )

    def _select(self, keep):
        self.cloud = self.cloud.subset(keep)
        self.moments = {k: (m[keep], v[keep]) for k, (m, v) in self.moments.items()}
        self.grad_accum = self.grad_accum[keep]
        self.grad_count = self.grad_count[keep]


def adam_step(state: TrainState, grads: dict, cfg: TrainConfig) -> None:
    b1, b2 = ADAM_BETAS
    step = state.iteration + 1
    params = state.cloud.params()
    for name in PARAM_GROUPS:
        g = grads[name]
        m, v = state.moments[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        lr = cfg.lr(name)
        if name == "means" and cfg.means_lr_scaled_by_extent:
            lr *= state.extent
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        params[name] -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    state.cloud.normalize_quats()


def prune(state: TrainState, min_opacity: float) -> int:
    keep = state.cloud.alphas >= min_opacity
    removed = int((~keep).sum())
    if removed:
        state._select(keep)
    return removed


def split(state: TrainState, cfg: TrainConfig) -> int:
    """Replace every Gaussian with a large mean positional gradient by two children."""
    with np.errstate(invalid="ignore", divide="ignore"):
        avg = np.where(state.grad_count > 0, state.grad_accum / state.grad_count, 0.0)
    sel = np.nonzero(avg > cfg.densify_grad_threshold)[0]
    state.grad_accum[:] = 0.0
    state.grad_count[:] = 0.0
    if len(sel) == 0:
        return 0
    cloud = state.cloud
    R = quat_to_rotmat(cloud.quats[sel])
    s = cloud.scales[sel]
    children = []
    for _ in range(2):
        offs = np.einsum("nij,nj->ni", R, state.rng.standard_normal((len(sel), 3)) * s)
        child = cloud.subset(sel)
        child.means = child.means + offs
        child.log_scales = child.log_scales - np.log(SPLIT_SCALE_DIV)
        children.append(child)
    keep = np.ones(len(cloud), dtype=bool)
    keep[sel] = False
    state._select(keep)
    n_new = 2 * len(sel)
    state.cloud = GaussianCloud.concat([state.cloud] + children)
    state.moments = {
        k: (np.concatenate([m, np.zeros((n_new,) + m.shape[1:])]), np.concatenate([v, np.zeros((n_new,) + v.shape[1:])]))
        for k, (m, v) in state.moments.items()
    }
    state.grad_accum = np.concatenate([state.grad_accum, np.zeros(n_new)])
    state.grad_count = np.concatenate([state.grad_count, np.zeros(n_new)])
    return len(sel)


def view_schedule(n_real: int, n_pseudo: int, iteration: int) -> tuple[bool, int]:
    """Round robin over real views, one pseudo view after each full real cycle."""
    cycle = n_real + (1 if n_pseudo else 0)
    pos = iteration % cycle
    if pos < n_real:
        return False, pos
    return True, (iteration // cycle) % n_pseudo


def train_step(state: TrainState, view: TrainView, cfg: TrainConfig) -> dict:
    out = render(state.cloud, view.camera, cfg.background, threads=cfg.threads)
    loss = total_loss([out], [view.target], cfg, state.cloud)
    grads = render_backward(state.cloud, view.camera, out, loss.render_grads[0])
    for k, g in loss.param_grads.items():
        grads[k] = grads[k] + g
    if cfg.splitting_enabled:
        gnorm = np.linalg.norm(grads["means"], axis=1)
        state.grad_accum += gnorm
        state.grad_count += gnorm > 0
    adam_step(state, grads, cfg)
    return {"iteration": state.iteration, "view": view.name, "total": loss.total, **loss.terms}


def train(state: TrainState, views, pseudo_views, cfg: TrainConfig, callback: Optional[Callable] = None) -> TrainState:
    """Run ``cfg.iterations`` optimization steps; returns a new state."""
    views = list(views)
    pseudo_views = list(pseudo_views or [])
    if not views:
        raise NoViews("training needs at least one real view")
    state = state.copy()
    if cfg.w_pseudo == 0:
        pseudo_views = []
    for _ in range(cfg.iterations):
        is_pseudo, j = view_schedule(len(views), len(pseudo_views), state.iteration)
        view = pseudo_views[j] if is_pseudo else views[j]
        record = train_step(state, view, cfg)
        state.iteration += 1
        it = state.iteration
        if cfg.opacity_reset_enabled and it % cfg.opacity_reset_interval == 0:
            state.cloud.opacities = np.minimum(state.cloud.opacities, float(logit(RESET_OPACITY)))
            m, v = state.moments["opacities"]
            m[:] = 0.0
            v[:] = 0.0
        if cfg.splitting_enabled and cfg.densify_from <= it <= cfg.densify_until and it % cfg.densify_interval == 0:
            record["split"] = split(state, cfg)
        if it % cfg.prune_interval == 0:
            record["pruned"] = prune(state, cfg.prune_opacity)
        record["n_gaussians"] = len(state.cloud)
        state.loss_history.append(record)
        if callback is not None:
            callback(state, record)
    return state


# -- gradient checking --------------------------------------------------------------


Objective = Callable[[GaussianCloud, RenderOutput], tuple]


def photometric_objective(gt, lam: float = 0.2) -> Objective:
    def f(cloud, out):
        t = photometric_loss_grad(out.color, gt, lam)
        return t.value, RenderGrads(color=t.grad), {}
    return f


def pearson_objective(depth_t, conf, source: str = "plane") -> Objective:
    def f(cloud, out):
        d = out.depth_plane if source == "plane" else out.depth_accum
        t = pearson_depth_loss_grad(d, depth_t, conf)
        rg = RenderGrads(depth_plane=t.grad) if source == "plane" else RenderGrads(depth_accum=t.grad)
        return t.value, rg, {}
    return f


def normal_objective(normals_t, mask) -> Objective:
    def f(cloud, out):
        t = normal_loss_grad(out.normals, normals_t, mask)
        return t.value, RenderGrads(normals=t.grad), {}
    return f


def scale_objective() -> Objective:
    def f(cloud, out):
        t = scale_loss_grad(cloud)
        return t.value, RenderGrads(), {"log_scales": t.grad}
    return f


def zero_objective() -> Objective:
    def f(cloud, out):
        return 0.0, RenderGrads(), {}
    return f


def analytic_gradients(cloud, cam, objective: Objective, background=(0.0, 0.0, 0.0), early_stop=True) -> dict:
    out = render(cloud, cam, background, early_stop=early_stop)
    _, rg, pg = objective(cloud, out)
    grads = render_backward(cloud, cam, out, rg)
    for k, g in pg.items():
        grads[k] = grads[k] + g
    return grads


@dataclass
class GradcheckReport:
    max_rel_error: dict  # objective -> group -> max relative error
    tol: float

    @property
    def flagged(self) -> list[tuple[str, str]]:
        return [(o, g) for o, groups in self.max_rel_error.items() for g, e in groups.items() if e > self.tol]

    @property
    def passed(self) -> bool:
        return not self.flagged


def gradcheck(
    cloud: GaussianCloud,
    cam: Camera,
    objectives,
    h: float = 1e-5,
    tol: float = 1e-4,
    background=(0.0, 0.0, 0.0),
    early_stop: bool = True,
    grad_fn: Optional[Callable] = None,
) -> GradcheckReport:
    """Compare analytic gradients with central differences for every parameter.

    ``objectives`` is one objective or a ``{name: objective}`` dict; all of
    them are evaluated on the same perturbed renders. ``grad_fn(cloud, cam,
    objective)`` can replace the analytic path (used to test the detector).
    """
    if callable(objectives):
        objectives = {"loss": objectives}
    grad_fn = grad_fn or (lambda c, k, o: analytic_gradients(c, k, o, background, early_stop))
    analytic = {name: grad_fn(cloud, cam, obj) for name, obj in objectives.items()}

    def values(c):
        out = render(c, cam, background, early_stop=early_stop)
        return {name: float(obj(c, out)[0]) for name, obj in objectives.items()}

    report = {name: {} for name in objectives}
    for group in PARAM_GROUPS:
        base = getattr(cloud, group)
        worst = {name: 0.0 for name in objectives}
        for idx in np.ndindex(base.shape):
            plus = cloud.copy()
            getattr(plus, group)[idx] += h
            minus = cloud.copy()
            getattr(minus, group)[idx] -= h
            vp, vm = values(plus), values(minus)
            for name in objectives:
                fd = (vp[name] - vm[name]) / (2 * h)
                an = float(analytic[name][group][idx])
                rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
                worst[name] = max(worst[name], rel)
        for name in objectives:
            report[name][group] = worst[name]
    return GradcheckReport(report, tol)


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> None:
    """Gaussian PLY at ``path`` plus ``path + '.json'`` with config and iteration."""
    from .io import atomic_write, write_gaussian_ply

    write_gaussian_ply(path, state.cloud)
    meta = {"iteration": state.iteration, "seed": state.seed, "extent": state.extent, "config": cfg.to_dict()}
    with atomic_write(os.fspath(path) + ".json") as fh:
        fh.write(json.dumps(meta, indent=2).encode("utf-8"))


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    from .io import read_gaussian_ply

    cloud = read_gaussian_ply(path)
    with open(os.fspath(path) + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = TrainConfig.from_dict(meta["config"])
    state = TrainState(cloud, iteration=meta["iteration"], seed=meta["seed"], extent=meta["extent"])
    return state, cfg
