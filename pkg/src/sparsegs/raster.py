"""CPU reference splatting renderer for planar Gaussians.

Every pixel composites its contributors front to back, sorted by the
view-space depth of the Gaussian centre (ties broken by Gaussian index).
Besides colour the renderer produces plane-distance depth, accumulated z
depth, camera-frame normals and accumulated alpha, and keeps per-pixel
contributor records so that :func:`render_backward` can return analytic
parameter gradients.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .core import Camera, GaussianCloud, activate, quat_to_rotmat, sigmoid
from .errors import DimensionMismatch, SingularFootprint
from .sh import sh_basis

COV2D_BLUR = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
FOOTPRINT_SIGMA = 3.0

# feature channels composited per Gaussian: rgb, plane distance, z, normal xyz, 1
_N_FEAT = 9


class ProjectedGaussian(NamedTuple):
    index: int
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    plane_dist: float
    normal: np.ndarray
    bbox: tuple


@dataclass
class Projection:
    """Struct-of-arrays view of the Gaussians that survive culling.

    ``cov2d`` is the raw ``J W Sigma W^T J^T``; ``conic`` is the inverse of
    ``cov2d + 0.3 I`` stored as ``(a, b, c)``.
    """

    index: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    plane_dist: np.ndarray
    normal: np.ndarray
    bbox: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    # cached intermediates for the backward pass
    mean_cam: np.ndarray
    J: np.ndarray
    rot: np.ndarray
    scales: np.ndarray
    axis: np.ndarray
    flip: np.ndarray
    color_raw: np.ndarray
    sh_Y: np.ndarray
    view_vec: np.ndarray

    def __len__(self) -> int:
        return len(self.index)

    def gaussians(self) -> list[ProjectedGaussian]:
        return [
            ProjectedGaussian(
                int(self.index[i]),
                self.mean2d[i],
                self.cov2d[i],
                float(self.depth[i]),
                float(self.plane_dist[i]),
                self.normal[i],
                tuple(int(b) for b in self.bbox[i]),
            )
            for i in range(len(self))
        ]


def _eval_colors(cloud_sh, view_vec, degree):
    dist = np.linalg.norm(view_vec, axis=1, keepdims=True)
    dirs = view_vec / np.where(dist > 0, dist, 1.0)
    Y = sh_basis(dirs, degree)
    raw = np.einsum("mk,mkc->mc", Y, cloud_sh) + 0.5
    return raw, Y


def project(cloud: GaussianCloud, cam: Camera) -> Projection:
    """Project every Gaussian into ``cam`` and cull the invisible ones."""
    W = cam.W
    mean_cam = cam.world_to_camera(cloud.means)
    z_all = mean_cam[:, 2] if len(cloud) else np.zeros(0)
    keep = (z_all > cam.near) & (z_all < cam.far)
    idx = np.nonzero(keep)[0]

    t = mean_cam[idx]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    m = len(idx)
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)

    rot = quat_to_rotmat(cloud.quats[idx]) if m else np.zeros((0, 3, 3))
    scales = np.exp(cloud.log_scales[idx])
    Mtx = rot * scales[:, None, :]
    cov3d = Mtx @ np.swapaxes(Mtx, 1, 2)
    T = J @ W
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    A = cov2d[:, 0, 0] + COV2D_BLUR
    B = 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0])
    C = cov2d[:, 1, 1] + COV2D_BLUR
    det = A * C - B * B
    bad = ~np.isfinite(det) | (det <= 0.0)
    if np.any(bad):
        raise SingularFootprint(f"degenerate 2D covariance for Gaussians {idx[bad][:5].tolist()}")
    conic = np.stack([C / det, -B / det, A / det], axis=1)

    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    mean2d = np.stack([u, v], axis=1)

    opacity = sigmoid(cloud.opacities[idx])
    # Smallest Mahalanobis radius outside of which alpha < 1/255 is guaranteed;
    # never below the 3-sigma footprint.
    with np.errstate(divide="ignore"):
        r2 = 2.0 * np.log(255.0 * np.minimum(opacity, ALPHA_MAX))
    radius = np.sqrt(np.maximum(r2, FOOTPRINT_SIGMA**2)) * (1.0 + 1e-6)
    ext_x = radius * np.sqrt(A)
    ext_y = radius * np.sqrt(C)
    bbox = np.stack(
        [
            np.maximum(np.ceil(u - ext_x), 0),
            np.minimum(np.floor(u + ext_x), cam.width - 1),
            np.maximum(np.ceil(v - ext_y), 0),
            np.minimum(np.floor(v + ext_y), cam.height - 1),
        ],
        axis=1,
    )
    visible = (bbox[:, 0] <= bbox[:, 1]) & (bbox[:, 2] <= bbox[:, 3]) & (opacity * 255.0 >= 1.0)
    sel = np.nonzero(visible)[0]

    axis = np.argmin(scales[sel], axis=1) if len(sel) else np.zeros(0, dtype=int)
    rot_s = rot[sel]
    n_world = rot_s[np.arange(len(sel)), :, axis]
    n_cam = n_world @ W.T
    t_s = t[sel]
    facing = np.einsum("ij,ij->i", n_cam, t_s)
    flip = np.where(facing > 0, -1.0, 1.0)
    n_cam = n_cam * flip[:, None]
    plane_dist = -np.einsum("ij,ij->i", n_cam, t_s)

    view_vec = cloud.means[idx[sel]] - cam.center
    color_raw, Y = _eval_colors(cloud.sh[idx[sel]], view_vec, cloud.sh_degree)

    return Projection(
        index=idx[sel],
        mean2d=mean2d[sel],
        cov2d=cov2d[sel],
        conic=conic[sel],
        depth=z[sel],
        plane_dist=plane_dist,
        normal=n_cam,
        bbox=bbox[sel].astype(np.int64),
        opacity=opacity[sel],
        color=np.maximum(color_raw, 0.0),
        mean_cam=t_s,
        J=J[sel],
        rot=rot_s,
        scales=scales[sel],
        axis=axis,
        flip=flip,
        color_raw=color_raw,
        sh_Y=Y,
        view_vec=view_vec,
    )


@dataclass
class Contributors:
    """Per-pixel front-to-back contributor records, padded to ``K`` layers.

    Row ``p`` (flattened ``v * width + u``) lists Gaussian indices in ``gid``
    (``-1`` marks an empty slot), their blended alpha and the transmittance in
    front of them. ``T_final`` is the residual transmittance after the last
    contributor.
    """

    gid: np.ndarray
    alpha: np.ndarray
    T: np.ndarray
    T_final: np.ndarray
    count: np.ndarray
    width: int

    def pixel(self, v: int, u: int) -> list[tuple[int, float, float]]:
        p = v * self.width + u
        return [
            (int(g), float(a), float(t))
            for g, a, t in zip(self.gid[p], self.alpha[p], self.T[p])
            if g >= 0
        ]


@dataclass
class RenderOutput:
    color: np.ndarray
    depth_plane: np.ndarray
    depth_accum: np.ndarray
    normals: np.ndarray
    alpha: np.ndarray
    contributors: Contributors
    background: np.ndarray
    cache: Optional["_Cache"] = field(default=None, repr=False, compare=False)


class _Cache(NamedTuple):
    """Forward-pass intermediates reused by the backward pass."""

    proj: Projection
    pix: np.ndarray
    rank: np.ndarray
    gl: np.ndarray
    raw: np.ndarray


@dataclass
class RenderGrads:
    """Loss gradients w.r.t. each rendered channel; ``None`` means zero."""

    color: Optional[np.ndarray] = None
    depth_plane: Optional[np.ndarray] = None
    depth_accum: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None

    def __add__(self, other: "RenderGrads") -> "RenderGrads":
        def add(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return a + b

        return RenderGrads(
            *(add(getattr(self, f), getattr(other, f)) for f in ("color", "depth_plane", "depth_accum", "normals", "alpha"))
        )

    def scaled(self, k: float) -> "RenderGrads":
        return RenderGrads(
            *(None if getattr(self, f) is None else k * getattr(self, f)
              for f in ("color", "depth_plane", "depth_accum", "normals", "alpha"))
        )


def _features(proj: Projection) -> np.ndarray:
    F = np.empty((len(proj), _N_FEAT))
    F[:, 0:3] = proj.color
    F[:, 3] = proj.plane_dist
    F[:, 4] = proj.depth
    F[:, 5:8] = proj.normal
    F[:, 8] = 1.0
    return F


def _pairs(proj: Projection, width: int):
    """All (pixel, local gaussian) pairs with alpha >= 1/255, sorted front to back.

    Returns pixel, local index, clamped alpha and the unclamped ``op * G``.
    """
    bb = proj.bbox
    bw = bb[:, 1] - bb[:, 0] + 1
    bh = bb[:, 3] - bb[:, 2] + 1
    n = bw * bh
    total = int(n.sum())
    g = np.repeat(np.arange(len(proj)), n)
    local = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
    bw_g = bw[g]
    px = bb[g, 0] + local % bw_g
    py = bb[g, 2] + local // bw_g
    dx = px - proj.mean2d[g, 0]
    dy = py - proj.mean2d[g, 1]
    cn = proj.conic[g]
    power = -0.5 * (cn[:, 0] * dx * dx + cn[:, 2] * dy * dy) - cn[:, 1] * dx * dy
    raw = proj.opacity[g] * np.exp(power)
    ok = raw >= ALPHA_MIN
    pix = (py * width + px)[ok]
    g = g[ok]
    raw = raw[ok]
    # depth order with ties broken by global index, then a single integer key
    depth_rank = np.empty(len(proj), dtype=np.int64)
    depth_rank[np.lexsort((proj.index, proj.depth))] = np.arange(len(proj))
    order = np.argsort(pix * max(len(proj), 1) + depth_rank[g])
    raw = raw[order]
    return pix[order], g[order], np.minimum(raw, ALPHA_MAX), raw


def _composite_rows(alpha_L, gl_L, F, bg9, early_stop):
    n, K = alpha_L.shape
    if K == 0:
        return np.tile(bg9, (n, 1)), np.ones(n), alpha_L.copy(), alpha_L.copy(), np.zeros(n, dtype=np.int64)
    # cumprod runs sequentially along each row, i.e. T_{k+1} = T_k * (1 - a_k)
    T_excl = np.ones((n, K))
    T_excl[:, 1:] = np.cumprod(1.0 - alpha_L[:, :-1], axis=1)
    live = alpha_L > 0.0
    if early_stop:
        # T is non-increasing, so this cuts each row after a prefix
        live &= T_excl >= T_MIN
    a_L = np.where(live, alpha_L, 0.0)
    T_fin = np.cumprod(1.0 - a_L, axis=1)[:, -1]
    T_L = np.where(live, T_excl, 0.0)
    p_idx, k_idx = np.nonzero(live)
    w = T_L[p_idx, k_idx] * a_L[p_idx, k_idx]
    Fp = F[gl_L[p_idx, k_idx]]
    out = np.empty((n, _N_FEAT))
    for c in range(_N_FEAT):
        out[:, c] = np.bincount(p_idx, weights=w * Fp[:, c], minlength=n)
    out += T_fin[:, None] * bg9
    return out, T_fin, T_L, a_L, live.sum(axis=1)


def render(
    cloud: GaussianCloud,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    early_stop: bool = True,
    threads: int = 1,
) -> RenderOutput:
    """Render colour, depths, normals and alpha for ``cam``."""
    H, Wd = cam.height, cam.width
    P = H * Wd
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    proj = project(cloud, cam)
    pix, gl, alpha, raw = _pairs(proj, Wd)
    counts = np.bincount(pix, minlength=P)
    K = int(counts.max()) if P and len(pix) else 0
    starts = np.cumsum(counts) - counts
    rank = np.arange(len(pix)) - starts[pix]
    alpha_L = np.zeros((P, K))
    gl_L = np.zeros((P, K), dtype=np.int64)
    alpha_L[pix, rank] = alpha
    gl_L[pix, rank] = gl

    F = _features(proj) if len(proj) else np.zeros((1, _N_FEAT))
    bg9 = np.zeros(_N_FEAT)
    bg9[:3] = bg

    out = np.zeros((P, _N_FEAT))
    T_fin = np.zeros(P)
    T_L = np.zeros((P, K))
    a_L = np.zeros((P, K))
    count = np.zeros(P, dtype=np.int64)

    rows = np.array_split(np.arange(H), max(1, min(threads, H)))
    chunks = [(r[0] * Wd, (r[-1] + 1) * Wd) for r in rows if len(r)]

    def work(span):
        p0, p1 = span
        o, t, tl, al, c = _composite_rows(alpha_L[p0:p1], gl_L[p0:p1], F, bg9, early_stop)
        out[p0:p1] = o
        T_fin[p0:p1] = t
        T_L[p0:p1] = tl
        a_L[p0:p1] = al
        count[p0:p1] = c

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(work, chunks))
    else:
        for span in chunks:
            work(span)

    gid_L = np.where(a_L > 0.0, proj.index[gl_L] if len(proj) else -1, -1)
    hit = count > 0
    nan = np.full(P, np.nan)
    return RenderOutput(
        color=out[:, 0:3].reshape(H, Wd, 3),
        depth_plane=np.where(hit, out[:, 3], nan).reshape(H, Wd),
        depth_accum=np.where(hit, out[:, 4], nan).reshape(H, Wd),
        normals=out[:, 5:8].reshape(H, Wd, 3),
        alpha=out[:, 8].reshape(H, Wd),
        contributors=Contributors(gid_L, a_L, T_L, T_fin, count, Wd),
        background=bg,
        cache=_Cache(proj, pix, rank, gl, raw),
    )


def render_bruteforce(cloud: GaussianCloud, cam: Camera, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Slow oracle: every Gaussian evaluated at every pixel, no early exit."""
    H, Wd = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    u, v = cam.pixel_grid()
    Wm = cam.R.T
    layers = []
    for i in range(len(cloud)):
        mu, R, S, op, cov = activate(cloud, i)
        t = Wm @ (mu - cam.center)
        if not (cam.near < t[2] < cam.far):
            continue
        J = np.array(
            [
                [cam.fx / t[2], 0.0, -cam.fx * t[0] / t[2] ** 2],
                [0.0, cam.fy / t[2], -cam.fy * t[1] / t[2] ** 2],
            ]
        )
        cov2 = J @ Wm @ cov @ Wm.T @ J.T + COV2D_BLUR * np.eye(2)
        inv = np.linalg.inv(cov2)
        du = u - (cam.fx * t[0] / t[2] + cam.cx)
        dv = v - (cam.fy * t[1] / t[2] + cam.cy)
        maha = inv[0, 0] * du * du + (inv[0, 1] + inv[1, 0]) * du * dv + inv[1, 1] * dv * dv
        a = np.minimum(op * np.exp(-0.5 * maha), ALPHA_MAX)
        a = np.where(a >= ALPHA_MIN, a, 0.0)
        n = R[:, int(np.argmin(np.diag(S)))]
        n_cam = Wm @ n
        if n_cam @ t > 0:
            n_cam = -n_cam
        d = -(n_cam @ t)
        view = mu - cam.center
        Y = sh_basis((view / np.linalg.norm(view))[None], cloud.sh_degree)[0]
        color = np.maximum(Y @ cloud.sh[i] + 0.5, 0.0)
        layers.append((t[2], i, a, color, d, n_cam))
    layers.sort(key=lambda L: (L[0], L[1]))

    T = np.ones((H, Wd))
    color = np.zeros((H, Wd, 3))
    dplane = np.zeros((H, Wd))
    daccum = np.zeros((H, Wd))
    normals = np.zeros((H, Wd, 3))
    acc = np.zeros((H, Wd))
    hit = np.zeros((H, Wd), dtype=bool)
    for z, i, a, c, d, n in layers:
        w = T * a
        color += w[..., None] * c
        dplane += w * d
        daccum += w * z
        normals += w[..., None] * n
        acc += w
        hit |= a > 0
        T = T * (1.0 - a)
    color += T[..., None] * bg
    P = H * Wd
    empty = Contributors(np.full((P, 0), -1), np.zeros((P, 0)), np.zeros((P, 0)), T.ravel(), hit.ravel().astype(np.int64), Wd)
    return RenderOutput(
        color=color,
        depth_plane=np.where(hit, dplane, np.nan),
        depth_accum=np.where(hit, daccum, np.nan),
        normals=normals,
        alpha=acc,
        contributors=empty,
        background=bg,
    )


def _pixel_grads(grads: RenderGrads, H: int, Wd: int) -> np.ndarray:
    P = H * Wd
    G = np.zeros((P, _N_FEAT))

    def put(arr, sl, ch):
        if arr is None:
            return
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape[:2] != (H, Wd):
            raise DimensionMismatch(f"gradient shape {arr.shape} does not match {(H, Wd)}")
        G[:, sl] = np.nan_to_num(arr.reshape(P, ch), nan=0.0)

    put(grads.color, slice(0, 3), 3)
    put(grads.depth_plane, slice(3, 4), 1)
    put(grads.depth_accum, slice(4, 5), 1)
    put(grads.normals, slice(5, 8), 3)
    put(grads.alpha, slice(8, 9), 1)
    return G


def _quat_backward(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = gR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    gy = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    gz = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
        + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    gqn = np.stack([gw, gx, gy, gz], axis=1)
    return (gqn - qn * np.sum(qn * gqn, axis=1, keepdims=True)) / norm


def zero_grads(cloud: GaussianCloud) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in cloud.params().items()}


def render_backward(
    cloud: GaussianCloud,
    cam: Camera,
    output: RenderOutput,
    grads: RenderGrads,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter group of ``cloud``.

    ``grads`` holds the loss derivatives w.r.t. the rendered channels of
    ``output``. Accumulation into Gaussians runs in a fixed order, so the
    result is deterministic.
    """
    H, Wd = cam.height, cam.width
    out = zero_grads(cloud)
    cache = output.cache
    if cache is None:
        proj = project(cloud, cam)
        pix, gl, _, raw = _pairs(proj, Wd)
        counts = np.bincount(pix, minlength=H * Wd)
        rank = np.arange(len(pix)) - (np.cumsum(counts) - counts)[pix]
    else:
        proj, pix, rank, gl, raw = cache
    con = output.contributors
    if len(proj) == 0 or con.gid.shape[1] == 0:
        return out
    G = _pixel_grads(grads, H, Wd)
    F = _features(proj)
    bg9 = np.zeros(_N_FEAT)
    bg9[:3] = output.background

    # pairs that survived early termination, in (pixel, layer) order
    live = con.alpha[pix, rank] > 0.0
    p_idx, k_idx, g, raw = pix[live], rank[live], gl[live], raw[live]
    a_pair = con.alpha[p_idx, k_idx]
    T_pair = con.T[p_idx, k_idx]
    w_pair = T_pair * a_pair
    Gp = G[p_idx]
    dot = np.einsum("nc,nc->n", Gp, F[g])
    # sum over contributors behind each pair of weight * (upstream . feature)
    Q_L = np.zeros(con.alpha.shape)
    Q_L[p_idx, k_idx] = w_pair * dot
    behind = np.zeros(con.alpha.shape)
    if Q_L.shape[1] > 1:
        behind[:, :-1] = np.cumsum(Q_L[:, :0:-1], axis=1)[:, ::-1]
    bg_dot = con.T_final * (G @ bg9)
    dalpha = T_pair * dot - (behind[p_idx, k_idx] + bg_dot[p_idx]) / (1.0 - a_pair)
    m = len(proj)

    def gather(weights):
        return np.bincount(g, weights=weights, minlength=m)

    dF = np.stack([gather(w_pair * Gp[:, c]) for c in range(8)], axis=1)

    dx = (p_idx % Wd) - proj.mean2d[g, 0]
    dy = (p_idx // Wd) - proj.mean2d[g, 1]
    cn = proj.conic[g]
    a, b, c = cn[:, 0], cn[:, 1], cn[:, 2]
    free = raw < ALPHA_MAX
    dpower = np.where(free, dalpha * raw, 0.0)
    d_op = gather(dpower / proj.opacity[g])
    d_u = gather(dpower * (a * dx + b * dy))
    d_v = gather(dpower * (b * dx + c * dy))
    d_a = gather(dpower * (-0.5 * dx * dx))
    d_b = gather(dpower * (-dx * dy))
    d_c = gather(dpower * (-0.5 * dy * dy))

    idx = proj.index
    op = proj.opacity
    out["opacities"][idx] = d_op * op * (1.0 - op)

    # conic -> regularized 2D covariance -> raw 2D covariance
    Q = np.empty((m, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2]
    gQ = np.empty((m, 2, 2))
    gQ[:, 0, 0], gQ[:, 0, 1], gQ[:, 1, 0], gQ[:, 1, 1] = d_a, 0.5 * d_b, 0.5 * d_b, d_c
    g2 = -Q @ gQ @ Q

    Wm = cam.W
    T = proj.J @ Wm
    Mtx = proj.rot * proj.scales[:, None, :]
    V = Mtx @ np.swapaxes(Mtx, 1, 2)
    gV = np.swapaxes(T, 1, 2) @ g2 @ T
    gT = 2.0 * g2 @ T @ V
    gJ = gT @ Wm.T

    t = proj.mean_cam
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cam.fx, cam.fy
    z2 = z * z
    z3 = z2 * z
    gt = np.zeros((m, 3))
    gt[:, 0] = gJ[:, 0, 2] * (-fx / z2) + d_u * fx / z
    gt[:, 1] = gJ[:, 1, 2] * (-fy / z2) + d_v * fy / z
    gt[:, 2] = (
        gJ[:, 0, 0] * (-fx / z2)
        + gJ[:, 0, 2] * (2 * fx * x / z3)
        + gJ[:, 1, 1] * (-fy / z2)
        + gJ[:, 1, 2] * (2 * fy * y / z3)
        - d_u * fx * x / z2
        - d_v * fy * y / z2
    )
    gt[:, 2] += dF[:, 4]
    n_cam = proj.normal
    gt -= dF[:, 3:4] * n_cam
    g_ncam = dF[:, 5:8] - dF[:, 3:4] * t
    g_nworld = proj.flip[:, None] * (g_ncam @ Wm)

    g_mu = gt @ Wm

    # colours
    g_col = np.where(proj.color_raw > 0.0, dF[:, 0:3], 0.0)
    out["sh"][idx] = proj.sh_Y[:, :, None] * g_col[:, None, :]
    if cloud.sh_degree > 0:
        vv = proj.view_vec
        dist = np.linalg.norm(vv, axis=1, keepdims=True)
        dirs = vv / dist
        _, dY = sh_basis(dirs, cloud.sh_degree, with_grad=True)
        coef_dot = np.einsum("mkc,mc->mk", cloud.sh[idx], g_col)
        g_dir = np.einsum("mk,mkj->mj", coef_dot, dY)
        g_mu += (g_dir - dirs * np.sum(dirs * g_dir, axis=1, keepdims=True)) / dist
    out["means"][idx] = g_mu

    # covariance -> rotation and scales
    gM = 2.0 * gV @ Mtx
    gR = gM * proj.scales[:, None, :]
    gR[np.arange(m), :, proj.axis] += g_nworld
    g_s = np.einsum("mij,mij->mj", proj.rot, gM)
    out["log_scales"][idx] = g_s * proj.scales
    out["quats"][idx] = _quat_backward(cloud.quats[idx], gR)
    return out
