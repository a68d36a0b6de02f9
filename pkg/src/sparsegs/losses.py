"""Training losses and their gradients w.r.t. the rendered maps."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .core import GaussianCloud, TrainConfig
from .errors import DimensionMismatch, EmptyCloud
from .metrics import ssim_backward, ssim_terms
from .raster import RenderGrads, RenderOutput


class LossTerm(NamedTuple):
    value: float
    grad: Optional[np.ndarray]
    degenerate: bool = False


def _same_shape(*arrays):
    shapes = {np.shape(a)[:2] for a in arrays if a is not None}
    if len(shapes) > 1:
        raise DimensionMismatch(f"map sizes differ: {sorted(shapes)}")


# -- photometric ---------------------------------------------------------------


def photometric_loss_grad(render, gt, lam: float = 0.2, mask=None) -> LossTerm:
    """``(1 - lam) * L1 + lam * (1 - SSIM) / 2``, optionally restricted to ``mask``."""
    render = np.asarray(render, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if render.shape != gt.shape:
        raise DimensionMismatch(f"image shapes differ: {render.shape} vs {gt.shape}")
    C = render.shape[2] if render.ndim == 3 else 1
    if mask is None:
        weights = np.ones(render.shape[:2])
    else:
        weights = np.asarray(mask, dtype=np.float64)
        _same_shape(render, weights)
    n = weights.sum() * C
    if n == 0:
        return LossTerm(0.0, np.zeros_like(render), True)
    w = weights[..., None] if render.ndim == 3 else weights
    diff = render - gt
    l1 = float(np.sum(w * np.abs(diff)) / n)
    g_l1 = w * np.sign(diff) / n
    if lam == 0.0:
        return LossTerm((1.0 - lam) * l1, (1.0 - lam) * g_l1)
    terms = ssim_terms(render, gt)
    up = np.broadcast_to(w if render.ndim == 3 else w[..., None], terms.ssim.shape) / n
    ssim_val = float(np.sum(up * terms.ssim))
    g_ssim = ssim_backward(render, gt, terms, up)
    if render.ndim == 2:
        g_ssim = g_ssim[..., 0]
    value = (1.0 - lam) * l1 + lam * (1.0 - ssim_val) / 2.0
    return LossTerm(value, (1.0 - lam) * g_l1 - 0.5 * lam * g_ssim)


def photometric_loss(render, gt, lam: float = 0.2, mask=None) -> float:
    return photometric_loss_grad(render, gt, lam, mask).value


# -- scale ---------------------------------------------------------------------


def scale_loss_grad(cloud: GaussianCloud) -> LossTerm:
    """Mean over Gaussians of the smallest activated scale; grad w.r.t. log-scales."""
    if len(cloud) == 0:
        raise EmptyCloud("scale loss needs at least one Gaussian")
    s = cloud.scales
    k = np.argmin(s, axis=1)
    rows = np.arange(len(s))
    smin = s[rows, k]
    grad = np.zeros_like(s)
    grad[rows, k] = smin / len(s)
    return LossTerm(float(np.mean(np.abs(smin))), grad)


def scale_loss(cloud: GaussianCloud) -> float:
    return scale_loss_grad(cloud).value


# -- confidence-aware Pearson depth --------------------------------------------


@dataclass
class WeightedMoments:
    mu_p: float
    mu_t: float
    p_conf: float
    weight_sum: float
    var_p: float
    var_t: float
    degenerate: bool


def _pearson_inputs(D_p, D_t, C):
    D_p = np.asarray(D_p, dtype=np.float64)
    D_t = np.asarray(D_t, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    _same_shape(D_p, D_t, C)
    if not (D_p.shape == D_t.shape == C.shape):
        raise DimensionMismatch("depth and confidence maps must share a shape")
    valid = np.isfinite(D_p) & np.isfinite(D_t)
    w = np.where(valid, C, 0.0)
    return np.where(valid, D_p, 0.0), np.where(valid, D_t, 0.0), w


def weighted_moments(D_p, D_t, C) -> WeightedMoments:
    x, y, w = _pearson_inputs(D_p, D_t, C)
    return _moments(x, y, w)[0]


def _moments(x, y, w):
    sw = float(w.sum())
    if sw < 1e-9:
        return WeightedMoments(0.0, 0.0, 0.0, sw, 0.0, 0.0, True), None, None, 0.0, 0.0, 0.0
    mu_p = float(np.sum(w * x) / sw)
    mu_t = float(np.sum(w * y) / sw)
    xc = x - mu_p
    yc = y - mu_t
    cov = float(np.sum(w * xc * yc))
    vx = float(np.sum(w * xc * xc))
    vy = float(np.sum(w * yc * yc))
    if vx / sw < 1e-12 or vy / sw < 1e-12:
        return WeightedMoments(mu_p, mu_t, 0.0, sw, vx / sw, vy / sw, True), xc, yc, cov, vx, vy
    p = cov / np.sqrt(vx * vy)
    return WeightedMoments(mu_p, mu_t, float(p), sw, vx / sw, vy / sw, False), xc, yc, cov, vx, vy


def pearson_depth_loss_grad(D_p, D_t, C) -> LossTerm:
    """``1 - P_conf`` with its gradient w.r.t. the predicted depth ``D_p``.

    NaN in either depth map zeroes that pixel's weight. Degenerate input
    (no weight or no variance) returns 0 with ``degenerate=True``.
    """
    x, y, w = _pearson_inputs(D_p, D_t, C)
    mom, xc, yc, cov, vx, vy = _moments(x, y, w)
    if mom.degenerate:
        return LossTerm(0.0, np.zeros_like(x), True)
    sq = np.sqrt(vx * vy)
    dP = w * (yc / sq - cov * xc / (vx * sq))
    value = float(np.clip(1.0 - mom.p_conf, 0.0, 2.0))
    return LossTerm(value, -dP)


def pearson_depth_loss(D_p, D_t, C) -> float:
    return pearson_depth_loss_grad(D_p, D_t, C).value


# -- normals -------------------------------------------------------------------


def normal_loss_grad(N_p, N_t, mask) -> LossTerm:
    """Mean over mask pixels of ``||N_t - N_p||_1``; gradient w.r.t. ``N_p``."""
    N_p = np.asarray(N_p, dtype=np.float64)
    N_t = np.asarray(N_t, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if N_p.shape != N_t.shape or N_p.shape[:2] != mask.shape:
        raise DimensionMismatch("normal maps and mask must share a size")
    count = int(mask.sum())
    if count == 0:
        return LossTerm(0.0, np.zeros_like(N_p), True)
    diff = N_p - N_t
    m = mask[..., None]
    value = float(np.sum(np.abs(diff) * m) / count)
    return LossTerm(value, np.where(m, np.sign(diff), 0.0) / count)


def normal_loss(N_p, N_t, mask) -> float:
    return normal_loss_grad(N_p, N_t, mask).value


# -- composition ----------------------------------------------------------------


@dataclass
class ViewTarget:
    """Supervision for one rendered view.

    A real view carries the image plus optional estimated z-depth,
    confidence and target normals; a pseudo view sets ``pseudo_mask`` to the
    valid warp pixels and is only supervised photometrically. When
    ``plane_depth`` is set, plane-distance Pearson supervision uses it in
    place of ``depth``.
    """

    image: np.ndarray
    depth: Optional[np.ndarray] = None
    confidence: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    normal_mask: Optional[np.ndarray] = None
    pseudo_mask: Optional[np.ndarray] = None
    plane_depth: Optional[np.ndarray] = None

    @property
    def is_pseudo(self) -> bool:
        return self.pseudo_mask is not None


@dataclass
class TotalLoss:
    total: float
    terms: dict = field(default_factory=dict)
    render_grads: list = field(default_factory=list)
    param_grads: dict = field(default_factory=dict)


def total_loss(renders, targets, cfg: TrainConfig, cloud: Optional[GaussianCloud] = None) -> TotalLoss:
    """Weighted sum of every configured loss term over a bundle of views.

    ``terms`` holds the already weighted contributions; they sum to ``total``.
    """
    renders = list(renders)
    targets = list(targets)
    terms = {"photometric": 0.0, "depth": 0.0, "normal": 0.0, "scale": 0.0, "pseudo": 0.0}
    grads = []
    for out, tgt in zip(renders, targets):
        g = RenderGrads()
        if tgt.is_pseudo:
            if cfg.w_pseudo > 0:
                t = photometric_loss_grad(out.color, tgt.image, cfg.lambda_dssim, tgt.pseudo_mask)
                terms["pseudo"] += cfg.w_pseudo * t.value
                g.color = cfg.w_pseudo * t.grad
            grads.append(g)
            continue
        t = photometric_loss_grad(out.color, tgt.image, cfg.lambda_dssim)
        terms["photometric"] += t.value
        g.color = t.grad
        if cfg.w_depth > 0 and tgt.depth is not None:
            conf = tgt.confidence if tgt.confidence is not None else np.ones(tgt.depth.shape)
            plane = cfg.depth_source == "plane"
            d_p = out.depth_plane if plane else out.depth_accum
            d_t = tgt.plane_depth if plane and tgt.plane_depth is not None else tgt.depth
            t = pearson_depth_loss_grad(d_p, d_t, conf)
            terms["depth"] += cfg.w_depth * t.value
            if plane:
                g.depth_plane = cfg.w_depth * t.grad
            else:
                g.depth_accum = cfg.w_depth * t.grad
        if cfg.w_normal > 0 and tgt.normals is not None:
            mask = tgt.normal_mask if tgt.normal_mask is not None else np.ones(tgt.normals.shape[:2], bool)
            t = normal_loss_grad(out.normals, tgt.normals, mask)
            terms["normal"] += cfg.w_normal * t.value
            g.normals = cfg.w_normal * t.grad
        grads.append(g)
    param_grads = {}
    if cfg.w_scale > 0 and cloud is not None and len(cloud) > 0:
        t = scale_loss_grad(cloud)
        terms["scale"] = cfg.w_scale * t.value
        param_grads["log_scales"] = cfg.w_scale * t.grad
    total = float(sum(terms.values()))
    return TotalLoss(total, terms, grads, param_grads)
