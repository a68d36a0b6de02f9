"""Image and trajectory metrics: PSNR, SSIM, ATE report."""
from __future__ import annotations

import json
from typing import NamedTuple

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionMismatch, LengthMismatch
from .geometry import ate

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


_WINDOW = gaussian_window()


def blur(img: np.ndarray) -> np.ndarray:
    """Separable 11x11 Gaussian filter over the two image axes, zero padded."""
    out = correlate1d(img, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WINDOW, axis=1, mode="constant", cval=0.0)


class SSIMTerms(NamedTuple):
    ssim: np.ndarray
    mu_x: np.ndarray
    mu_y: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    B1: np.ndarray
    B2: np.ndarray


def _as_image(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[..., None] if a.ndim == 2 else a


def ssim_terms(x: np.ndarray, y: np.ndarray) -> SSIMTerms:
    """Per-pixel, per-channel SSIM map and the moments it was built from."""
    x = _as_image(x)
    y = _as_image(y)
    if x.shape != y.shape:
        raise DimensionMismatch(f"image shapes differ: {x.shape} vs {y.shape}")
    C1 = SSIM_K1**2
    C2 = SSIM_K2**2
    mu_x = blur(x)
    mu_y = blur(y)
    sxx = blur(x * x) - mu_x * mu_x
    syy = blur(y * y) - mu_y * mu_y
    sxy = blur(x * y) - mu_x * mu_y
    A1 = 2.0 * mu_x * mu_y + C1
    A2 = 2.0 * sxy + C2
    B1 = mu_x * mu_x + mu_y * mu_y + C1
    B2 = sxx + syy + C2
    return SSIMTerms((A1 * A2) / (B1 * B2), mu_x, mu_y, A1, A2, B1, B2)


def ssim_backward(x: np.ndarray, y: np.ndarray, terms: SSIMTerms, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(upstream * ssim_map)`` w.r.t. ``x``."""
    x = _as_image(x)
    y = _as_image(y)
    S = terms.ssim
    dS_dmu = S * (2.0 * terms.mu_y / terms.A1 - 2.0 * terms.mu_x / terms.B1)
    dS_dsxx = -S / terms.B2
    dS_dsxy = 2.0 * S / terms.A2
    U = upstream
    g_mu = blur(U * (dS_dmu - 2.0 * terms.mu_x * dS_dsxx - terms.mu_y * dS_dsxy))
    return g_mu + 2.0 * x * blur(U * dS_dsxx) + y * blur(U * dS_dsxy)


def ssim(a, b) -> float:
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5)."""
    return float(np.mean(ssim_terms(a, b).ssim))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; ``inf`` when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def eval_report(renders, gts, traj_est=None, traj_gt=None, names=None) -> dict:
    """Per-view PSNR/SSIM plus trajectory ATE, in the JSON report layout."""
    renders = list(renders)
    gts = list(gts)
    if len(renders) != len(gts):
        raise LengthMismatch(f"{len(renders)} renders vs {len(gts)} ground-truth images")
    if names is None:
        names = [f"view_{i:03d}" for i in range(len(renders))]
    elif len(names) != len(renders):
        raise LengthMismatch("names and renders differ in length")
    views = [
        {"name": str(n), "psnr_db": psnr(r, g), "ssim": ssim(r, g), "lpips": None}
        for n, r, g in zip(names, renders, gts)
    ]
    ate_mean = ate_rmse = None
    if traj_est is not None or traj_gt is not None:
        ate_mean, ate_rmse = ate(traj_est, traj_gt)
    return {
        "views": views,
        "mean_psnr_db": float(np.mean([v["psnr_db"] for v in views])) if views else None,
        "mean_ssim": float(np.mean([v["ssim"] for v in views])) if views else None,
        "ate_mean": ate_mean,
        "ate_rmse": ate_rmse,
    }


def report_json(report: dict) -> str:
    # +inf PSNR is written as the JSON extension token Infinity
    return json.dumps(report, indent=2)


def report_table(report: dict) -> str:
    rows = [("view", "PSNR [dB]", "SSIM")]
    rows += [(v["name"], f"{v['psnr_db']:.3f}", f"{v['ssim']:.4f}") for v in report["views"]]
    if report["views"]:
        rows.append(("mean", f"{report['mean_psnr_db']:.3f}", f"{report['mean_ssim']:.4f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows]
    if report["ate_mean"] is not None:
        lines.append(f"ATE mean {report['ate_mean']:.6f}  rmse {report['ate_rmse']:.6f}")
    return "\n".join(lines)
