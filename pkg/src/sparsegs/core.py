"""Domain types: cameras, Gaussian clouds, training configuration.

Conventions used throughout the package:

* camera frame is right-handed, x right, y down, looking down +z;
* ``Camera.R`` maps camera-frame directions to world, ``Camera.center`` is the
  camera position in world units, so ``x_cam = R.T @ (x_world - center)``;
* pixel centres sit on integer coordinates, ``u`` indexes columns and ``v`` rows;
* images are ``(H, W, 3)`` float arrays, scalar maps ``(H, W)``, normal maps
  ``(H, W, 3)``; invalid depth is ``NaN``;
* quaternions are stored ``(w, x, y, z)``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import SchemaError, UnsupportedOption, ValueRange

ORTHO_TOL = 1e-9


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from ``(..., 4)`` quaternions (normalized first)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    xyzw = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    return np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.abs(R.T @ R - np.eye(3)).max() <= tol and abs(np.linalg.det(R) - 1.0) <= tol)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a camera-to-world rotation and a world-space centre."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        c = np.array(self.center, dtype=np.float64).reshape(3)
        R.flags.writeable = False
        c.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "center", c)
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueRange("width and height must be integers")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.width < 1 or self.height < 1:
            raise ValueRange("width and height must be >= 1")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueRange("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueRange("need 0 < near < far")
        if not np.all(np.isfinite([self.cx, self.cy])) or not np.all(np.isfinite(c)):
            raise ValueRange("principal point and centre must be finite")
        if not check_rotation(R):
            from .errors import NonOrthonormalRotation

            raise NonOrthonormalRotation("camera rotation is not a proper rotation")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def W(self) -> np.ndarray:
        """World-to-camera rotation."""
        return self.R.T

    def replace(self, **changes) -> "Camera":
        return dataclasses.replace(self, **changes)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.R

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.center

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return u, v

    def unproject_depth(self, depth: np.ndarray) -> np.ndarray:
        """Camera-frame points ``(H, W, 3)`` for a z-depth map."""
        u, v = self.pixel_grid()
        z = np.asarray(depth, dtype=np.float64)
        return np.stack([(u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z], axis=-1)

    def project_camera_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        u = self.fx * pts[..., 0] / pts[..., 2] + self.cx
        v = self.fy * pts[..., 1] / pts[..., 2] + self.cy
        return np.stack([u, v], axis=-1)


PARAM_GROUPS = ("means", "quats", "log_scales", "opacities", "sh")


@dataclass
class GaussianCloud:
    """Optimizable set of Gaussians stored in unconstrained parameters.

    ``log_scales`` are exponentiated and ``opacities`` pass through a sigmoid on
    read. ``sh`` has shape ``(N, (L+1)**2, 3)``.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh, dtype=np.float64)
        if sh.ndim == 2:
            sh = sh[:, None, :]
        self.sh = sh.reshape(n, sh.shape[1] if sh.ndim == 3 else -1, 3)
        k = self.sh.shape[1]
        if k not in (1, 4, 9, 16):
            raise ValueRange(f"unsupported SH coefficient count {k}")

    def __len__(self) -> int:
        return len(self.means)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def alphas(self) -> np.ndarray:
        return sigmoid(self.opacities)

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianCloud":
        k = (sh_degree + 1) ** 2
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, k, 3)))

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()})

    def subset(self, keep) -> "GaussianCloud":
        return GaussianCloud(**{k: v[keep].copy() for k, v in self.params().items()})

    def normalize_quats(self) -> None:
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)

    @staticmethod
    def concat(clouds) -> "GaussianCloud":
        clouds = list(clouds)
        return GaussianCloud(**{k: np.concatenate([c.params()[k] for c in clouds]) for k in PARAM_GROUPS})


class Activated(NamedTuple):
    mu: np.ndarray
    R: np.ndarray
    S: np.ndarray
    alpha: float
    cov: np.ndarray


def activate(cloud: GaussianCloud, index: int) -> Activated:
    """Map the stored parameters of one Gaussian to ``(mu, R, S, alpha, Sigma)``."""
    R = quat_to_rotmat(cloud.quats[index])
    S = np.diag(np.exp(cloud.log_scales[index]))
    M = R @ S
    cov = M @ M.T
    alpha = float(sigmoid(cloud.opacities[index]))
    return Activated(cloud.means[index].copy(), R, S, alpha, cov)


@dataclass
class TrainConfig:
    """Loss weights, ablation toggles and optimizer settings for one training run."""

    lambda_dssim: float = 0.2
    w_depth: float = 0.1
    w_normal: float = 0.05
    w_scale: float = 1.0
    w_pseudo: float = 0.1
    conf_threshold: float = 0.2
    depth_source: str = "plane"  # "plane" (plane-distance) or "accum" (accumulated z)
    patch_size: int = 14
    opacity_reset_enabled: bool = False
    opacity_reset_interval: int = 3000
    splitting_enabled: bool = False
    multiview_trim_enabled: bool = False
    densify_interval: int = 100
    densify_from: int = 100
    densify_until: int = 1500
    densify_grad_threshold: float = 2e-4
    prune_interval: int = 100
    prune_opacity: float = 0.005
    iterations: int = 7000
    sh_degree: int = 0
    lr_means: float = 1.6e-4
    lr_quats: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacities: float = 5e-2
    lr_sh: float = 2.5e-3
    means_lr_scaled_by_extent: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        for name in ("lambda_dssim", "w_depth", "w_normal", "w_scale", "w_pseudo"):
            if not getattr(self, name) >= 0:
                raise ValueRange(f"{name} must be >= 0")
        if self.lambda_dssim > 1:
            raise ValueRange("lambda_dssim must lie in [0, 1]")
        if not 0 <= self.conf_threshold <= 1:
            raise ValueRange("conf_threshold must lie in [0, 1]")
        if self.iterations < 0 or int(self.iterations) != self.iterations:
            raise ValueRange("iterations must be a non-negative integer")
        if self.sh_degree not in (0, 1, 2, 3):
            raise ValueRange("sh_degree must be 0..3")
        if self.depth_source not in ("plane", "accum"):
            raise ValueRange("depth_source must be 'plane' or 'accum'")
        if self.threads < 1:
            raise ValueRange("threads must be >= 1")
        if self.multiview_trim_enabled:
            raise UnsupportedOption("multi-view observer trimming is not implemented (always off)")
        self.background = tuple(float(b) for b in self.background)

    def lr(self, group: str) -> float:
        return getattr(self, "lr_" + group)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict, **overrides) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        merged = {**data, **{k: v for k, v in overrides.items() if v is not None}}
        unknown = set(merged) - names
        if unknown:
            raise SchemaError(f"unknown config keys: {sorted(unknown)}")
        return cls(**merged)
