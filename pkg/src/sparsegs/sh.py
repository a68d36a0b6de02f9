"""Real spherical-harmonics basis (degree <= 3) with its direction Jacobian."""
import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sh_basis(dirs: np.ndarray, degree: int, with_grad: bool = False):
    """Evaluate the basis at unit directions ``(M, 3)``.

    Returns ``Y`` of shape ``(M, K)`` and, if requested, ``dY`` of shape
    ``(M, K, 3)`` holding the partial derivatives w.r.t. ``(x, y, z)`` of the
    (unnormalized) direction.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    m = len(dirs)
    k = (degree + 1) ** 2
    Y = np.zeros((m, k))
    dY = np.zeros((m, k, 3)) if with_grad else None
    Y[:, 0] = C0
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        Y[:, 1] = -C1 * y
        Y[:, 2] = C1 * z
        Y[:, 3] = -C1 * x
        if with_grad:
            dY[:, 1, 1] = -C1
            dY[:, 2, 2] = C1
            dY[:, 3, 0] = -C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        Y[:, 4] = C2[0] * x * y
        Y[:, 5] = C2[1] * y * z
        Y[:, 6] = C2[2] * (2 * zz - xx - yy)
        Y[:, 7] = C2[3] * x * z
        Y[:, 8] = C2[4] * (xx - yy)
        if with_grad:
            dY[:, 4] = C2[0] * np.stack([y, x, 0 * x], -1)
            dY[:, 5] = C2[1] * np.stack([0 * x, z, y], -1)
            dY[:, 6] = C2[2] * np.stack([-2 * x, -2 * y, 4 * z], -1)
            dY[:, 7] = C2[3] * np.stack([z, 0 * x, x], -1)
            dY[:, 8] = C2[4] * np.stack([2 * x, -2 * y, 0 * x], -1)
    if degree >= 3:
        zero = 0 * x
        Y[:, 9] = C3[0] * y * (3 * xx - yy)
        Y[:, 10] = C3[1] * x * y * z
        Y[:, 11] = C3[2] * y * (4 * zz - xx - yy)
        Y[:, 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        Y[:, 13] = C3[4] * x * (4 * zz - xx - yy)
        Y[:, 14] = C3[5] * z * (xx - yy)
        Y[:, 15] = C3[6] * x * (xx - 3 * yy)
        if with_grad:
            dY[:, 9] = C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], -1)
            dY[:, 10] = C3[1] * np.stack([y * z, x * z, x * y], -1)
            dY[:, 11] = C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], -1)
            dY[:, 12] = C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], -1)
            dY[:, 13] = C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], -1)
            dY[:, 14] = C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], -1)
            dY[:, 15] = C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], -1)
    return (Y, dY) if with_grad else Y


def rgb_to_dc(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / C0


def dc_to_rgb(dc: np.ndarray) -> np.ndarray:
    return np.asarray(dc, dtype=np.float64) * C0 + 0.5
