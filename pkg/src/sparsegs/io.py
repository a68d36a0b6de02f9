"""File codecs: binary PLY (points and Gaussians), PFM, PPM and camera JSON.

Writers go through a temporary file in the target directory followed by an
atomic rename, so a failed write never leaves a partial file behind.
"""
from __future__ import annotations

import json
import os
import re
import tempfile
from contextlib import contextmanager
from typing import NamedTuple, Optional

import numpy as np

from .core import Camera, GaussianCloud, check_rotation
from .errors import (
    MalformedHeader,
    MissingProperty,
    NonFiniteScale,
    NonOrthonormalRotation,
    SchemaError,
    TruncatedData,
    UnsupportedFormat,
    ValueRange,
)

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@contextmanager
def atomic_write(path):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


# -- PLY -------------------------------------------------------------------------


class PointSet(NamedTuple):
    points: np.ndarray  # (N, 3) float32
    colors: np.ndarray  # (N, 3) uint8
    confidence: np.ndarray  # (N,) float32


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MalformedHeader("not a PLY file or missing end_header")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise MalformedHeader("header not terminated")
    body_start = nl + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()[1:]
    fmt = None
    elements = []
    for line in lines:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2:
                raise MalformedHeader("bad format line")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise MalformedHeader(f"bad element line: {line!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MalformedHeader("property before any element")
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], None))
                continue
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise MalformedHeader(f"bad property line: {line!r}")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise MalformedHeader(f"unexpected header line: {line!r}")
    if fmt is None:
        raise MalformedHeader("missing format line")
    if fmt != "binary_little_endian":
        raise UnsupportedFormat(f"only binary_little_endian PLY is supported, got {fmt}")
    return elements, body_start


def _read_ply_vertices(path) -> np.ndarray:
    data = _read_bytes(path)
    elements, offset = _parse_ply_header(data)
    for name, count, props in elements:
        if any(t is None for _, t in props):
            if name == "vertex":
                raise UnsupportedFormat("list properties on vertices are not supported")
            raise UnsupportedFormat(f"cannot skip list element {name!r} before vertices")
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        size = dtype.itemsize * count
        if len(data) - offset < size:
            raise TruncatedData(f"element {name!r} needs {size} bytes, {len(data) - offset} available")
        if name == "vertex":
            return np.frombuffer(data, dtype=dtype, count=count, offset=offset).copy()
        offset += size
    raise MissingProperty("no vertex element")


def _require(arr: np.ndarray, names):
    missing = [n for n in names if n not in arr.dtype.names]
    if missing:
        raise MissingProperty(f"missing vertex properties: {missing}")


def read_ply_points(path) -> PointSet:
    v = _read_ply_vertices(path)
    _require(v, ("x", "y", "z", "red", "green", "blue"))
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float32)
    cols = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.uint8)
    if "confidence" in v.dtype.names:
        conf = v["confidence"].astype(np.float32)
    else:
        conf = np.ones(len(v), dtype=np.float32)
    return PointSet(pts, cols, conf)


def _ply_bytes(arrays: dict, types: dict) -> bytes:
    n = len(next(iter(arrays.values())))
    dtype = np.dtype([(k, "<" + types[k]) for k in arrays])
    rec = np.empty(n, dtype=dtype)
    for k, a in arrays.items():
        rec[k] = a
    inv = {"f4": "float", "f8": "double", "u1": "uchar"}
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {inv[types[k]]} {k}" for k in arrays]
    header.append("end_header")
    return ("\n".join(header) + "\n").encode("ascii") + rec.tobytes()


def write_ply_points(path, points, colors, confidence: Optional[np.ndarray] = None) -> None:
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    colors = np.asarray(colors)
    if colors.dtype != np.uint8:
        colors = np.clip(np.round(np.asarray(colors, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    colors = colors.reshape(-1, 3)
    arrays = {"x": points[:, 0], "y": points[:, 1], "z": points[:, 2],
              "red": colors[:, 0], "green": colors[:, 1], "blue": colors[:, 2]}
    types = {"x": "f4", "y": "f4", "z": "f4", "red": "u1", "green": "u1", "blue": "u1"}
    if confidence is not None:
        arrays["confidence"] = np.asarray(confidence, dtype=np.float32).reshape(-1)
        types["confidence"] = "f4"
    with atomic_write(path) as fh:
        fh.write(_ply_bytes(arrays, types))


def write_gaussian_ply(path, cloud: GaussianCloud) -> None:
    """Gaussian cloud in the common splatting layout (float32 properties)."""
    n = len(cloud)
    if cloud.sh.shape[1] == 0:
        raise SchemaError("cloud has no SH coefficients")
    arrays = {"x": cloud.means[:, 0], "y": cloud.means[:, 1], "z": cloud.means[:, 2]}
    for c in range(3):
        arrays[f"f_dc_{c}"] = cloud.sh[:, 0, c]
    rest = np.transpose(cloud.sh[:, 1:, :], (0, 2, 1)).reshape(n, -1)
    for j in range(rest.shape[1]):
        arrays[f"f_rest_{j}"] = rest[:, j]
    arrays["opacity"] = cloud.opacities
    for j in range(3):
        arrays[f"scale_{j}"] = cloud.log_scales[:, j]
    for j in range(4):
        arrays[f"rot_{j}"] = cloud.quats[:, j]
    with atomic_write(path) as fh:
        fh.write(_ply_bytes(arrays, {name: "f4" for name in arrays}))


def read_gaussian_ply(path) -> GaussianCloud:
    v = _read_ply_vertices(path)
    _require(v, ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                 "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"))
    n = len(v)
    n_rest = len([name for name in v.dtype.names if name.startswith("f_rest_")])
    if n_rest % 3 or (n_rest // 3 + 1) not in (1, 4, 9, 16):
        raise SchemaError(f"unexpected number of f_rest properties: {n_rest}")
    k = n_rest // 3 + 1
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = np.stack([v[f"f_dc_{c}"] for c in range(3)], axis=1)
    if n_rest:
        rest = np.stack([v[f"f_rest_{j}"] for j in range(n_rest)], axis=1).reshape(n, 3, k - 1)
        sh[:, 1:, :] = np.transpose(rest, (0, 2, 1))
    f64 = lambda names: np.stack([v[s].astype(np.float64) for s in names], axis=1)  # noqa: E731
    return GaussianCloud(
        means=f64(["x", "y", "z"]),
        quats=f64([f"rot_{j}" for j in range(4)]),
        log_scales=f64([f"scale_{j}" for j in range(3)]),
        opacities=v["opacity"].astype(np.float64),
        sh=sh,
    )


# -- PFM -------------------------------------------------------------------------


def write_pfm(path, values, little_endian: bool = True) -> None:
    """Float map (``(H, W)`` as "Pf" or ``(H, W, 3)`` as "PF"), rows bottom-up."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim == 2:
        magic = b"Pf"
    elif values.ndim == 3 and values.shape[2] == 3:
        magic = b"PF"
    else:
        raise UnsupportedFormat(f"PFM holds 1 or 3 channels, got shape {values.shape}")
    h, w = values.shape[:2]
    scale = b"-1.0" if little_endian else b"1.0"
    body = np.flipud(values).astype("<f4" if little_endian else ">f4").tobytes()
    with atomic_write(path) as fh:
        fh.write(magic + b"\n" + f"{w} {h}\n".encode() + scale + b"\n" + body)


def read_pfm(path) -> np.ndarray:
    data = _read_bytes(path)
    parts = []
    pos = 0
    for _ in range(3):
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise MalformedHeader("PFM header is incomplete")
        parts.append(data[pos:nl].decode("ascii", errors="replace").strip())
        pos = nl + 1
    magic, dims, scale_s = parts
    if magic not in ("Pf", "PF"):
        raise MalformedHeader(f"bad PFM magic {magic!r}")
    m = re.fullmatch(r"(\d+)\s+(\d+)", dims)
    if not m:
        raise MalformedHeader(f"bad PFM dimensions {dims!r}")
    w, h = int(m.group(1)), int(m.group(2))
    try:
        scale = float(scale_s)
    except ValueError:
        raise MalformedHeader(f"bad PFM scale {scale_s!r}") from None
    if not np.isfinite(scale) or scale == 0.0:
        raise NonFiniteScale(f"PFM scale must be finite and non-zero, got {scale_s!r}")
    ch = 3 if magic == "PF" else 1
    count = w * h * ch
    if len(data) - pos < 4 * count:
        raise TruncatedData(f"PFM body needs {4 * count} bytes, {len(data) - pos} available")
    arr = np.frombuffer(data, dtype="<f4" if scale < 0 else ">f4", count=count, offset=pos)
    arr = arr.astype(np.float32).reshape((h, w, 3) if ch == 3 else (h, w))
    return np.flipud(arr).copy()


# -- PPM -------------------------------------------------------------------------


def write_ppm(path, image) -> None:
    """8-bit binary PPM; float images in [0, 1] are rounded to 0..255."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise UnsupportedFormat(f"PPM needs an (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    with atomic_write(path) as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes())


def read_ppm_bytes(path) -> np.ndarray:
    data = _read_bytes(path)
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise MalformedHeader("PPM header is incomplete")
        if data[pos : pos + 1] == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii", errors="replace"))
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = tokens
    if magic != "P6":
        raise UnsupportedFormat(f"only binary P6 PPM is supported, got {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise MalformedHeader("non-integer PPM header field") from None
    if maxval != 255:
        raise UnsupportedFormat(f"only 8-bit PPM is supported (maxval {maxval})")
    n = w * h * 3
    if len(data) - pos < n:
        raise TruncatedData(f"PPM body needs {n} bytes, {len(data) - pos} available")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).reshape(h, w, 3).copy()


def read_ppm(path) -> np.ndarray:
    """PPM image as float64 in [0, 1]."""
    return read_ppm_bytes(path).astype(np.float64) / 255.0


# -- camera JSON -----------------------------------------------------------------

_CAMERA_KEYS = ("width", "height", "fx", "fy", "cx", "cy", "R", "t", "near", "far")
ROTATION_LOAD_TOL = 1e-6


def camera_to_dict(cam: Camera) -> dict:
    return {
        "width": cam.width,
        "height": cam.height,
        "fx": float(cam.fx),
        "fy": float(cam.fy),
        "cx": float(cam.cx),
        "cy": float(cam.cy),
        "R": [float(x) for x in cam.R.reshape(-1)],
        "t": [float(x) for x in cam.center],
        "near": float(cam.near),
        "far": float(cam.far),
    }


def camera_from_dict(d: dict) -> Camera:
    if not isinstance(d, dict):
        raise SchemaError("camera entry must be an object")
    missing = [k for k in _CAMERA_KEYS if k not in d]
    if missing:
        raise SchemaError(f"camera is missing keys {missing}")
    extra = set(d) - set(_CAMERA_KEYS)
    if extra:
        raise SchemaError(f"unknown camera keys {sorted(extra)}")
    for k in ("width", "height"):
        if not isinstance(d[k], int) or isinstance(d[k], bool):
            raise SchemaError(f"{k} must be an integer")
    for k in ("fx", "fy", "cx", "cy", "near", "far"):
        if not isinstance(d[k], (int, float)) or isinstance(d[k], bool):
            raise SchemaError(f"{k} must be a number")
    for k, n in (("R", 9), ("t", 3)):
        v = d[k]
        if not isinstance(v, list) or len(v) != n or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in v
        ):
            raise SchemaError(f"{k} must be a list of {n} numbers")
    R = np.array(d["R"], dtype=np.float64).reshape(3, 3)
    if not check_rotation(R, ROTATION_LOAD_TOL):
        raise NonOrthonormalRotation("R is not a proper rotation within 1e-6")
    if not check_rotation(R):
        U, _, Vt = np.linalg.svd(R)
        R = U @ Vt
    if d["width"] < 1 or d["height"] < 1 or d["fx"] <= 0 or d["fy"] <= 0 or not 0 < d["near"] < d["far"]:
        raise ValueRange("camera intrinsics or clip planes out of range")
    return Camera(d["width"], d["height"], d["fx"], d["fy"], d["cx"], d["cy"], R, d["t"], d["near"], d["far"])


def cameras_to_json(cams) -> str:
    if isinstance(cams, Camera):
        return json.dumps(camera_to_dict(cams))
    return json.dumps([camera_to_dict(c) for c in cams])


def cameras_from_json(text: str) -> list[Camera]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from None
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise SchemaError("camera file must hold an object or a list of objects")
    return [camera_from_dict(d) for d in data]


def write_cameras(path, cams) -> None:
    with atomic_write(path) as fh:
        fh.write(cameras_to_json(cams).encode("utf-8"))


def read_cameras(path) -> list[Camera]:
    with open(path, "r", encoding="utf-8") as fh:
        return cameras_from_json(fh.read())


def read_camera_ref(ref: str) -> Camera:
    """Resolve ``path.json#i`` (index defaults to 0)."""
    path, _, idx = ref.partition("#")
    cams = read_cameras(path)
    i = int(idx) if idx else 0
    if not -len(cams) <= i < len(cams):
        raise ValueRange(f"camera index {i} out of range for {len(cams)} cameras")
    return cams[i]
