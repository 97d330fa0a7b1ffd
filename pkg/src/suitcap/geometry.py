"""Camera model, reprojection errors, and 4-point homographies.

Conventions used throughout the package:

* world units are millimeters, image units are pixels,
* image y grows downward,
* quaternions are (w, x, y, z) and rotate world points into the camera frame,
* distortion is the 5-coefficient radial-tangential model (k1, k2, p1, p2, k3);
  all-zero coefficients give a pure pinhole camera.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, DegenerateQuad, NonPositiveDepth, PointAtInfinity

__all__ = [
    "Camera",
    "CameraRig",
    "Homography",
    "project",
    "project_many",
    "reprojection_error",
    "homography_from_4pts",
    "warp_point",
    "quat_to_rot",
    "quat_mul",
    "quat_from_rotvec",
    "quat_normalize",
    "load_calibration",
    "save_calibration",
]


# ---------------------------------------------------------------------------
# quaternions


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rot(q):
    """Rotation matrix of a unit quaternion (w, x, y, z). Supports leading batch dims."""
    q = np.asarray(q, dtype=float)
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


def quat_mul(a, b):
    """Hamilton product a*b, batched."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_from_rotvec(v):
    """Exponential map: rotation vector (batched) to unit quaternion."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = angle < 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(small, 0.5, np.sin(half) / np.where(small, 1.0, angle))
    q = np.concatenate([np.cos(half), s * v], axis=-1)
    return q


def rot_to_quat(R):
    """Unit quaternion (w, x, y, z) of a single rotation matrix."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# cameras


@dataclass
class Camera:
    """One calibrated camera.

    Parameters
    ----------
    id : int
        Small unique integer identifying the camera in the rig.
    intrinsics : (3, 3) array
        Upper-triangular K with positive focal entries, in pixels.
    distortion : (5,) array
        Radial-tangential coefficients (k1, k2, p1, p2, k3).
    rotation : (4,) array
        Unit quaternion (w, x, y, z) rotating world into camera frame.
    translation : (3,) array
        Camera-frame translation in millimeters: X_cam = R @ X_world + t.
    image_size : (width, height)
        Image size in pixels.
    """

    id: int
    intrinsics: np.ndarray
    distortion: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]
    rot: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=float).reshape(3, 3)
        self.distortion = np.asarray(self.distortion, dtype=float).reshape(5)
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(4)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation quaternion must be unit norm")
        K = self.intrinsics
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise ValueError("K must be upper-triangular with K[2,2] == 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if self.image_size[0] <= 0 or self.image_size[1] <= 0:
            raise ValueError("image size must be positive")
        self.rot = quat_to_rot(self.rotation)
        for a in (self.intrinsics, self.distortion, self.rotation, self.translation, self.rot):
            a.setflags(write=False)

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rot.T @ self.translation

    def has_distortion(self):
        return bool(np.any(self.distortion != 0.0))


@dataclass
class CameraRig:
    """Ordered collection of cameras with unique ids. World units are millimeters."""

    cameras: list[Camera]

    def __post_init__(self):
        ids = [c.id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise ValueError("camera ids must be unique")
        self._by_id = {c.id: c for c in self.cameras}

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def camera(self, cam_id: int) -> Camera:
        return self._by_id[cam_id]


def distort_normalized(xn, dist):
    """Apply radial-tangential distortion to normalized coordinates, batched (..., 2)."""
    k1, k2, p1, p2, k3 = dist
    x, y = xn[..., 0], xn[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
    yd = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
    return np.stack([xd, yd], axis=-1)


def undistort_normalized(xd, dist, iterations: int = 12):
    """Invert the distortion polynomial by fixed-point iteration."""
    if not np.any(np.asarray(dist) != 0.0):
        return np.asarray(xd, dtype=float)
    k1, k2, p1, p2, k3 = dist
    xd = np.asarray(xd, dtype=float)
    x = xd[..., 0].copy()
    y = xd[..., 1].copy()
    for _ in range(iterations):
        r2 = x * x + y * y
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        dx = 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
        dy = p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
        x = (xd[..., 0] - dx) / radial
        y = (xd[..., 1] - dy) / radial
    return np.stack([x, y], axis=-1)


def project_many(camera: Camera, points):
    """Project (N, 3) world points; returns ((N, 2) pixels, (N,) camera-frame depth).

    Does not raise on non-positive depth; callers mask on the returned depth.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    pc = pts @ camera.rot.T + camera.translation
    z = pc[:, 2]
    with np.errstate(invalid="ignore", divide="ignore"):
        xn = pc[:, :2] / z[:, None]
    if camera.has_distortion():
        xn = distort_normalized(xn, camera.distortion)
    K = camera.intrinsics
    u = K[0, 0] * xn[..., 0] + K[0, 1] * xn[..., 1] + K[0, 2]
    v = K[1, 1] * xn[..., 1] + K[1, 2]
    return np.stack([u, v], axis=-1), z


def project(camera: Camera, point):
    """Project one world point to distorted pixel coordinates.

    Raises
    ------
    NonPositiveDepth
        If the point is at or behind the camera plane.
    """
    uv, z = project_many(camera, np.asarray(point, dtype=float).reshape(1, 3))
    if z[0] <= 0:
        raise NonPositiveDepth(f"point has depth {z[0]:.6g} in camera {camera.id}")
    return uv[0]


def reprojection_error(camera: Camera, point, observation) -> float:
    """Euclidean pixel distance between the projection of `point` and `observation`."""
    uv = project(camera, point)
    d = uv - np.asarray(observation, dtype=float).reshape(2)
    return float(np.hypot(d[0], d[1]))


def backproject_ray(camera: Camera, pixel):
    """World-space unit ray direction through a pixel (undistorted)."""
    K = camera.intrinsics
    px = np.asarray(pixel, dtype=float).reshape(-1, 2)
    yn = (px[:, 1] - K[1, 2]) / K[1, 1]
    xn = (px[:, 0] - K[0, 2] - K[0, 1] * yn) / K[0, 0]
    nd = undistort_normalized(np.stack([xn, yn], axis=-1), camera.distortion)
    d_cam = np.concatenate([nd, np.ones((len(nd), 1))], axis=1)
    d_world = d_cam @ camera.rot
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    return d_world


# ---------------------------------------------------------------------------
# homographies


@dataclass
class Homography:
    """3x3 projective map, normalized so H[2,2] == 1 when possible, else unit Frobenius."""

    H: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float).reshape(3, 3)
        if abs(H[2, 2]) > 1e-12:
            H = H / H[2, 2]
        else:
            H = H / np.linalg.norm(H)
        self.H = H
        self.H.setflags(write=False)

    def compose(self, other: "Homography") -> "Homography":
        """self after other: warp(self.compose(other), p) == warp(self, warp(other, p))."""
        return Homography(self.H @ other.H)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.H))


def _collinearity_scale(pts):
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    diag2 = float(np.sum((hi - lo) ** 2))
    return max(diag2, 1e-30)


def _check_no_collinear_triple(pts, name):
    scale = _collinearity_scale(pts)
    idx = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
    for a, b, c in idx:
        v1 = pts[b] - pts[a]
        v2 = pts[c] - pts[a]
        if abs(v1[0] * v2[1] - v1[1] * v2[0]) < 1e-12 * scale:
            raise DegenerateQuad(f"three {name} points are collinear")


def _hartley_normalization(pts):
    centroid = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - centroid) ** 2, axis=1)))
    s = np.sqrt(2.0) / max(rms, 1e-30)
    T = np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])
    return T


def homography_from_4pts(src, dst) -> Homography:
    """Direct linear transform homography mapping four source points to four targets.

    Points are Hartley-normalized before building the 8x9 system; the solution is
    the right singular vector of the smallest singular value.

    Raises
    ------
    DegenerateQuad
        If any three of the source or target points are collinear.
    """
    src = np.asarray(src, dtype=float).reshape(4, 2)
    dst = np.asarray(dst, dtype=float).reshape(4, 2)
    _check_no_collinear_triple(src, "source")
    _check_no_collinear_triple(dst, "target")

    Ts = _hartley_normalization(src)
    Td = _hartley_normalization(dst)
    sh = np.concatenate([src, np.ones((4, 1))], axis=1) @ Ts.T
    dh = np.concatenate([dst, np.ones((4, 1))], axis=1) @ Td.T

    A = np.zeros((8, 9))
    for i in range(4):
        x, y = sh[i, 0], sh[i, 1]
        u, v = dh[i, 0], dh[i, 1]
        A[2 * i] = [-x, -y, -1, 0, 0, 0, u * x, u * y, u]
        A[2 * i + 1] = [0, 0, 0, -x, -y, -1, v * x, v * y, v]
    _, _, vt = np.linalg.svd(A)
    Hn = vt[-1].reshape(3, 3)
    H = Homography(np.linalg.inv(Td) @ Hn @ Ts)

    mapped = np.array([warp_point(H, p) for p in src])
    tol = 1e-9 * (1.0 + np.abs(dst).max())
    if np.abs(mapped - dst).max() > tol:
        raise DegenerateQuad("homography solve did not reproduce the corner mapping")
    return H


def warp_point(h: Homography, p):
    """Apply a projective transform to a 2D point.

    Raises
    ------
    PointAtInfinity
        If the third homogeneous coordinate is within 1e-12 of zero.
    """
    p = np.asarray(p, dtype=float).reshape(2)
    q = h.H @ np.array([p[0], p[1], 1.0])
    if abs(q[2]) <= 1e-12:
        raise PointAtInfinity("warped point has vanishing homogeneous coordinate")
    return q[:2] / q[2]


def warp_points(h: Homography, pts):
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    q = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ h.H.T
    w = q[:, 2]
    if np.any(np.abs(w) <= 1e-12):
        raise PointAtInfinity("warped point has vanishing homogeneous coordinate")
    return q[:, :2] / w[:, None]


# ---------------------------------------------------------------------------
# calibration files

_CALIB_FIELDS = ("id", "K", "dist", "q", "t", "size")


def load_calibration(path) -> CameraRig:
    """Read a JSON calibration file: a list of `{id, K:[9], dist:[5], q:[4], t:[3], size:[2]}`."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CalibrationError(f"cannot read calibration file {path}: {e}") from e
    if not isinstance(raw, list):
        raise CalibrationError("calibration file must contain a JSON array of cameras")
    cameras = []
    for entry in raw:
        missing = [k for k in _CALIB_FIELDS if k not in entry]
        if missing:
            raise CalibrationError(f"camera entry missing fields {missing}")
        if len(entry["dist"]) != 5:
            raise CalibrationError(
                f"unsupported distortion model with {len(entry['dist'])} coefficients (expected 5)"
            )
        if len(entry["K"]) != 9:
            raise CalibrationError("K must have 9 entries")
        try:
            cameras.append(
                Camera(
                    id=int(entry["id"]),
                    intrinsics=np.array(entry["K"], dtype=float).reshape(3, 3),
                    distortion=np.array(entry["dist"], dtype=float),
                    rotation=np.array(entry["q"], dtype=float),
                    translation=np.array(entry["t"], dtype=float),
                    image_size=(entry["size"][0], entry["size"][1]),
                )
            )
        except ValueError as e:
            raise CalibrationError(str(e)) from e
    return CameraRig(cameras)


def save_calibration(rig: CameraRig, path) -> None:
    entries = []
    for c in rig:
        entries.append(
            {
                "id": c.id,
                "K": [float(v) for v in c.intrinsics.ravel()],
                "dist": [float(v) for v in c.distortion],
                "q": [float(v) for v in c.rotation],
                "t": [float(v) for v in c.translation],
                "size": [c.image_size[0], c.image_size[1]],
            }
        )
    with open(path, "w", encoding="utf-8") as f:
        json.dump(entries, f)
        f.write("\n")
