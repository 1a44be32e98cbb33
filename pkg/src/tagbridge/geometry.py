"""Camera model, rotation conventions, projection, and rigid transforms.

Conventions used throughout the toolkit:

* World frame: right-handed, Z up, metric (UTM-style easting/northing/height).
* Rotation angles (omega, phi, kappa) compose as R = Rz(kappa) @ Ry(phi) @ Rx(omega),
  and R maps camera-frame vectors into the world frame.
* Camera frame: +Z is the viewing axis, +X points right (increasing pixel u),
  +Y points down (increasing pixel v).
* Pixel origin at the top-left, pixel centers on integer coordinates.
* Angles are radians in memory; file formats carry degrees (see formats).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DistortionInversionDiverged

logger = logging.getLogger(__name__)

# Depth below which a point counts as behind the camera (meters).
BEHIND_CAMERA_EPS = 1e-9

# Conversion constant shared by all readers/writers so that parsed angles
# survive a write/read cycle bit-exactly.
RAD_PER_DEG = math.pi / 180.0


def _as_vec(x, n, name):
    a = np.asarray(x, dtype=float)
    if a.shape != (n,):
        raise ValueError(f"{name} must be a length-{n} vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    return a


@dataclass(frozen=True)
class CameraIntrinsics:
    """Interior orientation: focal length, principal point, radial distortion.

    f and pixel_pitch are in millimeters; x0/y0 in pixels; k holds the
    radial coefficients (k0, k1, k2, ...) applied to the normalized radius.
    """

    f: float
    pixel_pitch: float
    x0: float
    y0: float
    width: int
    height: int
    k: tuple = ()

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError("focal length must be positive")
        if not self.pixel_pitch > 0:
            raise ValueError("pixel pitch must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("sensor must be at least 1x1 px")
        if not (0 <= self.x0 < self.width and 0 <= self.y0 < self.height):
            raise ValueError("principal point must lie inside the sensor")
        object.__setattr__(self, "k", tuple(float(c) for c in self.k))

    @property
    def focal_px(self) -> float:
        return self.f / self.pixel_pitch

    def in_bounds(self, pixel) -> bool:
        """True when the pixel falls on the physical sensor area."""
        u, v = float(pixel[0]), float(pixel[1])
        return -0.5 <= u < self.width - 0.5 and -0.5 <= v < self.height - 0.5


@dataclass(frozen=True)
class Pose:
    """Exterior orientation: projection center t and angles r = (omega, phi, kappa)."""

    t: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        t = _as_vec(self.t, 3, "t")
        r = _as_vec(self.r, 3, "r")
        t.flags.writeable = False
        r.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "r", r)

    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation matrix."""
        return rotation_from_angles(self.r)


@dataclass(frozen=True)
class RigidTransform:
    """Similarity transform p -> scale * rotation @ p + translation (scale = 1 by default)."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-10:
            raise ValueError("rotation must be orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation must be proper (det +1)")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        t = _as_vec(self.translation, 3, "translation")
        R = R.copy()
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self o other: the transform applying `other` first, then `self`."""
        return RigidTransform(
            rotation=self.rotation @ other.rotation,
            translation=self.scale * self.rotation @ other.translation + self.translation,
            scale=self.scale * other.scale,
        )

    def inverse(self) -> "RigidTransform":
        Rinv = self.rotation.T
        return RigidTransform(
            rotation=Rinv,
            translation=-Rinv @ self.translation / self.scale,
            scale=1.0 / self.scale,
        )

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix with the scale folded into the rotation block."""
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M


@dataclass(frozen=True)
class Ray:
    """World-frame ray with unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = _as_vec(self.origin, 3, "origin")
        d = _as_vec(self.direction, 3, "direction")
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("direction must be a unit vector")
        o.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def point_at(self, s: float) -> np.ndarray:
        return self.origin + s * self.direction


def rotation_from_angles(r) -> np.ndarray:
    """Rotation matrix R = Rz(kappa) @ Ry(phi) @ Rx(omega).

    Accepts a single (omega, phi, kappa) triple or an (N, 3) array of them;
    returns (3, 3) or (N, 3, 3) accordingly.
    """
    r = np.asarray(r, dtype=float)
    single = r.ndim == 1
    angles = np.atleast_2d(r)
    co, so = np.cos(angles[:, 0]), np.sin(angles[:, 0])
    cp, sp = np.cos(angles[:, 1]), np.sin(angles[:, 1])
    ck, sk = np.cos(angles[:, 2]), np.sin(angles[:, 2])
    R = np.empty((angles.shape[0], 3, 3))
    R[:, 0, 0] = ck * cp
    R[:, 0, 1] = -sk * co + ck * sp * so
    R[:, 0, 2] = sk * so + ck * sp * co
    R[:, 1, 0] = sk * cp
    R[:, 1, 1] = ck * co + sk * sp * so
    R[:, 1, 2] = -ck * so + sk * sp * co
    R[:, 2, 0] = -sp
    R[:, 2, 1] = cp * so
    R[:, 2, 2] = cp * co
    return R[0] if single else R


def angles_from_rotation(R: np.ndarray) -> np.ndarray:
    """Inverse of rotation_from_angles (phi in [-pi/2, pi/2]).

    At the gimbal-locked poles (|phi| = 90 deg) omega is set to zero.
    """
    R = np.asarray(R, dtype=float)
    sp = -R[2, 0]
    sp = min(1.0, max(-1.0, sp))
    phi = math.asin(sp)
    if abs(abs(sp) - 1.0) < 1e-12:
        omega = 0.0
        if sp > 0:
            kappa = -math.atan2(R[0, 1], R[0, 2])
        else:
            kappa = math.atan2(-R[0, 1], -R[0, 2])
    else:
        omega = math.atan2(R[2, 1], R[2, 2])
        kappa = math.atan2(R[1, 0], R[0, 0])
    return np.array([omega, phi, kappa])


def distortion_factor(k, r2):
    """Radial scaling 1 + k0 + k1*r^2 + k2*r^4 + ... evaluated at squared radius r2."""
    factor = np.zeros_like(np.asarray(r2, dtype=float))
    for c in reversed(k):
        factor = factor * r2 + c
    return 1.0 + factor


def distort_normalized(k, xy: np.ndarray) -> np.ndarray:
    """Apply the radial model to normalized image coordinates (..., 2)."""
    xy = np.asarray(xy, dtype=float)
    r2 = np.sum(xy * xy, axis=-1, keepdims=True)
    return xy * distortion_factor(k, r2)


def undistort_normalized(k, xy: np.ndarray, max_iter: int = 20, tol: float = 1e-10) -> np.ndarray:
    """Invert distort_normalized by fixed-point iteration.

    Raises DistortionInversionDiverged when the iteration has not converged
    to `tol` (in normalized units) after `max_iter` steps.
    """
    xy = np.asarray(xy, dtype=float)
    if not k:
        return xy.copy()
    und = xy.copy()
    for _ in range(max_iter):
        r2 = np.sum(und * und, axis=-1, keepdims=True)
        new = xy / distortion_factor(k, r2)
        delta = np.max(np.abs(new - und)) if new.size else 0.0
        und = new
        if delta < tol:
            return und
    raise DistortionInversionDiverged(
        f"undistortion did not reach {tol} in {max_iter} iterations (last step {delta:.3e})"
    )


def project_points(intrinsics: CameraIntrinsics, pose: Pose, points: np.ndarray):
    """Project (N, 3) world points; returns ((N, 2) pixels, (N,) in-front mask).

    Pixels for behind-camera points are NaN; no exception is raised (use
    `project` for the scalar, raising variant).
    """
    points = np.asarray(points, dtype=float)
    R = pose.rotation()
    cam = (points - pose.t) @ R  # row-vector form of R.T @ (p - t)
    depth = cam[:, 2]
    in_front = depth > BEHIND_CAMERA_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        norm = cam[:, :2] / depth[:, None]
    norm = np.where(in_front[:, None], norm, np.nan)
    dist = distort_normalized(intrinsics.k, norm)
    focal = intrinsics.focal_px
    pixels = np.empty_like(dist)
    pixels[:, 0] = intrinsics.x0 + focal * dist[:, 0]
    pixels[:, 1] = intrinsics.y0 + focal * dist[:, 1]
    return pixels, in_front


def project(intrinsics: CameraIntrinsics, pose: Pose, point) -> np.ndarray:
    """Project one world point to pixel coordinates.

    Raises BehindCamera when the camera-frame depth is <= 1e-9 m.
    """
    point = _as_vec(point, 3, "point")
    pixels, in_front = project_points(intrinsics, pose, point[None, :])
    if not in_front[0]:
        raise BehindCamera(f"point {point.tolist()} has non-positive depth in camera frame")
    return pixels[0]


def pixels_to_directions(intrinsics: CameraIntrinsics, pose: Pose, pixels: np.ndarray) -> np.ndarray:
    """World-frame unit viewing directions for (N, 2) pixel coordinates."""
    pixels = np.asarray(pixels, dtype=float)
    focal = intrinsics.focal_px
    dist = np.empty_like(pixels)
    dist[:, 0] = (pixels[:, 0] - intrinsics.x0) / focal
    dist[:, 1] = (pixels[:, 1] - intrinsics.y0) / focal
    norm = undistort_normalized(intrinsics.k, dist)
    dirs_cam = np.concatenate([norm, np.ones((len(norm), 1))], axis=1)
    dirs_world = dirs_cam @ pose.rotation().T
    return dirs_world / np.linalg.norm(dirs_world, axis=1, keepdims=True)


def pixel_to_ray(intrinsics: CameraIntrinsics, pose: Pose, pixel) -> Ray:
    """Back-project a pixel to a world-frame ray through the projection center."""
    pixel = _as_vec(pixel, 2, "pixel")
    if not intrinsics.in_bounds(pixel):
        logger.warning("pixel (%.2f, %.2f) outside %dx%d sensor", pixel[0], pixel[1],
                       intrinsics.width, intrinsics.height)
    direction = pixels_to_directions(intrinsics, pose, pixel[None, :])[0]
    return Ray(origin=pose.t, direction=direction)


def apply_transform(T: RigidTransform, points: np.ndarray) -> np.ndarray:
    """Map a 3-vector or (N, 3) array through scale * R @ p + t."""
    p = np.asarray(points, dtype=float)
    if p.ndim == 1:
        return T.scale * (T.rotation @ p) + T.translation
    return T.scale * (p @ T.rotation.T) + T.translation
