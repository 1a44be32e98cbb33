"""Triangulate fiducial-tag centers from multiple geo-referenced observations.

Each observation is a pixel detection of a tag center in one oriented image;
rays from all images seeing a tag are intersected in a weighted least-squares
sense (closed-form 3x3 system over perpendicular distances).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, InsufficientObservations, MissingPose
from .geometry import CameraIntrinsics, Pose, Ray, pixels_to_directions

logger = logging.getLogger(__name__)

# Rays count as non-parallel when at least one pair opens more than this angle.
MIN_PAIR_ANGLE_DEG = 0.05
MAX_CONDITION = 1e8

# Point-to-ray distances beyond this multiple of the bundle RMS are dropped
# once and the solve repeated.
OUTLIER_RMS_FACTOR = 3.0


@dataclass(frozen=True)
class TagObservation:
    """Pixel detection of a tag center in one image."""

    image_id: str
    tag_id: int
    pixel: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        px = np.asarray(self.pixel, dtype=float)
        if px.shape != (2,) or not np.all(np.isfinite(px)):
            raise ValueError("pixel must be a finite 2-vector")
        if not self.weight > 0:
            raise ValueError("weight must be positive")
        px.flags.writeable = False
        object.__setattr__(self, "pixel", px)


@dataclass(frozen=True)
class TagLandmark:
    """Triangulated world position of one tag."""

    tag_id: int
    position: np.ndarray
    rms_residual: float
    n_rays: int

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        if pos.shape != (3,):
            raise ValueError("position must be a 3-vector")
        if self.n_rays < 2:
            raise ValueError("a landmark needs at least 2 rays")
        if self.rms_residual < 0:
            raise ValueError("rms_residual must be non-negative")
        pos.flags.writeable = False
        object.__setattr__(self, "position", pos)


@dataclass
class TriangulationResult:
    """Successful landmarks plus per-tag failures (tag_id -> error)."""

    landmarks: list
    failures: dict

    def landmark(self, tag_id: int) -> TagLandmark:
        for lm in self.landmarks:
            if lm.tag_id == tag_id:
                return lm
        raise KeyError(tag_id)


def _ray_distances(point, origins, dirs):
    diff = point[None, :] - origins
    along = np.sum(diff * dirs, axis=1)
    perp = diff - along[:, None] * dirs
    return np.linalg.norm(perp, axis=1)


def _solve_midpoint(origins, dirs, weights):
    # A p = b with A = sum w (I - d d^T), b = sum w (I - d d^T) o
    outer = dirs[:, :, None] * dirs[:, None, :]
    P = np.eye(3)[None, :, :] - outer
    Pw = P * weights[:, None, None]
    A = Pw.sum(axis=0)
    b = np.einsum("nij,nj->i", Pw, origins)
    if np.linalg.cond(A) > MAX_CONDITION:
        raise DegenerateGeometry(
            f"near-parallel ray bundle (condition number {np.linalg.cond(A):.2e})"
        )
    return np.linalg.solve(A, b)


def triangulate_point(rays, weights=None):
    """Weighted least-squares intersection of rays.

    Returns (position, rms_residual) where rms_residual is the plain RMS of
    point-to-ray perpendicular distances. Raises InsufficientObservations for
    fewer than 2 rays and DegenerateGeometry for a near-parallel bundle.
    """
    rays = list(rays)
    if len(rays) < 2:
        raise InsufficientObservations(n=len(rays))
    if weights is None:
        weights = np.ones(len(rays))
    else:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (len(rays),) or np.any(weights <= 0):
            raise ValueError("weights must be positive, one per ray")

    origins = np.array([r.origin for r in rays])
    dirs = np.array([r.direction for r in rays])

    # anti-parallel directions span the same line, so compare |dot|
    dots = np.abs(dirs @ dirs.T)
    np.fill_diagonal(dots, 1.0)
    if dots.min() > math.cos(math.radians(MIN_PAIR_ANGLE_DEG)):
        raise DegenerateGeometry(
            f"all ray pairs within {MIN_PAIR_ANGLE_DEG} deg of parallel"
        )

    point = _solve_midpoint(origins, dirs, weights)
    rms = float(np.sqrt(np.mean(_ray_distances(point, origins, dirs) ** 2)))
    return point, rms


def triangulate_tags(observations, poses, intrinsics: CameraIntrinsics) -> TriangulationResult:
    """Triangulate every tag seen in the observation list.

    `poses` maps image_id -> Pose. Raises MissingPose if any observation
    references an unknown image; per-tag geometric failures are collected in
    the result instead of aborting the batch. Observations whose point-to-ray
    distance exceeds 3x the bundle RMS are discarded once and the tag re-solved.
    """
    for obs in observations:
        if obs.image_id not in poses:
            raise MissingPose(obs.image_id)

    by_tag = {}
    for obs in observations:
        by_tag.setdefault(obs.tag_id, []).append(obs)

    landmarks = []
    failures = {}
    for tag_id in sorted(by_tag):
        group = by_tag[tag_id]
        try:
            landmarks.append(_triangulate_group(tag_id, group, poses, intrinsics))
        except (InsufficientObservations, DegenerateGeometry) as err:
            logger.warning("tag %d not triangulated: %s", tag_id, err)
            failures[tag_id] = err
    return TriangulationResult(landmarks=landmarks, failures=failures)


def _triangulate_group(tag_id, group, poses, intrinsics) -> TagLandmark:
    if len(group) < 2:
        raise InsufficientObservations(tag_id=tag_id, n=len(group))
    rays = []
    weights = []
    for obs in group:
        pose = poses[obs.image_id]
        direction = pixels_to_directions(intrinsics, pose, obs.pixel[None, :])[0]
        rays.append(Ray(origin=pose.t, direction=direction))
        weights.append(obs.weight)
    weights = np.asarray(weights)

    point, rms = triangulate_point(rays, weights)

    origins = np.array([r.origin for r in rays])
    dirs = np.array([r.direction for r in rays])
    dist = _ray_distances(point, origins, dirs)
    keep = dist <= max(OUTLIER_RMS_FACTOR * rms, 1e-12)
    if keep.sum() >= 2 and not keep.all():
        logger.info("tag %d: dropping %d outlier ray(s)", tag_id, int((~keep).sum()))
        kept_rays = [r for r, k in zip(rays, keep) if k]
        point, rms = triangulate_point(kept_rays, weights[keep])
        n_rays = int(keep.sum())
    else:
        n_rays = len(rays)
    return TagLandmark(tag_id=tag_id, position=point, rms_residual=rms, n_rays=n_rays)
