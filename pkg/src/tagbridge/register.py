"""Align a locally navigated trajectory to world coordinates via co-observed tags.

The ground system measures tag centers in its own local frame; the aerial
system provides the same tags in world coordinates. Matching them by id gives
3D-3D correspondences from which a 6-DoF rigid transform (optionally with
scale, for diagnostics) is estimated in closed form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, ReflectionRequired, TooFewCorrespondences
from .geometry import Pose, RigidTransform, angles_from_rotation, apply_transform

logger = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 3
# Second-to-first principal-axis spread below this marks the set as collinear.
COLLINEARITY_RATIO = 1e-6
# A pair whose residual exceeds this multiple of the median is dropped once.
OUTLIER_MEDIAN_FACTOR = 3.0
# Nearest-pose lookup tolerance for timestamped range conversions (seconds).
POSE_LOOKUP_TOL = 0.1


@dataclass(frozen=True)
class LocalTagSighting:
    """A tag center measured in the ground system's local frame."""

    tag_id: int
    local_vector: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.local_vector, dtype=float)
        if v.shape != (3,) or not np.all(np.isfinite(v)):
            raise ValueError("local_vector must be a finite 3-vector")
        if self.timestamp < 0:
            raise ValueError("timestamp must be non-negative")
        v.flags.writeable = False
        object.__setattr__(self, "local_vector", v)


@dataclass(frozen=True)
class Trajectory:
    """Timestamped pose sequence; timestamps strictly increasing."""

    timestamps: np.ndarray
    poses: tuple

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        if ts.ndim != 1 or len(ts) != len(self.poses):
            raise ValueError("one timestamp per pose required")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")
        ts.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses])


@dataclass
class Correspondences:
    """Matched (local, world) point pairs, one per tag, plus unmatched tag ids."""

    tag_ids: np.ndarray
    local: np.ndarray
    world: np.ndarray
    unmatched: list

    def __len__(self):
        return len(self.tag_ids)


def collect_correspondences(sightings, landmarks) -> Correspondences:
    """Match sightings to landmarks by tag id.

    Multiple sightings of one tag are averaged in the local frame. Sightings
    of tags without a triangulated landmark are skipped and reported in
    `unmatched` (and the log).
    """
    by_tag = {}
    for s in sightings:
        by_tag.setdefault(s.tag_id, []).append(s.local_vector)
    positions = {lm.tag_id: lm.position for lm in landmarks}

    ids, local, world, unmatched = [], [], [], []
    for tag_id in sorted(by_tag):
        if tag_id not in positions:
            unmatched.append(tag_id)
            continue
        ids.append(tag_id)
        local.append(np.mean(by_tag[tag_id], axis=0))
        world.append(positions[tag_id])
    if unmatched:
        logger.warning("sightings of %d tag(s) without landmarks skipped: %s",
                       len(unmatched), unmatched)
    return Correspondences(
        tag_ids=np.array(ids, dtype=int),
        local=np.array(local, dtype=float).reshape(-1, 3),
        world=np.array(world, dtype=float).reshape(-1, 3),
        unmatched=unmatched,
    )


def _procrustes(local, world, estimate_scale):
    centroid_l = local.mean(axis=0)
    centroid_w = world.mean(axis=0)
    lc = local - centroid_l
    wc = world - centroid_w

    spread = np.linalg.svd(lc, compute_uv=False)
    if spread[0] <= 0 or spread[1] / spread[0] <= COLLINEARITY_RATIO:
        raise DegenerateGeometry("correspondences are collinear or coincident")

    H = lc.T @ wc
    U, S, Vt = np.linalg.svd(H)
    det = np.linalg.det(Vt.T @ U.T)
    if det < 0 and S[2] > COLLINEARITY_RATIO * S[0]:
        # A genuine reflection fits better than any rotation: corrupt matches.
        raise ReflectionRequired(
            "correspondences demand a reflection; check tag ids / coordinates"
        )
    sign = np.array([1.0, 1.0, 1.0 if det >= 0 else -1.0])
    R = (Vt.T * sign) @ U.T

    if estimate_scale:
        scale = float(np.sum(S * sign) / np.sum(lc * lc))
    else:
        scale = 1.0
    t = centroid_w - scale * R @ centroid_l
    return RigidTransform(rotation=R, translation=t, scale=scale)


def estimate_rigid_transform(local, world, estimate_scale=False):
    """Closed-form least-squares transform mapping local points onto world points.

    Returns (RigidTransform, per-pair world-frame residual distances). If any
    residual exceeds 3x the median, those pairs are dropped and the solve is
    repeated once (guards against a tag plate that moved between surveys).
    """
    local = np.asarray(local, dtype=float).reshape(-1, 3)
    world = np.asarray(world, dtype=float).reshape(-1, 3)
    if local.shape != world.shape:
        raise ValueError("local and world must have matching shapes")
    if len(local) < MIN_CORRESPONDENCES:
        raise TooFewCorrespondences(
            f"{len(local)} pair(s); at least {MIN_CORRESPONDENCES} tags required"
        )

    T = _procrustes(local, world, estimate_scale)
    residuals = np.linalg.norm(apply_transform(T, local) - world, axis=1)

    threshold = max(OUTLIER_MEDIAN_FACTOR * np.median(residuals), 1e-12)
    keep = residuals <= threshold
    if not keep.all() and keep.sum() >= MIN_CORRESPONDENCES:
        logger.info("re-solving without %d outlier pair(s)", int((~keep).sum()))
        T = _procrustes(local[keep], world[keep], estimate_scale)
        residuals = np.linalg.norm(apply_transform(T, local) - world, axis=1)
    return T, residuals


def apply_to_trajectory(T: RigidTransform, traj: Trajectory) -> Trajectory:
    """Map every pose through T: positions transformed, rotations left-composed."""
    poses = []
    for pose in traj.poses:
        poses.append(Pose(
            t=apply_transform(T, pose.t),
            r=angles_from_rotation(T.rotation @ pose.rotation()),
        ))
    return Trajectory(timestamps=traj.timestamps.copy(), poses=tuple(poses))


def sightings_from_ranges(ranges, traj: Trajectory, tol: float = POSE_LOOKUP_TOL):
    """Convert camera-frame range vectors to local-frame sightings.

    `ranges` is an iterable of (timestamp, tag_id, body-frame 3-vector).
    Interior timestamps use the nearest trajectory rotation and a linearly
    interpolated translation; entries more than `tol` seconds outside the
    covered time span are skipped with a warning.
    """
    out = []
    ts = traj.timestamps
    for stamp, tag_id, vec in ranges:
        if stamp < ts[0] - tol or stamp > ts[-1] + tol:
            logger.warning("range at t=%.3f s outside trajectory span [%.3f, %.3f]; skipped",
                           stamp, ts[0], ts[-1])
            continue
        idx = int(np.searchsorted(ts, stamp))
        lo, hi = max(idx - 1, 0), min(idx, len(ts) - 1)
        nearest = lo if abs(ts[lo] - stamp) <= abs(ts[hi] - stamp) else hi
        if lo != hi and ts[lo] <= stamp <= ts[hi]:
            w = (stamp - ts[lo]) / (ts[hi] - ts[lo])
            translation = (1 - w) * traj.poses[lo].t + w * traj.poses[hi].t
        else:
            translation = traj.poses[nearest].t
        R = traj.poses[nearest].rotation()
        local = translation + R @ np.asarray(vec, dtype=float)
        out.append(LocalTagSighting(tag_id=tag_id, local_vector=local, timestamp=stamp))
    return out
