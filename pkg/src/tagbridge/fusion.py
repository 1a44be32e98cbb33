"""Voxel-based fusion of per-frame point clouds.

Clouds accumulated along a trajectory are binned into a sparse voxel grid
(counts, compensated position sums, color histograms). Filtering removes
voxels by occupancy and by the fraction of points carrying RGB; the survivors
are emitted as one centroid per voxel. A voxel-walking occlusion test guards
color assignment from a separate RGB camera.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose, project_points

logger = logging.getLogger(__name__)

DEFAULT_VOXEL_SIZE = 0.1
DEFAULT_OCCLUSION_THRESHOLD = 1


@dataclass
class PointCloud:
    """World-frame points with optional per-point color and source frame id."""

    positions: np.ndarray  # (N, 3) float64
    colors: np.ndarray = None  # (N, 3) uint8 or None
    color_valid: np.ndarray = None  # (N,) bool; defaults to all True when colored
    frame_ids: np.ndarray = None  # (N,) int or None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        self.positions = pos
        n = len(pos)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(n, 3)
            if self.color_valid is None:
                self.color_valid = np.ones(n, dtype=bool)
            else:
                self.color_valid = np.asarray(self.color_valid, dtype=bool).reshape(n)
        elif self.color_valid is not None:
            raise ValueError("color_valid given without colors")
        if self.frame_ids is not None:
            self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64).reshape(n)

    def __len__(self):
        return len(self.positions)


class _Voxel:
    __slots__ = ("count", "csum", "comp", "colored", "hist")

    def __init__(self):
        self.count = 0
        self.csum = np.zeros(3)
        self.comp = np.zeros(3)
        self.colored = 0
        self.hist = {}

    def add(self, n, vec_sum, n_colored, color_counts):
        self.count += n
        # Kahan step keeps centroids permutation-invariant to ~1e-14
        y = vec_sum - self.comp
        t = self.csum + y
        self.comp = (t - self.csum) - y
        self.csum = t
        self.colored += n_colored
        for code, cnt in color_counts:
            self.hist[code] = self.hist.get(code, 0) + cnt

    def centroid(self):
        return (self.csum + self.comp) / self.count

    def majority_color(self):
        # highest count wins; ties break on the smallest encoded rgb
        code = min(self.hist, key=lambda c: (-self.hist[c], c))
        return np.array([(code >> 16) & 0xFF, (code >> 8) & 0xFF, code & 0xFF],
                        dtype=np.uint8)


@dataclass
class VoxelGrid:
    """Sparse accumulation grid; points on a boundary go to the higher-index voxel."""

    voxel_size: float = DEFAULT_VOXEL_SIZE
    origin: np.ndarray = None
    _voxels: dict = field(default_factory=dict, repr=False)
    _clouds: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel size must be positive")
        self.origin = (np.zeros(3) if self.origin is None
                       else np.asarray(self.origin, dtype=float).reshape(3))

    def voxel_indices(self, points: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(points, dtype=float) - self.origin)
                        / self.voxel_size).astype(np.int64)

    def count(self, key) -> int:
        v = self._voxels.get(tuple(key))
        return v.count if v is not None else 0

    def occupied(self, key, threshold: int = DEFAULT_OCCLUSION_THRESHOLD) -> bool:
        return self.count(key) >= threshold

    @property
    def n_voxels(self) -> int:
        return len(self._voxels)

    @property
    def n_points(self) -> int:
        return sum(v.count for v in self._voxels.values())


def accumulate(grid: VoxelGrid, cloud: PointCloud) -> VoxelGrid:
    """Bin a cloud into the grid (counts, position sums, color histograms).

    Re-adding the same cloud re-counts it; the caller deduplicates by frame
    id. Returns the (mutated) grid.
    """
    if len(cloud) == 0:
        return grid
    grid._clouds.append(cloud)
    vox = grid.voxel_indices(cloud.positions)
    order = np.lexsort((vox[:, 2], vox[:, 1], vox[:, 0]))
    sorted_vox = vox[order]
    change = np.nonzero(np.any(np.diff(sorted_vox, axis=0) != 0, axis=1))[0] + 1
    starts = np.concatenate([[0], change, [len(order)]])

    has_color = cloud.colors is not None
    if has_color:
        codes = (cloud.colors[:, 0].astype(np.int64) << 16) \
            | (cloud.colors[:, 1].astype(np.int64) << 8) \
            | cloud.colors[:, 2].astype(np.int64)

    for s, e in zip(starts[:-1], starts[1:]):
        members = order[s:e]
        key = tuple(sorted_vox[s])
        voxel = grid._voxels.get(key)
        if voxel is None:
            voxel = grid._voxels[key] = _Voxel()
        vec_sum = cloud.positions[members].sum(axis=0)
        if has_color:
            valid = members[cloud.color_valid[members]]
            uniq, cnts = np.unique(codes[valid], return_counts=True)
            voxel.add(len(members), vec_sum, len(valid),
                      list(zip(uniq.tolist(), cnts.tolist())))
        else:
            voxel.add(len(members), vec_sum, 0, ())
    return grid


def filter_voxels(grid: VoxelGrid, min_points: int,
                  min_rgb_fraction: float = 0.0) -> PointCloud:
    """One centroid per surviving voxel.

    Voxels with fewer than min_points points are removed. With
    min_rgb_fraction > 0, voxels whose colored fraction falls below it are
    removed too; with min_rgb_fraction = 0, colorless voxels survive as
    geometry-only centroids. min_points = 0 is the raw pass-through sentinel:
    all accumulated points are returned unfiltered.
    """
    if not 0.0 <= min_rgb_fraction <= 1.0:
        raise ValueError("min_rgb_fraction must be in [0, 1]")
    if min_points == 0:
        return _concatenate(grid._clouds)

    positions, colors, valid = [], [], []
    for key in sorted(grid._voxels):
        v = grid._voxels[key]
        if v.count < min_points:
            continue
        frac = v.colored / v.count
        if min_rgb_fraction > 0.0 and frac < min_rgb_fraction:
            continue
        positions.append(v.centroid())
        if v.colored > 0:
            colors.append(v.majority_color())
            valid.append(True)
        else:
            colors.append(np.zeros(3, dtype=np.uint8))
            valid.append(False)

    if not positions:
        return PointCloud(positions=np.zeros((0, 3)))
    positions = np.array(positions)
    valid = np.array(valid)
    if not valid.any():
        return PointCloud(positions=positions)
    return PointCloud(positions=positions, colors=np.array(colors), color_valid=valid)


def _concatenate(clouds) -> PointCloud:
    if not clouds:
        return PointCloud(positions=np.zeros((0, 3)))
    positions = np.concatenate([c.positions for c in clouds])
    n = len(positions)
    if any(c.colors is not None for c in clouds):
        colors = np.concatenate([
            c.colors if c.colors is not None else np.zeros((len(c), 3), np.uint8)
            for c in clouds])
        valid = np.concatenate([
            c.color_valid if c.colors is not None else np.zeros(len(c), bool)
            for c in clouds])
    else:
        colors = valid = None
    if any(c.frame_ids is not None for c in clouds):
        frame_ids = np.concatenate([
            c.frame_ids if c.frame_ids is not None else np.full(len(c), -1, np.int64)
            for c in clouds])
    else:
        frame_ids = None
    return PointCloud(positions=positions, colors=colors, color_valid=valid,
                      frame_ids=frame_ids)


def _walk_voxels(start_voxel, end_voxel, start_point, direction, grid):
    """Integer voxel traversal from start to end (both included in the yield)."""
    v = np.array(start_voxel, dtype=np.int64)
    end = np.array(end_voxel, dtype=np.int64)
    step = np.sign(direction).astype(np.int64)
    t_max = np.full(3, np.inf)
    t_delta = np.full(3, np.inf)
    for i in range(3):
        if direction[i] != 0:
            boundary = grid.origin[i] + (v[i] + (step[i] > 0)) * grid.voxel_size
            t_max[i] = (boundary - start_point[i]) / direction[i]
            t_delta[i] = grid.voxel_size / abs(direction[i])
    limit = int(np.sum(np.abs(end - v))) + 3
    for _ in range(limit):
        yield tuple(v)
        if np.array_equal(v, end):
            return
        axis = int(np.argmin(t_max))
        v[axis] += step[axis]
        t_max[axis] += t_delta[axis]
    yield tuple(end)


def colorize_with_occlusion(cloud: PointCloud, grid: VoxelGrid, rgb: np.ndarray,
                            intrinsics: CameraIntrinsics, rgb_pose: Pose,
                            occlusion_threshold: int = DEFAULT_OCCLUSION_THRESHOLD,
                            ) -> PointCloud:
    """Assign RGB to points visible from the color camera.

    A point is colored only when no occupied voxel (count >= threshold) lies
    strictly between the camera and the point's own voxel along the viewing
    ray; the camera's voxel and the point's own voxel never count as
    occluders. Points outside the frustum or behind the camera stay uncolored.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("rgb must be an (H, W, 3) raster")
    H, W = rgb.shape[:2]

    pixels, in_front = project_points(intrinsics, rgb_pose, cloud.positions)
    pixels = np.nan_to_num(pixels, nan=-1.0)  # behind-camera pixels are masked below
    cols = np.round(pixels[:, 0]).astype(int)
    rows = np.round(pixels[:, 1]).astype(int)
    candidates = in_front & (cols >= 0) & (cols < W) & (rows >= 0) & (rows < H)

    cam_voxel = tuple(grid.voxel_indices(rgb_pose.t[None, :])[0])
    point_voxels = grid.voxel_indices(cloud.positions)

    n = len(cloud)
    colors = np.zeros((n, 3), dtype=np.uint8)
    valid = np.zeros(n, dtype=bool)
    for i in np.nonzero(candidates)[0]:
        own = tuple(point_voxels[i])
        direction = cloud.positions[i] - rgb_pose.t
        occluded = False
        for key in _walk_voxels(cam_voxel, own, rgb_pose.t, direction, grid):
            if key == cam_voxel or key == own:
                continue
            if grid.occupied(key, occlusion_threshold):
                occluded = True
                break
        if not occluded:
            colors[i] = rgb[rows[i], cols[i]]
            valid[i] = True

    if not valid.any():
        return PointCloud(positions=cloud.positions.copy(), frame_ids=cloud.frame_ids)
    return PointCloud(positions=cloud.positions.copy(), colors=colors,
                      color_valid=valid, frame_ids=cloud.frame_ids)
