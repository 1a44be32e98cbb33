"""Semi-global matching on rectified stereo pairs.

Pipeline: census transform -> Hamming cost volume -> path-wise cost
aggregation with P1/P2 smoothness penalties -> winner-take-all disparity
selection with subpixel refinement, uniqueness and left-right checks ->
optional conversion of the disparity map to a 3D point cloud.

Matching cost is census + Hamming: deterministic, offset-invariant, and
checkable against small exhaustive oracles. Costs are small unsigned
integers bounded by the census bit count; aggregated costs are float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, ImageTooSmall
from .fusion import PointCloud
from .geometry import CameraIntrinsics, Pose, undistort_normalized

INVALID_DISPARITY = -1.0
MIN_CLOUD_DISPARITY = 1e-3

FLAG_LR_FAILED = 1
FLAG_UNIQUENESS_FAILED = 2
FLAG_OUT_OF_RANGE = 4

# Path direction sets, in fixed aggregation (and summation) order.
PATHS_4 = ((0, 1), (0, -1), (1, 0), (-1, 0))
PATHS_8 = PATHS_4 + ((1, 1), (1, -1), (-1, 1), (-1, -1))


@dataclass(frozen=True)
class SgmParams:
    d_min: int
    d_max: int
    p1: float = 10.0
    p2: float = 120.0
    n_paths: int = 8
    census_window: tuple = (5, 5)
    lr_max_diff: float = 1.0
    uniqueness_ratio: float = 1.05

    def __post_init__(self):
        if self.d_min >= self.d_max:
            raise ValueError("d_min must be < d_max")
        if not (0 < self.p1 < self.p2):
            raise ValueError("penalties must satisfy 0 < P1 < P2")
        if self.n_paths not in (4, 8):
            raise ValueError("n_paths must be 4 or 8")
        h, w = self.census_window
        if h % 2 == 0 or w % 2 == 0:
            raise ValueError("census window must be odd in both dimensions")
        if self.lr_max_diff <= 0:
            raise ValueError("lr_max_diff must be positive")
        if self.uniqueness_ratio < 1.0:
            raise ValueError("uniqueness_ratio must be >= 1")

    @property
    def directions(self):
        return PATHS_4 if self.n_paths == 4 else PATHS_8


@dataclass
class CostVolume:
    """Per-pixel, per-disparity matching costs C(x, y, d), d = d_min..d_max.

    `base` records which image the volume is anchored to ("left": matches at
    x - d in the other image; "right": matches at x + d). `max_cost` is the
    census bit count, also used for out-of-bounds cells. After aggregation,
    `raw` keeps the pre-aggregation matching costs: the uniqueness test runs
    on them, because path accumulation seeds a spurious unique minimum from
    the out-of-bounds border wedge even when every true matching cost ties
    (textureless input).
    """

    costs: np.ndarray  # (H, W, D)
    d_min: int
    d_max: int
    max_cost: int
    base: str = "left"
    raw: np.ndarray = None

    @property
    def n_disparities(self) -> int:
        return self.costs.shape[2]


@dataclass
class DisparityMap:
    """Fractional disparities with validity and provenance flags.

    Invalid pixels hold INVALID_DISPARITY in `values`; `flags` carries the
    bitwise reason (FLAG_LR_FAILED | FLAG_UNIQUENESS_FAILED | FLAG_OUT_OF_RANGE).
    """

    values: np.ndarray  # (H, W) float32
    valid: np.ndarray  # (H, W) bool
    flags: np.ndarray  # (H, W) uint8


def census_transform(image: np.ndarray, window=(5, 5)) -> np.ndarray:
    """Census descriptor raster: bit i set iff neighbor i < center.

    Neighbors are enumerated in row-major order over the window with the
    center excluded; borders use edge-clamped neighborhoods. Returns an
    (H, W, n_words) uint64 raster (LSB-first packing within each word).
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("image must be 2-D grayscale")
    wh, ww = window
    if wh % 2 == 0 or ww % 2 == 0:
        raise ValueError("census window must be odd in both dimensions")
    H, W = image.shape
    if H < wh or W < ww:
        raise ImageTooSmall(f"{W}x{H} image with {ww}x{wh} census window")

    ph, pw = wh // 2, ww // 2
    padded = np.pad(image, ((ph, ph), (pw, pw)), mode="edge")
    n_bits = wh * ww - 1
    n_words = (n_bits + 63) // 64
    desc = np.zeros((H, W, n_words), dtype=np.uint64)

    bit = 0
    for dy in range(-ph, ph + 1):
        for dx in range(-pw, pw + 1):
            if dy == 0 and dx == 0:
                continue
            neighbor = padded[ph + dy:ph + dy + H, pw + dx:pw + dx + W]
            mask = neighbor < image
            word, offset = divmod(bit, 64)
            desc[:, :, word] |= mask.astype(np.uint64) << np.uint64(offset)
            bit += 1
    return desc


def hamming_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel Hamming distance between two census rasters."""
    if a.shape != b.shape:
        raise DimensionMismatch(f"descriptor shapes differ: {a.shape} vs {b.shape}")
    return np.bitwise_count(np.bitwise_xor(a, b)).sum(axis=-1).astype(np.uint16)


def census_bits(window=(5, 5)) -> int:
    return window[0] * window[1] - 1


def matching_cost_volume(base_desc: np.ndarray, match_desc: np.ndarray,
                         d_min: int, d_max: int, max_cost: int = None,
                         base: str = "left") -> CostVolume:
    """Hamming cost volume C(x, y, d) = dist(base(x, y), match(x -+ d, y)).

    The match pixel is x - d for a left base and x + d for a right base;
    out-of-bounds matches get `max_cost` (defaults to the descriptor word
    bit capacity if not given).
    """
    if base_desc.shape != match_desc.shape:
        raise DimensionMismatch(
            f"raster shapes differ: {base_desc.shape} vs {match_desc.shape}")
    if d_min >= d_max:
        raise ValueError("d_min must be < d_max")
    if base not in ("left", "right"):
        raise ValueError("base must be 'left' or 'right'")
    if max_cost is None:
        max_cost = 64 * base_desc.shape[-1]

    H, W = base_desc.shape[:2]
    D = d_max - d_min + 1
    costs = np.full((H, W, D), max_cost, dtype=np.uint16)
    sign = 1 if base == "left" else -1
    for i, d in enumerate(range(d_min, d_max + 1)):
        shift = sign * d  # match pixel is x - shift
        lo = max(0, shift)
        hi = min(W, W + shift)
        if lo >= hi:
            continue
        costs[:, lo:hi, i] = hamming_distance(
            base_desc[:, lo:hi], match_desc[:, lo - shift:hi - shift])
    return CostVolume(costs=costs, d_min=d_min, d_max=d_max, max_cost=max_cost, base=base)


def _path_step(prev: np.ndarray, p1: float, p2: float) -> np.ndarray:
    """min(prev[d], prev[d+-1]+P1, min_k prev[k]+P2) - min_k prev[k], vectorized over d."""
    m = prev.min(axis=-1, keepdims=True)
    cand = np.minimum(prev, m + p2)
    cand[..., 1:] = np.minimum(cand[..., 1:], prev[..., :-1] + p1)
    cand[..., :-1] = np.minimum(cand[..., :-1], prev[..., 1:] + p1)
    return cand - m


def aggregate_one_path(volume: CostVolume, direction, p1: float, p2: float) -> np.ndarray:
    """Accumulated costs L_r for one path direction r = (dy, dx); float32 (H, W, D).

    The recursion starts at the image border with L_r = C.
    """
    dy, dx = direction
    C = volume.costs.astype(np.float32)
    flip_y, flip_x = dy < 0, dx < 0
    if flip_y:
        C = C[::-1]
    if flip_x:
        C = C[:, ::-1]
    ady, adx = abs(dy), abs(dx)

    L = np.empty_like(C)
    if (ady, adx) == (0, 1):
        L[:, 0] = C[:, 0]
        for x in range(1, C.shape[1]):
            L[:, x] = C[:, x] + _path_step(L[:, x - 1], p1, p2)
    elif (ady, adx) == (1, 0):
        L[0] = C[0]
        for y in range(1, C.shape[0]):
            L[y] = C[y] + _path_step(L[y - 1], p1, p2)
    elif (ady, adx) == (1, 1):
        L[0] = C[0]
        for y in range(1, C.shape[0]):
            L[y, 0] = C[y, 0]
            L[y, 1:] = C[y, 1:] + _path_step(L[y - 1, :-1], p1, p2)
    else:
        raise ValueError(f"unsupported path direction {direction}")

    if flip_x:
        L = L[:, ::-1]
    if flip_y:
        L = L[::-1]
    return np.ascontiguousarray(L)


def aggregate_costs(volume: CostVolume, params: SgmParams) -> CostVolume:
    """Sum of single-path accumulations over the configured path set.

    Paths are processed and summed in the fixed PATHS_4/PATHS_8 order so the
    result is bit-identical run to run.
    """
    total = np.zeros(volume.costs.shape, dtype=np.float32)
    for direction in params.directions:
        total += aggregate_one_path(volume, direction, params.p1, params.p2)
    raw = volume.raw if volume.raw is not None else volume.costs
    return CostVolume(costs=total, d_min=volume.d_min, d_max=volume.d_max,
                      max_cost=volume.max_cost, base=volume.base, raw=raw)


def _in_bounds_mask(W: int, d_min: int, D: int, base: str) -> np.ndarray:
    """(W, D) bool: does disparity d at column x map into the other image?"""
    x = np.arange(W)[:, None]
    d = d_min + np.arange(D)[None, :]
    other = x - d if base == "left" else x + d
    return (other >= 0) & (other < W)


def _wta(volume: CostVolume):
    """Masked winner-take-all with parabolic subpixel refinement.

    Returns (disparity float32 (H, W), valid bool, best_cost, best_idx,
    masked costs with out-of-bounds cells at +inf).
    """
    H, W, D = volume.costs.shape
    mask = _in_bounds_mask(W, volume.d_min, D, volume.base)
    masked = np.where(mask[None, :, :], volume.costs.astype(np.float32),
                      np.float32(np.inf))

    best_idx = np.argmin(masked, axis=2)
    best = np.take_along_axis(masked, best_idx[..., None], axis=2)[..., 0]
    valid = np.isfinite(best)

    # parabola through (c-, c0, c+); only where both neighbors are usable
    idx_m = np.clip(best_idx - 1, 0, D - 1)
    idx_p = np.clip(best_idx + 1, 0, D - 1)
    c0 = best
    cm = np.take_along_axis(masked, idx_m[..., None], axis=2)[..., 0]
    cp = np.take_along_axis(masked, idx_p[..., None], axis=2)[..., 0]
    usable = (best_idx > 0) & (best_idx < D - 1) & np.isfinite(cm) & np.isfinite(cp)
    denom = cm - 2.0 * c0 + cp
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = 0.5 * (cm - cp) / denom
    offset = np.where(usable & (denom > 1e-12), offset, 0.0)
    offset = np.clip(offset, -0.5, 0.5)

    disparity = (volume.d_min + best_idx + offset).astype(np.float32)
    return disparity, valid, best, best_idx, masked


def select_disparity(aggregated: CostVolume, params: SgmParams,
                     right_aggregated: CostVolume = None) -> DisparityMap:
    """Winner-take-all selection with uniqueness and left-right consistency.

    Uniqueness: on the raw (pre-aggregation) costs, the winner's best distinct
    competitor (immediate disparity neighbors exempt) must exceed
    best * uniqueness_ratio; ties, as in textureless input, fail. Left-right:
    |d_L(x, y) - d_R(x - d_L, y)| <= lr_max_diff, checked when a right-base
    aggregated volume is supplied. Failing pixels are INVALID with the
    corresponding provenance flag set.
    """
    H, W, D = aggregated.costs.shape
    disparity, valid, best, best_idx, masked = _wta(aggregated)
    flags = np.zeros((H, W), dtype=np.uint8)
    flags[~valid] |= FLAG_OUT_OF_RANGE

    # uniqueness on raw costs; aggregation would break the all-tie case via
    # the border wedge (see CostVolume.raw)
    raw_src = aggregated.raw if aggregated.raw is not None else aggregated.costs
    mask = _in_bounds_mask(W, aggregated.d_min, D, aggregated.base)
    masked_raw = np.where(mask[None, :, :], raw_src.astype(np.float32),
                          np.float32(np.inf))
    d_idx = np.arange(D)[None, None, :]
    near_winner = np.abs(d_idx - best_idx[..., None]) <= 1
    competitors = np.where(near_winner, np.float32(np.inf), masked_raw)
    second = competitors.min(axis=2)
    best_raw = np.take_along_axis(masked_raw, best_idx[..., None], axis=2)[..., 0]
    unique_ok = np.isfinite(second) & (second > best_raw * params.uniqueness_ratio)
    fail_unique = valid & ~unique_ok
    flags[fail_unique] |= FLAG_UNIQUENESS_FAILED
    valid &= unique_ok

    if right_aggregated is not None:
        if right_aggregated.base != "right":
            raise ValueError("right_aggregated must be a right-base volume")
        if right_aggregated.costs.shape != aggregated.costs.shape:
            raise DimensionMismatch("left and right volumes differ in shape")
        d_right, r_valid, *_ = _wta(right_aggregated)
        xr = np.rint(np.arange(W)[None, :] - disparity).astype(int)
        in_img = (xr >= 0) & (xr < W)
        xr_safe = np.clip(xr, 0, W - 1)
        rows = np.arange(H)[:, None]
        dr = d_right[rows, xr_safe]
        rv = r_valid[rows, xr_safe]
        lr_ok = in_img & rv & (np.abs(disparity - dr) <= params.lr_max_diff)
        fail_lr = valid & ~lr_ok
        flags[fail_lr] |= FLAG_LR_FAILED
        valid &= lr_ok

    values = np.where(valid, disparity, np.float32(INVALID_DISPARITY))
    return DisparityMap(values=values, valid=valid, flags=flags)


def disparity_to_cloud(disp: DisparityMap, intrinsics: CameraIntrinsics,
                       baseline: float, pose: Pose,
                       color: np.ndarray = None) -> PointCloud:
    """Back-project a disparity map to a world-frame point cloud.

    Depth per valid pixel is Z = f * B / (d * pitch); pixels with disparity
    below 1e-3 px are skipped. `color` is an optional (H, W, 3) uint8 raster
    sampled at the source pixel.
    """
    if baseline <= 0:
        raise ValueError("baseline must be positive")
    H, W = disp.values.shape
    use = disp.valid & (disp.values > MIN_CLOUD_DISPARITY)
    ys, xs = np.nonzero(use)
    d = disp.values[ys, xs].astype(float)
    Z = intrinsics.focal_px * baseline / d

    px = np.stack([xs.astype(float), ys.astype(float)], axis=1)
    norm = np.empty_like(px)
    norm[:, 0] = (px[:, 0] - intrinsics.x0) / intrinsics.focal_px
    norm[:, 1] = (px[:, 1] - intrinsics.y0) / intrinsics.focal_px
    norm = undistort_normalized(intrinsics.k, norm)
    cam = np.column_stack([norm[:, 0] * Z, norm[:, 1] * Z, Z])
    world = cam @ pose.rotation().T + pose.t

    colors = None
    if color is not None:
        colors = np.asarray(color)[ys, xs].astype(np.uint8)
    return PointCloud(positions=world, colors=colors)
