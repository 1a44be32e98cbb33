import itertools
import math

import numpy as np
import pytest

from tagbridge.errors import DimensionMismatch, ImageTooSmall
from tagbridge.geometry import Pose
from tagbridge.sgm import (
    CostVolume,
    SgmParams,
    aggregate_costs,
    aggregate_one_path,
    census_bits,
    census_transform,
    disparity_to_cloud,
    matching_cost_volume,
    select_disparity,
)


def params(d_min=0, d_max=16, **kw):
    return SgmParams(d_min=d_min, d_max=d_max, **kw)


def random_dot_pair(shape=(48, 96), shift=7, seed=0):
    """Right image is the left rolled by `shift`; truth disparity = shift."""
    rng = np.random.default_rng(seed)
    left = rng.integers(0, 256, shape).astype(np.uint8)
    right = np.roll(left, -shift, axis=1)
    return left, right


def run_sgm(left, right, p, with_lr=False):
    ld = census_transform(left, p.census_window)
    rd = census_transform(right, p.census_window)
    bits = census_bits(p.census_window)
    vol = matching_cost_volume(ld, rd, p.d_min, p.d_max, max_cost=bits)
    agg = aggregate_costs(vol, p)
    right_agg = None
    if with_lr:
        rvol = matching_cost_volume(rd, ld, p.d_min, p.d_max, max_cost=bits, base="right")
        right_agg = aggregate_costs(rvol, p)
    return select_disparity(agg, p, right_agg)


def naive_single_path_oracle(C, p1, p2):
    """Left-to-right single-path recursion, plain loops (independent of the library)."""
    W, D = C.shape
    L = np.zeros((W, D))
    L[0] = C[0]
    for x in range(1, W):
        m = min(L[x - 1])
        for d in range(D):
            best = L[x - 1, d]
            if d > 0:
                best = min(best, L[x - 1, d - 1] + p1)
            if d < D - 1:
                best = min(best, L[x - 1, d + 1] + p1)
            best = min(best, m + p2)
            L[x, d] = C[x, d] + best - m
    return L


def plain_dp(C, p1, p2):
    """Unnormalized DP: M(x, d) = minimal energy of any path ending at (x, d)."""
    W, D = C.shape
    M = np.zeros((W, D))
    M[0] = C[0]
    for x in range(1, W):
        for d in range(D):
            best = math.inf
            for k in range(D):
                dd = abs(d - k)
                pen = 0.0 if dd == 0 else (p1 if dd == 1 else p2)
                best = min(best, M[x - 1, k] + pen)
            M[x, d] = C[x, d] + best
    return M


def sequence_energy(C, seq, p1, p2):
    e = sum(C[x, d] for x, d in enumerate(seq))
    for a, b in zip(seq, seq[1:]):
        dd = abs(a - b)
        e += 0.0 if dd == 0 else (p1 if dd == 1 else p2)
    return e


class TestCensus:
    def test_constant_image_all_zero(self):
        desc = census_transform(np.full((10, 12), 77, np.uint8), (5, 5))
        assert not desc.any()

    def test_hand_enumerated_3x3(self):
        # darken the four neighbors preceding the center in row-major order:
        # (-1,-1), (-1,0), (-1,1), (0,-1) -> bits 0..3
        img = np.full((5, 5), 100, np.uint8)
        img[1, 1] = img[1, 2] = img[1, 3] = img[2, 1] = 50
        desc = census_transform(img, (3, 3))
        assert desc[2, 2, 0] == 0b1111

    def test_offset_invariance(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 200, (20, 30)).astype(np.int32)
        a = census_transform(img, (5, 5))
        b = census_transform(img + 17, (5, 5))
        assert np.array_equal(a, b)

    def test_too_small_raises(self):
        with pytest.raises(ImageTooSmall):
            census_transform(np.zeros((3, 3), np.uint8), (5, 5))

    def test_wide_window_multiword(self):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, (11, 13)).astype(np.uint8)
        desc = census_transform(img, (9, 9))  # 80 bits -> 2 words
        assert desc.shape[-1] == 2


class TestCostVolume:
    def test_identical_images_zero_at_d0(self):
        left, _ = random_dot_pair(shift=0)
        d = census_transform(left, (5, 5))
        vol = matching_cost_volume(d, d, 0, 8, max_cost=24)
        assert not vol.costs[:, :, 0].any()

    def test_shifted_raster_zero_at_shift(self):
        left, right = random_dot_pair(shift=7)
        ld = census_transform(left, (3, 3))
        rd = census_transform(right, (3, 3))
        vol = matching_cost_volume(ld, rd, 0, 15, max_cost=8)
        interior = vol.costs[4:-4, 12:-12, 7]
        assert not interior.any()

    def test_out_of_bounds_maximal(self):
        left, right = random_dot_pair()
        ld = census_transform(left, (5, 5))
        rd = census_transform(right, (5, 5))
        vol = matching_cost_volume(ld, rd, 0, 10, max_cost=24)
        for x in range(10):
            assert np.all(vol.costs[:, x, x + 1:] == 24)

    def test_dimension_mismatch(self):
        a = census_transform(np.zeros((10, 10), np.uint8), (3, 3))
        b = census_transform(np.zeros((10, 12), np.uint8), (3, 3))
        with pytest.raises(DimensionMismatch):
            matching_cost_volume(a, b, 0, 4)


class TestAggregation:
    def test_zero_penalties_collapse_to_n_paths_times_raw(self):
        rng = np.random.default_rng(3)
        C = rng.integers(0, 25, (6, 9, 5)).astype(np.uint16)
        vol = CostVolume(costs=C, d_min=0, d_max=4, max_cost=24)
        total = np.zeros(C.shape, np.float32)
        from tagbridge.sgm import PATHS_8

        for direction in PATHS_8:
            total += aggregate_one_path(vol, direction, 0.0, 0.0)
        assert np.array_equal(total, 8.0 * C.astype(np.float32))

    def test_constant_volume_aggregates_to_n_paths_times_c(self):
        C = np.full((5, 7, 4), 6, np.uint16)
        vol = CostVolume(costs=C, d_min=0, d_max=3, max_cost=24)
        agg = aggregate_costs(vol, params(d_max=3, p1=4, p2=18))
        assert np.array_equal(agg.costs, np.full(C.shape, 48.0, np.float32))

    def test_single_path_equals_naive_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            C = rng.integers(0, 30, (1, 12, 4)).astype(np.uint16)
            vol = CostVolume(costs=C, d_min=0, d_max=3, max_cost=30)
            L = aggregate_one_path(vol, (0, 1), 10.0, 40.0)
            oracle = naive_single_path_oracle(C[0].astype(float), 10.0, 40.0)
            assert np.array_equal(L[0], oracle.astype(np.float32))

    def test_normalized_recursion_matches_plain_dp(self):
        # L(x,d) = M(x,d) - min_k M(x-1,k): the subtracted running minimum
        # telescopes against the plain dynamic program
        rng = np.random.default_rng(5)
        for _ in range(50):
            C = rng.integers(0, 30, (1, 10, 4)).astype(np.uint16)
            vol = CostVolume(costs=C, d_min=0, d_max=3, max_cost=30)
            L = aggregate_one_path(vol, (0, 1), 7.0, 23.0)[0]
            M = plain_dp(C[0].astype(float), 7.0, 23.0)
            for x in range(1, 10):
                shift = M[x - 1].min()
                assert np.allclose(L[x], M[x] - shift, atol=1e-6)

    def test_dp_minimum_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            C = rng.integers(0, 20, (7, 3)).astype(float)
            p1, p2 = 5.0, 11.0
            M = plain_dp(C, p1, p2)
            best_enum = min(
                sequence_energy(C, seq, p1, p2)
                for seq in itertools.product(range(3), repeat=7)
            )
            assert M[-1].min() == best_enum

    def test_eight_paths_equal_sum_of_singles(self):
        left, right = random_dot_pair(shape=(20, 30), shift=3, seed=7)
        ld = census_transform(left, (5, 5))
        rd = census_transform(right, (5, 5))
        vol = matching_cost_volume(ld, rd, 0, 7, max_cost=24)
        p = params(d_max=7)
        agg = aggregate_costs(vol, p)
        total = np.zeros(vol.costs.shape, np.float32)
        for direction in p.directions:
            total += aggregate_one_path(vol, direction, p.p1, p.p2)
        assert np.array_equal(agg.costs, total)

    def test_backtracked_dp_solution_is_optimal(self):
        # energy of the DP-chosen sequence equals the enumerated optimum (slack 0)
        rng = np.random.default_rng(8)
        for _ in range(10):
            C = rng.integers(0, 20, (8, 4)).astype(float)
            p1, p2 = 6.0, 14.0
            M = plain_dp(C, p1, p2)
            seq = [int(np.argmin(M[-1]))]
            for x in range(len(C) - 1, 0, -1):
                d = seq[-1]
                best_k, best_v = 0, math.inf
                for k in range(4):
                    dd = abs(d - k)
                    pen = 0.0 if dd == 0 else (p1 if dd == 1 else p2)
                    v = M[x - 1, k] + pen
                    if v < best_v:
                        best_k, best_v = k, v
                seq.append(best_k)
            seq.reverse()
            best_enum = min(
                sequence_energy(C, s, p1, p2)
                for s in itertools.product(range(4), repeat=8)
            )
            assert sequence_energy(C, seq, p1, p2) == best_enum


class TestSelectDisparity:
    def test_identical_images_zero_disparity(self):
        left, _ = random_dot_pair(shift=0, seed=9)
        p = params(d_max=8)
        disp = run_sgm(left, left, p)
        interior = disp.values[4:-4, 10:-10]
        ivalid = disp.valid[4:-4, 10:-10]
        assert ivalid.mean() > 0.95
        assert np.all(np.abs(interior[ivalid]) <= 0.5)

    def test_shifted_stereogram_recovers_shift(self):
        left, right = random_dot_pair(shape=(64, 128), shift=7, seed=10)
        # 7x7 census: on pure random dots the 5x5 descriptor collides often
        # enough (rank-extreme windows) to cost ~3% of pixels to uniqueness
        p = params(d_max=15, census_window=(7, 7))
        disp = run_sgm(left, right, p, with_lr=True)
        # consistent region: x >= shift and clear of the census border
        region_vals = disp.values[4:-4, 10:110]
        region_valid = disp.valid[4:-4, 10:110]
        good = np.abs(region_vals - 7.0) <= 0.5
        assert (good & region_valid).sum() / region_valid.size >= 0.99

    def test_textureless_pair_all_invalid(self):
        flat = np.full((20, 40), 128, np.uint8)
        p = params(d_max=6)
        disp = run_sgm(flat, flat, p)
        assert not disp.valid.any()
        assert disp.values[0, 0] == -1.0

    def test_lr_check_kills_half_occluded_columns(self):
        left, right = random_dot_pair(shape=(32, 64), shift=5, seed=11)
        # corrupt a block of the right image; LR must invalidate the area
        right = right.copy()
        rng = np.random.default_rng(12)
        right[:, 20:30] = rng.integers(0, 256, (32, 10))
        p = params(d_max=10)
        disp = run_sgm(left, right, p, with_lr=True)
        from tagbridge.sgm import FLAG_LR_FAILED

        assert (disp.flags & FLAG_LR_FAILED).any()

    def test_determinism(self):
        left, right = random_dot_pair(shape=(40, 80), shift=4, seed=13)
        p = params(d_max=9)
        a = run_sgm(left, right, p, with_lr=True)
        b = run_sgm(left, right, p, with_lr=True)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.flags, b.flags)

    def test_p2_monotonically_smooths(self):
        # total count of >1 px jumps (over 10 seeds) must not grow with P2
        totals = []
        for p2 in (30.0, 120.0, 400.0):
            count = 0
            for seed in range(10):
                rng = np.random.default_rng(100 + seed)
                left = rng.integers(0, 256, (24, 48)).astype(np.uint8)
                noise = rng.normal(0, 12, left.shape)
                right = np.clip(np.roll(left, -3, axis=1) + noise, 0, 255).astype(np.uint8)
                p = params(d_max=7, p1=10.0, p2=p2)
                disp = run_sgm(left, right, p)
                vals = disp.values
                ok = disp.valid[:, :-1] & disp.valid[:, 1:]
                jumps = np.abs(vals[:, :-1] - vals[:, 1:]) > 1.0
                count += int((jumps & ok).sum())
            totals.append(count)
        assert totals[0] >= totals[1] >= totals[2]


class TestDisparityToCloud:
    def test_constant_disparity_constant_depth(self, stereo_cam):
        from tagbridge.sgm import DisparityMap

        baseline = 0.2
        Z0 = 5.0
        d0 = stereo_cam.focal_px * baseline / Z0
        H, W = 32, 40
        disp = DisparityMap(values=np.full((H, W), d0, np.float32),
                            valid=np.ones((H, W), bool),
                            flags=np.zeros((H, W), np.uint8))
        pose = Pose(t=np.zeros(3), r=np.zeros(3))
        cloud = disparity_to_cloud(disp, stereo_cam, baseline, pose)
        assert len(cloud) == H * W
        assert np.max(np.abs(cloud.positions[:, 2] - Z0)) < 1e-9

    def test_invalid_pixels_skipped(self, stereo_cam):
        from tagbridge.sgm import DisparityMap

        values = np.full((10, 10), 8.0, np.float32)
        valid = np.zeros((10, 10), bool)
        valid[2, 3] = True
        disp = DisparityMap(values=values, valid=valid, flags=np.zeros((10, 10), np.uint8))
        pose = Pose(t=np.zeros(3), r=np.zeros(3))
        cloud = disparity_to_cloud(disp, stereo_cam, 0.2, pose)
        assert len(cloud) == 1

    def test_color_sampling(self, stereo_cam):
        from tagbridge.sgm import DisparityMap

        H, W = 8, 8
        rgb = np.zeros((H, W, 3), np.uint8)
        rgb[:, :, 0] = np.arange(W)[None, :] * 10
        disp = DisparityMap(values=np.full((H, W), 5.0, np.float32),
                            valid=np.ones((H, W), bool),
                            flags=np.zeros((H, W), np.uint8))
        pose = Pose(t=np.zeros(3), r=np.zeros(3))
        cloud = disparity_to_cloud(disp, stereo_cam, 0.2, pose, color=rgb)
        assert cloud.colors is not None
        assert cloud.colors[3, 0] == 30  # row-major order: pixel (0,3) -> 4th point
