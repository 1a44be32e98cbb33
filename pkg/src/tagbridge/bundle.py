"""Bundle block adjustment: refine exterior (and optionally interior)
orientation by minimizing reprojection error with Levenberg-Marquardt.

Dense normal equations throughout; the blocks handled here stay well below
~10^3 parameters, where correctness and verifiability beat sparse tricks.
The Jacobian is evaluated by central differences (relative step 1e-7).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    GaugeNotFixed,
    GimbalLock,
    SingularNormalEquations,
    Underconstrained,
)
from .geometry import (
    BEHIND_CAMERA_EPS,
    CameraIntrinsics,
    Pose,
    distort_normalized,
    rotation_from_angles,
)

logger = logging.getLogger(__name__)

# Residual assigned (per component) to measurements behind the camera.
BEHIND_RESIDUAL = 1e6
# Relative central-difference step for the numeric Jacobian.
JACOBIAN_REL_STEP = 1e-7
MAX_PHI_DEG = 89.0
LAMBDA_INIT = 1e-3
LAMBDA_MAX = 1e15


@dataclass(frozen=True)
class ParameterMask:
    """Which parameter blocks the solver may move."""

    poses: bool = True
    points: bool = True
    f: bool = False
    principal_point: bool = False
    distortion: bool = False


@dataclass
class BundleProblem:
    intrinsics: CameraIntrinsics
    poses: dict
    points: dict
    measurements: list  # (image_id, point_id, (2,) pixel)
    mask: ParameterMask = field(default_factory=ParameterMask)
    anchors: frozenset = frozenset()

    def __post_init__(self):
        self.anchors = frozenset(self.anchors)
        for image_id, point_id, _ in self.measurements:
            if image_id not in self.poses:
                raise ValueError(f"measurement references unknown image {image_id!r}")
            if point_id not in self.points:
                raise ValueError(f"measurement references unknown point {point_id!r}")
        for a in self.anchors:
            if a not in self.poses:
                raise ValueError(f"anchor references unknown image {a!r}")


@dataclass
class SolveReport:
    initial_rms: float
    final_rms: float
    iterations: int
    converged: bool
    damping_trace: list
    cost_trace: list = field(default_factory=list)  # cost after each accepted step


@dataclass
class ResidualEvaluation:
    residuals: np.ndarray  # (2M,), observed - projected, px
    rms: float
    behind_camera: np.ndarray  # (M,) bool


class _Packer:
    """Maps between a flat parameter vector and problem state, vectorized."""

    def __init__(self, problem: BundleProblem):
        self.problem = problem
        self.pose_ids = sorted(problem.poses)
        self.point_ids = sorted(problem.points)
        pose_index = {p: i for i, p in enumerate(self.pose_ids)}
        point_index = {p: i for i, p in enumerate(self.point_ids)}

        self.obs = np.array([m[2] for m in problem.measurements], dtype=float).reshape(-1, 2)
        self.meas_pose = np.array([pose_index[m[0]] for m in problem.measurements], dtype=int)
        self.meas_point = np.array([point_index[m[1]] for m in problem.measurements], dtype=int)

        self.base_t = np.array([problem.poses[p].t for p in self.pose_ids])
        self.base_r = np.array([problem.poses[p].r for p in self.pose_ids])
        self.base_pts = np.array([problem.points[p] for p in self.point_ids]).reshape(-1, 3)

        mask = problem.mask
        self.free_pose_rows = [i for i, p in enumerate(self.pose_ids)
                               if mask.poses and p not in problem.anchors]
        self.free_points = mask.points
        self.n_k = len(problem.intrinsics.k)

        n = 6 * len(self.free_pose_rows)
        if self.free_points:
            n += 3 * len(self.point_ids)
        self.io_slots = []
        if mask.f:
            self.io_slots.append("f")
        if mask.principal_point:
            self.io_slots += ["x0", "y0"]
        if mask.distortion:
            self.io_slots += [f"k{i}" for i in range(self.n_k)]
        self.n_params = n + len(self.io_slots)

    def initial_vector(self) -> np.ndarray:
        parts = []
        for i in self.free_pose_rows:
            parts.append(self.base_t[i])
            parts.append(self.base_r[i])
        if self.free_points:
            parts.append(self.base_pts.ravel())
        intr = self.problem.intrinsics
        io_vals = {"f": intr.f, "x0": intr.x0, "y0": intr.y0}
        io_vals.update({f"k{i}": intr.k[i] for i in range(self.n_k)})
        parts.append(np.array([io_vals[s] for s in self.io_slots]))
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, x: np.ndarray):
        t = self.base_t.copy()
        r = self.base_r.copy()
        off = 0
        for i in self.free_pose_rows:
            t[i] = x[off:off + 3]
            r[i] = x[off + 3:off + 6]
            off += 6
        if self.free_points:
            pts = x[off:off + 3 * len(self.point_ids)].reshape(-1, 3)
            off += 3 * len(self.point_ids)
        else:
            pts = self.base_pts
        intr = self.problem.intrinsics
        f, x0, y0 = intr.f, intr.x0, intr.y0
        k = list(intr.k)
        for slot in self.io_slots:
            v = float(x[off])
            off += 1
            if slot == "f":
                f = v
            elif slot == "x0":
                x0 = v
            elif slot == "y0":
                y0 = v
            else:
                k[int(slot[1:])] = v
        return t, r, pts, (f, x0, y0, tuple(k))

    def residuals(self, x: np.ndarray):
        t, r, pts, (f, x0, y0, k) = self.unpack(x)
        R = rotation_from_angles(r)
        d = pts[self.meas_point] - t[self.meas_pose]
        R_sel = R[self.meas_pose]
        cam = np.einsum("mji,mj->mi", R_sel, d)
        depth = cam[:, 2]
        behind = depth <= BEHIND_CAMERA_EPS
        safe = np.where(behind, 1.0, depth)
        norm = cam[:, :2] / safe[:, None]
        dist = distort_normalized(k, norm)
        focal = f / self.problem.intrinsics.pixel_pitch
        px = np.empty_like(dist)
        px[:, 0] = x0 + focal * dist[:, 0]
        px[:, 1] = y0 + focal * dist[:, 1]
        res = self.obs - px
        res[behind] = BEHIND_RESIDUAL
        return res.ravel(), behind

    def rebuild_problem(self, x: np.ndarray) -> BundleProblem:
        t, r, pts, (f, x0, y0, k) = self.unpack(x)
        poses = {p: Pose(t=t[i], r=r[i]) for i, p in enumerate(self.pose_ids)}
        points = {p: pts[i].copy() for i, p in enumerate(self.point_ids)}
        intr = replace(self.problem.intrinsics, f=f, x0=x0, y0=y0, k=tuple(k))
        return BundleProblem(
            intrinsics=intr, poses=poses, points=points,
            measurements=list(self.problem.measurements),
            mask=self.problem.mask, anchors=self.problem.anchors,
        )


def _rms(residuals: np.ndarray) -> float:
    if residuals.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(residuals ** 2)))


def reprojection_residuals(problem: BundleProblem) -> ResidualEvaluation:
    """Residual vector (2 entries per measurement, observed - projected) and RMS.

    Measurements whose point falls behind the camera contribute a fixed
    residual of 1e6 px per component and are flagged in `behind_camera`.
    """
    packer = _Packer(problem)
    res, behind = packer.residuals(packer.initial_vector())
    if behind.any():
        logger.warning("%d measurement(s) project behind the camera", int(behind.sum()))
    return ResidualEvaluation(residuals=res, rms=_rms(res), behind_camera=behind)


def numeric_jacobian(fun, x: np.ndarray, rel_step: float = JACOBIAN_REL_STEP) -> np.ndarray:
    """Central-difference Jacobian of fun(x) -> (N,) at x (step relative, floor 1)."""
    r0 = fun(x)
    J = np.empty((r0.size, x.size))
    for j in range(x.size):
        h = rel_step * max(abs(x[j]), 1.0)
        xp = x.copy()
        xp[j] += h
        xm = x.copy()
        xm[j] -= h
        J[:, j] = (fun(xp) - fun(xm)) / (2.0 * h)
    return J


def _check_preconditions(problem: BundleProblem, packer: _Packer):
    if problem.mask.poses and not problem.anchors:
        raise GaugeNotFixed("all poses free: anchor at least one pose id")
    if problem.mask.points:
        seen = {}
        for image_id, point_id, _ in problem.measurements:
            seen.setdefault(point_id, set()).add(image_id)
        for point_id in packer.point_ids:
            n = len(seen.get(point_id, ()))
            if n < 2:
                raise Underconstrained(point_id, n)
    max_phi = math.radians(MAX_PHI_DEG)
    for p in packer.pose_ids:
        if abs(problem.poses[p].r[1]) >= max_phi:
            raise GimbalLock(
                f"pose {p!r} has |phi| >= {MAX_PHI_DEG} deg; reparameterize the block"
            )


def solve(problem: BundleProblem, max_iters: int = 100,
          gradient_tol: float = 1e-10, step_tol: float = 1e-12):
    """Levenberg-Marquardt over the free parameter blocks.

    Damping starts at 1e-3, x10 on a rejected step, /10 on an accepted one.
    Terminates on max |J^T r| < gradient_tol, step norm < step_tol, or
    max_iters. Cost never increases. Returns (updated problem, SolveReport).
    """
    packer = _Packer(problem)
    _check_preconditions(problem, packer)

    def fun(x):
        return packer.residuals(x)[0]

    x = packer.initial_vector()
    r = fun(x)
    cost = float(r @ r)
    initial_rms = _rms(r)
    lam = LAMBDA_INIT
    trace = [lam]
    costs = [cost]
    converged = False
    iterations = 0
    max_phi = math.radians(MAX_PHI_DEG)

    if packer.n_params == 0:
        return packer.rebuild_problem(x), SolveReport(
            initial_rms, initial_rms, 0, True, trace, [cost])

    for iterations in range(1, max_iters + 1):
        J = numeric_jacobian(fun, x)
        g = J.T @ r
        if np.max(np.abs(g)) < gradient_tol:
            converged = True
            iterations -= 1
            break
        A = J.T @ J
        diag = np.maximum(np.diag(A), 1e-12)

        accepted = False
        while lam <= LAMBDA_MAX:
            try:
                delta = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError as err:
                raise SingularNormalEquations(str(err)) from None
            if np.linalg.norm(delta) < step_tol * (np.linalg.norm(x) + step_tol):
                converged = True
                break
            x_new = x + delta
            phi = _phi_values(packer, x_new)
            if phi.size and np.max(np.abs(phi)) >= max_phi:
                lam *= 10.0
                trace.append(lam)
                continue
            r_new = fun(x_new)
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                x, r, cost = x_new, r_new, cost_new
                lam = max(lam / 10.0, 1e-12)
                trace.append(lam)
                costs.append(cost)
                accepted = True
                break
            lam *= 10.0
            trace.append(lam)
        if converged or not accepted:
            break

    final_rms = _rms(r)
    report = SolveReport(initial_rms=initial_rms, final_rms=final_rms,
                         iterations=iterations, converged=converged,
                         damping_trace=trace, cost_trace=costs)
    if not converged:
        logger.warning("LM stopped without convergence after %d iterations (rms %.3e px)",
                       iterations, final_rms)
    return packer.rebuild_problem(x), report


def _phi_values(packer: _Packer, x: np.ndarray) -> np.ndarray:
    vals = []
    off = 0
    for _ in packer.free_pose_rows:
        vals.append(x[off + 4])
        off += 6
    return np.asarray(vals)
