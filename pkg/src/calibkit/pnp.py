"""Perspective-n-point: Gauss-Newton refinement wrapped in RANSAC.

Poses are camera-from-base transforms. The refinement reuses the camera
module's analytic Jacobian by re-linearising at the current pose each
iteration (``pose ∘ T(δ)`` with ``δ`` starting at zero).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .camera import Z_MIN, CameraIntrinsics, predict_batch
from .geometry import Transform, state_to_transform, transform_to_state

log = logging.getLogger(__name__)

MIN_SAMPLE = 6


class PnpFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class Correspondence:
    p_r: np.ndarray
    pixel: np.ndarray
    frame_index: int = 0


@dataclass(frozen=True)
class PnpResult:
    pose: Transform
    inliers: np.ndarray
    mean_error: float
    iterations: int = 0
    converged: bool = True
    diverged: bool = False
    extra: dict = field(default_factory=dict)


def _orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    R2 = U @ Vt
    if np.linalg.det(R2) < 0:
        U[:, -1] *= -1
        R2 = U @ Vt
    return R2


def reprojection_errors(pose: Transform, points_r, pixels, k: CameraIntrinsics) -> np.ndarray:
    """Per-point pixel error; points at or behind the camera get ``inf``."""
    pixels = np.asarray(pixels, dtype=float)
    p_c = np.asarray(points_r, dtype=float).reshape(-1, 3) @ pose.rotation.T + pose.translation
    z = np.where(np.abs(p_c[:, 2]) > Z_MIN, p_c[:, 2], np.nan)
    du = k.fx * p_c[:, 0] / z + k.cx - pixels[:, 0]
    dv = k.fy * p_c[:, 1] / z + k.cy - pixels[:, 1]
    err = np.sqrt(du * du + dv * dv)
    err[~(p_c[:, 2] > Z_MIN)] = np.inf
    return err


def _cost(pose, P, px, k):
    e = reprojection_errors(pose, P, px, k)
    return float(np.sum(e * e))


def pnp_refine(points_r, pixels, initial_pose: Transform, k: CameraIntrinsics, max_iter: int = 100, step_tol: float = 1e-10, max_halvings: int = 20) -> PnpResult:
    """Minimise the summed squared reprojection error over the 6-DOF pose.

    Each accepted step is backtracked (halved up to ``max_halvings`` times)
    until the cost does not increase. Divergence is reported when the full
    Gauss-Newton step increases the cost five iterations in a row.
    """
    P = np.asarray(points_r, dtype=float)
    px = np.asarray(pixels, dtype=float)
    if len(P) < 4:
        raise ValueError("need at least 4 correspondences")
    pose = initial_pose
    cost = _cost(pose, P, px, k)
    bad_streak = 0
    diverged = False
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p_c, pred, J = predict_batch(pose, np.zeros(6), P, k)
        if not np.all(p_c[:, 2] > Z_MIN):
            diverged = True
            break
        r = (px - pred).reshape(-1)
        A = J.reshape(-1, 6)
        delta, *_ = np.linalg.lstsq(A, r, rcond=None)
        if not np.all(np.isfinite(delta)):
            diverged = True
            break
        step = 1.0
        accepted = False
        for h in range(max_halvings + 1):
            cand = pose.compose(state_to_transform(step * delta))
            c = _cost(cand, P, px, k)
            if h == 0:
                bad_streak = bad_streak + 1 if c > cost else 0
            if c <= cost:
                accepted = True
                break
            step *= 0.5
        if bad_streak >= 5:
            diverged = True
            break
        if not accepted:
            converged = True
            break
        pose = Transform(_orthonormalize(cand.rotation), cand.translation)
        improvement = cost - c
        cost = c
        if np.linalg.norm(step * delta) < step_tol or improvement <= 1e-15 * max(cost, 1.0):
            converged = True
            break
    err = reprojection_errors(pose, P, px, k)
    mean_err = float(np.mean(err)) if len(err) else math.nan
    return PnpResult(pose, np.ones(len(P), dtype=bool), mean_err, it, converged, diverged)


def _seed_rotations():
    seeds = [np.eye(3)]
    for axis in ([1, 1, 1], [1, 1, -1], [1, -1, 1], [-1, 1, 1]):
        a = np.asarray(axis, dtype=float) / math.sqrt(3.0)
        K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
        for ang in (2 * math.pi / 3, 4 * math.pi / 3):
            seeds.append(np.eye(3) + math.sin(ang) * K + (1 - math.cos(ang)) * K @ K)
    return seeds


SEED_ROTATIONS = _seed_rotations()


def seed_poses(points_r, pixels, k: CameraIntrinsics) -> list[Transform]:
    """Identity plus eight rotation seeds, each translated so the point
    centroid sits on the pixel centroid's ray at a depth matching the
    observed spread."""
    P = np.asarray(points_r, dtype=float)
    px = np.asarray(pixels, dtype=float)
    c3 = P.mean(axis=0)
    c2 = px.mean(axis=0)
    s3 = math.sqrt(np.mean(np.sum((P - c3) ** 2, axis=1)))
    s2 = math.sqrt(np.mean(np.sum((px - c2) ** 2, axis=1)))
    f = 0.5 * (k.fx + k.fy)
    z0 = f * s3 / s2 if s2 > 1e-9 else 1.0
    target = np.array([(c2[0] - k.cx) / k.fx * z0, (c2[1] - k.cy) / k.fy * z0, z0])
    return [Transform(R, target - R @ c3) for R in SEED_ROTATIONS]


def solve_multistart(points_r, pixels, k: CameraIntrinsics, initial_pose: Transform | None = None, good_enough_px: float | None = None, **kw) -> PnpResult:
    """Refine from the given pose (if any) and the seed set; keep the best."""
    starts = ([initial_pose] if initial_pose is not None else []) + seed_poses(points_r, pixels, k)
    best = None
    for pose in starts:
        res = pnp_refine(points_r, pixels, pose, k, **kw)
        if res.diverged or not math.isfinite(res.mean_error):
            continue
        if best is None or res.mean_error < best.mean_error:
            best = res
        if good_enough_px is not None and best.mean_error < good_enough_px:
            break
    if best is None:
        raise PnpFailure("no start converged")
    return best


def _fit_sample(P, px, k, initial_pose, best_pose, threshold_px) -> PnpResult:
    # once a consensus exists, a sample is only refined from it and the
    # caller's start; the full seed set is too slow on outlier-heavy pools
    if best_pose is None:
        return solve_multistart(P, px, k, initial_pose, good_enough_px=threshold_px / 2, max_iter=30)
    best = None
    for pose in (best_pose, initial_pose):
        if pose is None:
            continue
        res = pnp_refine(P, px, pose, k, max_iter=30)
        if not res.diverged and math.isfinite(res.mean_error) and (best is None or res.mean_error < best.mean_error):
            best = res
        if best is not None and best.mean_error < threshold_px / 2:
            break
    if best is None:
        raise PnpFailure("no start converged")
    return best


def pnp_ransac(
    points_r,
    pixels,
    k: CameraIntrinsics,
    iterations: int = 500,
    threshold_px: float = 3.0,
    seed: int | None = 0,
    initial_pose: Transform | None = None,
    confidence: float = 0.999,
) -> PnpResult:
    """Robust pose from correspondences with gross outliers.

    Six-point samples are fitted with multi-start refinement; consensus is
    the set of points reprojecting within ``threshold_px``. Sampling stops
    early once the usual ``log(1 - confidence) / log(1 - w^6)`` count for
    the best inlier ratio ``w`` has been reached. The winner is refined on
    its inliers twice (re-scoring in between).
    """
    P = np.asarray(points_r, dtype=float)
    px = np.asarray(pixels, dtype=float)
    n = len(P)
    if n < MIN_SAMPLE:
        raise PnpFailure(f"need at least {MIN_SAMPLE} correspondences, got {n}")
    rng = np.random.default_rng(seed)
    best_pose, best_inl, best_err = None, None, math.inf
    needed = iterations
    it = 0
    while it < min(iterations, needed):
        it += 1
        idx = rng.choice(n, MIN_SAMPLE, replace=False)
        try:
            fit = _fit_sample(P[idx], px[idx], k, initial_pose, best_pose, threshold_px)
        except PnpFailure:
            continue
        if fit.mean_error > threshold_px:
            continue
        err = reprojection_errors(fit.pose, P, px, k)
        inl = err < threshold_px
        score_err = float(np.mean(err[inl])) if inl.any() else math.inf
        if best_inl is None or inl.sum() > best_inl.sum() or (inl.sum() == best_inl.sum() and score_err < best_err):
            best_pose, best_inl, best_err = fit.pose, inl, score_err
            w = inl.sum() / n
            if w >= 1.0:
                needed = it
            elif w > 0:
                denom = math.log(1.0 - w**MIN_SAMPLE)
                needed = int(math.ceil(math.log(1.0 - confidence) / denom)) if denom < 0 else iterations
    if best_inl is None or best_inl.sum() < MIN_SAMPLE:
        raise PnpFailure("no model reached the minimum consensus")
    pose = best_pose
    inl = best_inl
    for _ in range(2):
        res = pnp_refine(P[inl], px[inl], pose, k)
        pose = res.pose
        err = reprojection_errors(pose, P, px, k)
        new_inl = err < threshold_px
        if new_inl.sum() >= MIN_SAMPLE:
            inl = new_inl
    err = reprojection_errors(pose, P, px, k)
    return PnpResult(pose, inl, float(np.mean(err[inl])), it, res.converged, res.diverged, {"samples": it})


def pose_to_state(pose: Transform, T_init: Transform, return_flag: bool = False):
    """Correction state ``x`` with ``pose = T_init ∘ T(x)``."""
    return transform_to_state(T_init.inverse().compose(pose), return_flag=return_flag)


def correspondences_arrays(corrs) -> tuple[np.ndarray, np.ndarray]:
    if not corrs:
        return np.zeros((0, 3)), np.zeros((0, 2))
    return np.stack([c.p_r for c in corrs]), np.stack([c.pixel for c in corrs])


class IncrementalPnP:
    """Baseline that re-solves on every correspondence seen so far."""

    def __init__(self, k: CameraIntrinsics, T_init: Transform, iterations: int = 100, threshold_px: float = 3.0, seed: int | None = 0):
        self.k = k
        self.T_init = T_init
        self.iterations = iterations
        self.threshold_px = threshold_px
        self.seed = seed
        self.pool: list[Correspondence] = []
        self.pose = T_init
        self.last: PnpResult | None = None

    def add(self, corrs) -> PnpResult | None:
        self.pool.extend(corrs)
        if len(self.pool) < MIN_SAMPLE:
            return None
        P, px = correspondences_arrays(self.pool)
        try:
            # always start from T_init so the result depends only on the pool and seed
            res = pnp_ransac(P, px, self.k, self.iterations, self.threshold_px, self.seed, initial_pose=self.T_init)
        except PnpFailure as exc:
            log.debug("incremental PnP: %s", exc)
            return None
        self.pose = res.pose
        self.last = res
        return res

    @property
    def state(self) -> np.ndarray:
        return pose_to_state(self.pose, self.T_init)

