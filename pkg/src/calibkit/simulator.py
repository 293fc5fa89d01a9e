"""Synthetic scenes with known hand-eye correction for closed-loop checks.

A scene interpolates joint-space waypoints with a clamped cubic spline,
projects the keypoints that face the camera under the true correction,
corrupts them (Gaussian pixel noise, dropout, uniform outliers), shuffles
the observation order and keeps the true labels aside for scoring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

from .camera import Z_MIN, CameraIntrinsics, chain_point
from .geometry import (
    InstrumentModel,
    Transform,
    default_instrument_model,
    keypoint_normals_in_base,
    keypoints_in_base,
    look_at,
    rotation_angle,
    rotation_to_euler,
    state_to_transform,
)
from .visibility import RATIO_THRESHOLD, side_of_label, visibility_verdict

DISTURBANCE_LEVELS = {
    "low": (math.radians(1.0), 0.01),
    "medium": (math.radians(3.0), 0.03),
    "high": (math.radians(5.0), 0.05),
}
DEFAULT_INTRINSICS = CameraIntrinsics(1000.0, 1000.0, 640.0, 512.0)
DEFAULT_IMAGE_SIZE = (1280, 1024)
DEFAULT_CAMERA_EYE = (0.08, 0.05, 0.06)
DEFAULT_CAMERA_TARGET = (0.0, 0.125, 0.0)
DEFAULT_TRUE_STATE = (0.02, -0.015, 0.01, 0.01, -0.008, 0.006)
# used by facing_keypoints and as the optional extra detection filter
DEFAULT_MIN_VIEW_COS = 0.4


def default_camera() -> Transform:
    return look_at(DEFAULT_CAMERA_EYE, DEFAULT_CAMERA_TARGET)


@dataclass(frozen=True)
class DisturbanceSchedule:
    level: str = "off"
    period: int = 25
    target: str = "truth"

    def __post_init__(self):
        if self.level != "off" and self.level not in DISTURBANCE_LEVELS:
            raise ValueError(f"unknown disturbance level {self.level!r}")
        if self.period < 1:
            raise ValueError("disturbance period must be at least 1")
        if self.target not in ("truth", "estimate"):
            raise ValueError("disturbance target must be 'truth' or 'estimate'")

    @property
    def bounds(self) -> tuple[float, float]:
        return DISTURBANCE_LEVELS.get(self.level, (0.0, 0.0))

    def scheduled(self, frame_index: int) -> bool:
        return self.level != "off" and frame_index > 0 and frame_index % self.period == 0


@dataclass(frozen=True)
class Trajectory:
    """Joint waypoints at given frame indices, cubic in between, clipped to limits."""

    frames: np.ndarray
    waypoints: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=float)
        w = np.asarray(self.waypoints, dtype=float)
        if w.ndim != 2 or len(f) != len(w) or len(f) < 1:
            raise ValueError("waypoints must be (W, n) with one frame index each")
        if np.any(np.diff(f) <= 0):
            raise ValueError("waypoint frame indices must increase")
        object.__setattr__(self, "frames", f)
        object.__setattr__(self, "waypoints", w)

    def __call__(self, t: float) -> np.ndarray:
        if len(self.frames) == 1:
            q = self.waypoints[0].copy()
        else:
            q = self._spline(np.clip(t, self.frames[0], self.frames[-1]))
        if self.lower is not None:
            q = np.maximum(q, self.lower)
        if self.upper is not None:
            q = np.minimum(q, self.upper)
        return q

    @cached_property
    def _spline(self) -> CubicSpline:
        return CubicSpline(self.frames, self.waypoints, axis=0, bc_type="clamped")


@dataclass(frozen=True)
class SceneConfig:
    model: InstrumentModel
    intrinsics: CameraIntrinsics
    T_init: Transform
    true_state: np.ndarray
    trajectory: Trajectory
    frame_count: int = 500
    pixel_noise_sigma: float = 1.0
    outlier_count: int = 2
    outlier_box: tuple[float, float, float, float] = (0.0, 0.0, float(DEFAULT_IMAGE_SIZE[0]), float(DEFAULT_IMAGE_SIZE[1]))
    dropout_probability: float = 0.05
    disturbance: DisturbanceSchedule = field(default_factory=DisturbanceSchedule)
    rng_seed: int = 0
    min_view_cos: float | None = None
    gamma: float = RATIO_THRESHOLD
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValueError("frame_count must be at least 1")
        if self.pixel_noise_sigma < 0:
            raise ValueError("pixel noise must be non-negative")
        if self.outlier_count < 0:
            raise ValueError("outlier count must be non-negative")
        if not 0.0 <= self.dropout_probability <= 1.0:
            raise ValueError("dropout probability must lie in [0, 1]")
        u0, v0, u1, v1 = self.outlier_box
        if not (u1 > u0 and v1 > v0):
            raise ValueError("outlier box must have positive extent")
        if self.trajectory.waypoints.shape[1] != self.model.chain.n_joints:
            raise ValueError("trajectory joint count does not match the model")
        object.__setattr__(self, "true_state", np.asarray(self.true_state, dtype=float).reshape(6))


@dataclass(frozen=True)
class FrameRecord:
    index: int
    q: np.ndarray
    observations: np.ndarray
    labels: tuple
    true_state: np.ndarray
    estimate_kick: np.ndarray | None = None

    @property
    def n_outliers(self) -> int:
        return sum(1 for lbl in self.labels if lbl is None)


def apply_disturbance(true_state, schedule: DisturbanceSchedule, frame_index: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform per-component kick on scheduled frames; unchanged otherwise."""
    x = np.asarray(true_state, dtype=float).copy()
    if not schedule.scheduled(frame_index):
        return x
    a, t = schedule.bounds
    x[:3] += rng.uniform(-a, a, 3)
    x[3:] += rng.uniform(-t, t, 3)
    return x


def facing_keypoints(model: InstrumentModel, q, T_init: Transform, x, min_view_cos: float = DEFAULT_MIN_VIEW_COS):
    """Mask of keypoints whose surface normal is within ``acos(min_view_cos)`` of the camera ray."""
    pts = keypoints_in_base(model, q)
    normals = keypoint_normals_in_base(model, q)
    T = T_init.compose(state_to_transform(x))
    p_c = chain_point(T_init, x, pts)
    n_c = normals @ T.rotation.T
    to_cam = -p_c / np.linalg.norm(p_c, axis=1, keepdims=True)
    return np.sum(n_c * to_cam, axis=1) > min_view_cos


def visible_keypoints(model: InstrumentModel, q, T_init: Transform, x, k: CameraIntrinsics, gamma: float = RATIO_THRESHOLD, min_view_cos: float | None = None):
    """Ground-truth visible mask and exact camera-frame points.

    Visibility is the side verdict evaluated at the true pose. When the
    verdict is undefined (segment seen end-on) every keypoint facing the
    camera counts. ``min_view_cos`` optionally drops grazing keypoints too.
    """
    frames = model.frames(q)
    pts = np.array([frames[kp.joint_index].apply(kp.local_position) for kp in model.keypoints])
    p_c = chain_point(T_init, x, pts)
    in_front = p_c[:, 2] > Z_MIN
    verdict = visibility_verdict(model, q, T_init, x, k, gamma, frames=frames) if np.all(in_front) else None
    if verdict is None:
        vis = facing_keypoints(model, q, T_init, x, 0.0)
    else:
        vis = np.array([side_of_label(kp.label) in verdict.visible_sides for kp in model.keypoints])
    if min_view_cos is not None:
        vis &= facing_keypoints(model, q, T_init, x, min_view_cos)
    return vis & in_front, p_c


def generate_scene(config: SceneConfig) -> Iterator[FrameRecord]:
    rng = np.random.default_rng(config.rng_seed)
    k = config.intrinsics
    labels_all = config.model.labels
    x_true = config.true_state.copy()
    W, H = config.image_size
    u0, v0, u1, v1 = config.outlier_box
    for i in range(config.frame_count):
        kick = None
        if config.disturbance.scheduled(i):
            # each kick is drawn around the nominal correction, so the truth stays bounded
            moved = apply_disturbance(config.true_state, config.disturbance, i, rng)
            if config.disturbance.target == "truth":
                x_true = moved
            else:
                kick = moved - config.true_state
        q = config.trajectory(float(i))
        vis, p_c = visible_keypoints(config.model, q, config.T_init, x_true, k, config.gamma, config.min_view_cos)
        z = np.where(p_c[:, 2] > Z_MIN, p_c[:, 2], np.nan)
        px = np.column_stack([k.fx * p_c[:, 0] / z + k.cx, k.fy * p_c[:, 1] / z + k.cy])
        in_image = (px[:, 0] >= 0) & (px[:, 0] < W) & (px[:, 1] >= 0) & (px[:, 1] < H)
        keep = vis & in_image
        obs = px[keep]
        lbls = [labels_all[j] for j in np.flatnonzero(keep)]
        if config.pixel_noise_sigma > 0:
            obs = obs + rng.normal(0.0, config.pixel_noise_sigma, obs.shape)
        if config.dropout_probability > 0 and len(obs):
            survive = rng.random(len(obs)) >= config.dropout_probability
            obs = obs[survive]
            lbls = [lb for lb, s in zip(lbls, survive) if s]
        if config.outlier_count:
            out = np.column_stack(
                [rng.uniform(u0, u1, config.outlier_count), rng.uniform(v0, v1, config.outlier_count)]
            )
            obs = np.vstack([obs.reshape(-1, 2), out])
            lbls = lbls + [None] * config.outlier_count
        order = rng.permutation(len(obs))
        yield FrameRecord(
            index=i,
            q=np.asarray(q, dtype=float),
            observations=np.asarray(obs, dtype=float).reshape(-1, 2)[order],
            labels=tuple(lbls[j] for j in order),
            true_state=x_true.copy(),
            estimate_kick=kick,
        )


# stock scenes: (waypoint spacing in frames, joint half-ranges around the centre pose)
_CENTER_Q = np.array([0.0, 0.0, 0.1, 0.0, 0.0, 0.0])
_STOCK = {
    "sweep": (40, np.array([0.2, 0.2, 0.015, math.pi, 0.45, 0.45])),
    "fast": (8, np.array([0.2, 0.2, 0.015, math.pi, 0.45, 0.45])),
    "static": (250, np.array([0.03, 0.03, 0.003, 0.3, 0.1, 0.1])),
}
STOCK_SCENES = tuple(_STOCK)


def stock_trajectory(name: str, frame_count: int, seed: int = 0) -> Trajectory:
    if name not in _STOCK:
        raise ValueError(f"unknown stock scene {name!r}; choose from {STOCK_SCENES}")
    spacing, half = _STOCK[name]
    rng = np.random.default_rng([seed, 0x5EED])
    n_wp = max(2, int(math.ceil((frame_count - 1) / spacing)) + 1)
    frames = np.arange(n_wp) * float(spacing)
    wps = _CENTER_Q + rng.uniform(-1.0, 1.0, (n_wp, 6)) * half
    lo, hi = _CENTER_Q - half, _CENTER_Q + half
    return Trajectory(frames, wps, lo, hi)


def stock_scene(name: str = "sweep", seed: int = 0, frame_count: int = 500, **overrides) -> SceneConfig:
    """One of the shipped scenes with the default camera and true correction."""
    cfg = SceneConfig(
        model=default_instrument_model(),
        intrinsics=DEFAULT_INTRINSICS,
        T_init=default_camera(),
        true_state=np.array(DEFAULT_TRUE_STATE),
        trajectory=stock_trajectory(name, frame_count, seed),
        frame_count=frame_count,
        rng_seed=seed,
    )
    return replace(cfg, **overrides) if overrides else cfg


def random_true_state(rng: np.random.Generator, max_angle: float = math.radians(3.0), max_translation: float = 0.03) -> np.ndarray:
    """Correction drawn uniformly in the balls ``|Δr| <= max_angle``, ``|Δt| <= max_translation``."""
    def in_ball(radius):
        d = rng.normal(size=3)
        return d / np.linalg.norm(d) * radius * rng.random() ** (1.0 / 3.0)

    R = Rotation.from_rotvec(in_ball(max_angle)).as_matrix()
    return np.concatenate([rotation_to_euler(R).as_array(), in_ball(max_translation)])


def pose_errors(x_est, x_true) -> tuple[float, float]:
    """``(|Δt| mm, |Δr| rad)`` between two correction states."""
    Te = state_to_transform(x_est)
    Tt = state_to_transform(x_true)
    dt = 1000.0 * float(np.linalg.norm(Te.translation - Tt.translation))
    dr = rotation_angle(Te.rotation @ Tt.rotation.T)
    return dt, dr


@dataclass(frozen=True)
class AssociationScore:
    n_matched: int
    n_correct: int
    n_mismatched: int
    n_inliers: int

    @property
    def precision(self) -> float:
        return self.n_correct / self.n_matched if self.n_matched else math.nan

    @property
    def recall(self) -> float:
        return self.n_correct / self.n_inliers if self.n_inliers else math.nan


def score_association(assigned: Sequence, truth: Sequence) -> AssociationScore:
    """Compare per-observation assigned labels (``None`` = outlier) with the truth."""
    if len(assigned) != len(truth):
        raise ValueError("assigned and true label lists differ in length")
    matched = [(a, t) for a, t in zip(assigned, truth) if a is not None]
    correct = sum(1 for a, t in matched if a == t)
    inliers = sum(1 for t in truth if t is not None)
    return AssociationScore(len(matched), correct, len(matched) - correct, inliers)


def keypoint_errors_3d(model: InstrumentModel, q, x_est, x_true, T_init: Transform) -> np.ndarray:
    """Camera-frame distance (mm) between keypoints placed with the estimated and the true correction."""
    pts = keypoints_in_base(model, q)
    return 1000.0 * np.linalg.norm(chain_point(T_init, x_est, pts) - chain_point(T_init, x_true, pts), axis=1)


def score_run(estimates, truths, assigned_labels=None, true_labels=None, wall_times=None, model=None, qs=None, T_init=None) -> dict:
    """Per-frame metrics plus a summary dictionary.

    ``estimates`` and ``truths`` are aligned ``(n, 6)`` arrays; the label
    lists, wall times and 3D inputs are optional.
    """
    est = np.asarray(estimates, dtype=float).reshape(-1, 6)
    tru = np.asarray(truths, dtype=float).reshape(-1, 6)
    if len(est) != len(tru):
        raise ValueError("estimates and truths must be aligned")
    errs = np.array([pose_errors(e, t) for e, t in zip(est, tru)]).reshape(-1, 2)
    out: dict = {"dt_mm": errs[:, 0], "dr_rad": errs[:, 1]}
    if assigned_labels is not None and true_labels is not None:
        scores = [score_association(a, t) for a, t in zip(assigned_labels, true_labels)]
        out["precision"] = np.array([s.precision for s in scores])
        out["recall"] = np.array([s.recall for s in scores])
        out["n_mismatched"] = np.array([s.n_mismatched for s in scores])
    if model is not None and qs is not None and T_init is not None:
        out["kp_err_mm"] = np.array([np.mean(keypoint_errors_3d(model, q, e, t, T_init)) for q, e, t in zip(qs, est, tru)])
    if wall_times is not None:
        out["wall_time_s"] = np.asarray(wall_times, dtype=float)
    summary = {}
    for key, arr in out.items():
        arr = arr[np.isfinite(arr)]
        if len(arr):
            summary[key] = {"mean": float(np.mean(arr)), "median": float(np.median(arr)), "p95": float(np.percentile(arr, 95))}
    out["summary"] = summary
    return out
