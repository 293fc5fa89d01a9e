"""Sequential estimators for the hand-eye correction state.

``ekf_update``, ``aekf_update`` and ``pf_update`` are pure functions of the
previous state and the frame's matched pairs. :class:`CalibrationFilter`
wraps them into the stateful object the pipeline drives frame by frame.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numba import njit

from .association import Prediction
from .camera import Z_MIN, CameraIntrinsics, point_model, predict_batch
from .geometry import InstrumentModel, Transform, euler_to_rotation_batch
from .visibility import RATIO_THRESHOLD, VisibilityVerdict, prune_predictions, visibility_verdict

log = logging.getLogger(__name__)

FILTER_SIGMA_E = np.diag([5.0, 5.0, 5.0, 0.25, 0.25, 0.25]) * 1e-6
FILTER_SIGMA_V = np.diag([25.0, 25.0])
FILTER_KINDS = ("ekf", "aekf", "pf")


@dataclass(frozen=True)
class CalibrationState:
    x: np.ndarray
    sigma_x: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(6)
        P = np.array(self.sigma_x, dtype=float).reshape(6, 6)
        if not np.allclose(P, P.T, atol=1e-12, rtol=0):
            raise ValueError("state covariance must be symmetric")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "sigma_x", P)


@dataclass(frozen=True)
class FilterConfig:
    kind: str = "aekf"
    sigma_e: np.ndarray = field(default_factory=lambda: FILTER_SIGMA_E.copy())
    sigma_v: np.ndarray = field(default_factory=lambda: FILTER_SIGMA_V.copy())
    forget_factor: float = 0.6
    n_particles: int = 1000
    n_effective: float = 100
    rng_seed: int | None = 0
    pf_adapt_cov: bool = False
    pf_min_innovation: float = 1e-3

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ValueError(f"filter kind must be one of {FILTER_KINDS}, got {self.kind!r}")
        if not 0.0 < self.forget_factor <= 1.0:
            raise ValueError("forget factor must lie in (0, 1]")
        if self.n_particles < 1:
            raise ValueError("need at least one particle")
        if not 1 <= self.n_effective <= self.n_particles:
            raise ValueError("effective particle threshold must lie in [1, n_particles]")
        object.__setattr__(self, "sigma_e", np.array(self.sigma_e, dtype=float).reshape(6, 6))
        object.__setattr__(self, "sigma_v", np.array(self.sigma_v, dtype=float).reshape(2, 2))


@dataclass(frozen=True)
class MatchedPair:
    obs_pixel: np.ndarray
    label: str
    p_r: np.ndarray
    pred_pixel: np.ndarray

    @property
    def innovation(self) -> np.ndarray:
        return np.asarray(self.obs_pixel, dtype=float) - self.pred_pixel


@dataclass(frozen=True)
class FilterOutput:
    state: CalibrationState
    innovations: list
    sigma_e: np.ndarray | None = None
    sigma_v: np.ndarray | None = None
    particles: np.ndarray | None = None
    weights: np.ndarray | None = None
    resampled: bool = False


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


PSD_CLIP = 1e-12
PSD_FAIL = -1e-9


def _psd(P: np.ndarray) -> np.ndarray:
    """Symmetrize; lift eigenvalues below ``PSD_CLIP`` to it when any is negative.

    Anything below ``PSD_FAIL`` is a numerical breakdown and raises.
    """
    P = _sym(P)
    ev, V = np.linalg.eigh(P)
    if ev[0] < PSD_FAIL:
        raise FloatingPointError(f"state covariance lost positive semi-definiteness (min eigenvalue {ev[0]:.3g})")
    if ev[0] < 0:
        P = _sym((V * np.maximum(ev, PSD_CLIP)) @ V.T)
    return P


def _ordered(matches: Sequence[MatchedPair]) -> list[MatchedPair]:
    return sorted(matches, key=lambda mp: mp.label)


@njit(cache=True)
def _ekf_sequential(x, P, Rc, tc, fx, fy, cx, cy, pts, obs, Sv):
    m = pts.shape[0]
    inns = np.zeros((m, 2))
    status = np.zeros(m, dtype=np.int64)  # 0 used, 1 behind camera, 2 singular C
    H = np.empty((2, 6))
    eye = np.eye(6)
    for i in range(m):
        z, u, v = point_model(x, Rc, tc, fx, fy, cx, cy, pts[i], H)
        if not z > Z_MIN:
            status[i] = 1
            continue
        inn = np.array([obs[i, 0] - u, obs[i, 1] - v])
        PHt = P @ H.T
        C = H @ PHt + Sv
        det = C[0, 0] * C[1, 1] - C[0, 1] * C[1, 0]
        if det == 0.0 or not np.isfinite(det):
            status[i] = 2
            continue
        Cinv = np.array([[C[1, 1], -C[0, 1]], [-C[1, 0], C[0, 0]]]) / det
        K = PHt @ Cinv
        x = x + K @ inn
        P = (eye - K @ H) @ P
        P = 0.5 * (P + P.T)
        inns[i] = inn
    return x, P, inns, status


def ekf_update(prev: CalibrationState, matches: Sequence[MatchedPair], sigma_e, sigma_v, T_init: Transform, k: CameraIntrinsics) -> FilterOutput:
    """One EKF step with the matched pairs processed one at a time.

    Each pair's prediction and Jacobian are evaluated at the running
    estimate. Pairs are processed in ascending label order.
    """
    P = np.ascontiguousarray(prev.sigma_x + sigma_e)
    ordered = _ordered(matches)
    if not ordered:
        return FilterOutput(CalibrationState(prev.x.copy(), _psd(P)), [])
    pts = np.ascontiguousarray(np.stack([mp.p_r for mp in ordered]), dtype=float)
    obs = np.ascontiguousarray(np.stack([mp.obs_pixel for mp in ordered]), dtype=float)
    x, P, inns, status = _ekf_sequential(
        prev.x.copy(),
        P,
        np.ascontiguousarray(T_init.rotation),
        np.ascontiguousarray(T_init.translation),
        float(k.fx),
        float(k.fy),
        float(k.cx),
        float(k.cy),
        pts,
        obs,
        np.ascontiguousarray(sigma_v, dtype=float),
    )
    for mp, st in zip(ordered, status):
        if st == 1:
            log.debug("skipping %s: behind camera", mp.label)
        elif st == 2:
            log.debug("skipping %s: singular innovation covariance", mp.label)
    innovations = [inns[i].copy() for i in range(len(ordered)) if status[i] == 0]
    return FilterOutput(CalibrationState(x, _psd(P)), innovations)


def aekf_update(prev: CalibrationState, sigma_e_prev, sigma_v_prev, matches: Sequence[MatchedPair], forget_factor: float, T_init: Transform, k: CameraIntrinsics) -> FilterOutput:
    """EKF step followed by innovation/residual covariance adaptation.

    The adaptation gains use the previous-step state covariance. With no
    matches both noise covariances are carried over unchanged.
    """
    sigma_e_prev = np.asarray(sigma_e_prev, dtype=float)
    sigma_v_prev = np.asarray(sigma_v_prev, dtype=float)
    ekf = ekf_update(prev, matches, sigma_e_prev, sigma_v_prev, T_init, k)
    ordered = _ordered(matches)
    m_k = len(ekf.innovations)
    if m_k == 0 or m_k != len(ordered):
        if m_k != len(ordered):
            log.debug("AEKF: %d pairs skipped by the EKF; adaptation disabled this frame", len(ordered) - m_k)
        return replace(ekf, sigma_e=sigma_e_prev.copy(), sigma_v=sigma_v_prev.copy())
    a = forget_factor
    w = (1.0 - a) / m_k
    sigma_e = a * sigma_e_prev
    sigma_v = a * sigma_v_prev
    x_t = ekf.state.x
    P_prev = prev.sigma_x
    pts = np.stack([mp.p_r for mp in ordered])
    _, px, Hs = predict_batch(T_init, x_t, pts, k)
    for mp, inn, g, H in zip(ordered, ekf.innovations, px, Hs):
        res = np.asarray(mp.obs_pixel, dtype=float) - g
        HPH = H @ P_prev @ H.T
        sigma_v = sigma_v + w * (np.outer(res, res) + HPH)
        C = HPH + sigma_v_prev
        K = P_prev @ H.T @ np.linalg.inv(C)
        Kinn = K @ inn
        sigma_e = sigma_e + w * np.outer(Kinn, Kinn)
    return replace(ekf, sigma_e=_sym(sigma_e), sigma_v=_sym(sigma_v))


def stratified_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn with one uniform sample per stratum ``[i/N, (i+1)/N)``."""
    n = len(weights)
    u = (np.arange(n) + rng.random(n)) / n
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, u, side="right").clip(0, n - 1)


def _sample_gaussian(mean, cov, n, rng):
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky(cov + 1e-12 * np.eye(len(mean)))
    return mean + rng.standard_normal((n, len(mean))) @ L.T


def particle_innovation_norms(particles: np.ndarray, matches: Sequence[MatchedPair], T_init: Transform, k: CameraIntrinsics) -> np.ndarray:
    """Stacked innovation 2-norm of every particle over the matched pairs."""
    pts = np.stack([mp.p_r for mp in matches])  # (m, 3)
    obs = np.stack([np.asarray(mp.obs_pixel, dtype=float) for mp in matches])
    R = euler_to_rotation_batch(particles[:, :3])  # (N, 3, 3)
    p = np.einsum("nij,mj->nmi", R, pts) + particles[:, None, 3:]
    p_c = p @ T_init.rotation.T + T_init.translation
    z = p_c[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * p_c[..., 0] / z + k.cx
        v = k.fy * p_c[..., 1] / z + k.cy
    d = np.stack([u, v], axis=-1) - obs[None]
    norms = np.sqrt(np.sum(d * d, axis=(1, 2)))
    norms[~np.all(z > Z_MIN, axis=1)] = np.inf
    return norms


def pf_update(prev: CalibrationState, matches: Sequence[MatchedPair], config: FilterConfig, rng: np.random.Generator, T_init: Transform, k: CameraIntrinsics) -> FilterOutput:
    """Particle step: sample around the previous estimate and reweight.

    Weights are reciprocal stacked innovation norms, floored at
    ``config.pf_min_innovation`` pixels. The estimate is the weighted mean;
    the covariance is passed through unless ``pf_adapt_cov`` is set.
    """
    if len(matches) == 0:
        return FilterOutput(prev, [])
    ordered = _ordered(matches)
    particles = _sample_gaussian(prev.x, prev.sigma_x, config.n_particles, rng)
    norms = particle_innovation_norms(particles, ordered, T_init, k)
    w = 1.0 / np.maximum(norms, config.pf_min_innovation)
    total = w.sum()
    if not total > 0:
        log.debug("all particles behind the camera; state kept")
        return FilterOutput(prev, [])
    w = w / total
    x = w @ particles
    P = prev.sigma_x
    if config.pf_adapt_cov:
        d = particles - x
        P = _sym((d * w[:, None]).T @ d)
    resampled = False
    ess = 1.0 / float(np.sum(w * w))
    # uniform weights sum to an ESS a few ulps short of N_p
    if ess < config.n_effective - 1e-9 * config.n_particles:
        idx = stratified_resample(w, rng)
        particles = particles[idx]
        w = np.full(len(w), 1.0 / len(w))
        resampled = True
    _, px, _ = predict_batch(T_init, x, np.stack([mp.p_r for mp in ordered]), k)
    innovations = [np.asarray(mp.obs_pixel, dtype=float) - g for mp, g in zip(ordered, px)]
    return FilterOutput(CalibrationState(x, P), innovations, particles=particles, weights=w, resampled=resampled)


def predict_keypoints(
    x,
    model: InstrumentModel,
    q,
    T_init: Transform,
    k: CameraIntrinsics,
    visibility: bool = True,
    gamma: float = RATIO_THRESHOLD,
    return_verdict: bool = False,
    frames=None,
):
    """Predicted pixels and Jacobians of the model keypoints at state ``x``.

    Keypoints behind the camera are dropped; with ``visibility`` on,
    keypoints on sides judged invisible are dropped too.
    """
    if frames is None:
        frames = model.frames(q)
    pts = np.array([frames[kp.joint_index].apply(kp.local_position) for kp in model.keypoints])
    p_c, px, Hs = predict_batch(T_init, x, pts, k)
    preds = [
        Prediction(kp.label, px[i], pts[i], Hs[i])
        for i, kp in enumerate(model.keypoints)
        if p_c[i, 2] > Z_MIN
    ]
    verdict: VisibilityVerdict | None = None
    if visibility:
        pixels = {p.label: p.pixel for p in preds if p.label[0] in "rp"}
        verdict = visibility_verdict(model, q, T_init, x, k, gamma, frames=frames, pixels=pixels)
        preds = prune_predictions(preds, verdict)
    if return_verdict:
        return preds, verdict
    return preds


class CalibrationFilter:
    """Stateful wrapper that owns the estimate and, for AEKF/PF, the adapted noise or RNG."""

    def __init__(self, config: FilterConfig, initial: CalibrationState):
        self.config = config
        self.state = initial
        self.sigma_e = config.sigma_e.copy()
        self.sigma_v = config.sigma_v.copy()
        self.rng = np.random.default_rng(config.rng_seed)
        self.last: FilterOutput | None = None

    def step(self, matches: Sequence[MatchedPair], T_init: Transform, k: CameraIntrinsics) -> FilterOutput:
        cfg = self.config
        if cfg.kind == "ekf":
            out = ekf_update(self.state, matches, self.sigma_e, self.sigma_v, T_init, k)
        elif cfg.kind == "aekf":
            out = aekf_update(self.state, self.sigma_e, self.sigma_v, matches, cfg.forget_factor, T_init, k)
            self.sigma_e, self.sigma_v = out.sigma_e, out.sigma_v
        else:
            out = pf_update(self.state, matches, cfg, self.rng, T_init, k)
        self.state = out.state
        self.last = out
        return out


def rms_innovation(innovations: Sequence[np.ndarray]) -> float:
    if not innovations:
        return math.nan
    arr = np.asarray(innovations)
    return float(np.sqrt(np.mean(np.sum(arr * arr, axis=1))))

