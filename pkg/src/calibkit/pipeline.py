"""Per-frame calibration loop and its scikit-learn style wrapper.

One frame runs: predict keypoints at the current estimate, prune by side
visibility, associate with JCBB, then update the estimator on the matched
pairs. :class:`CalibrationPipeline` is the streaming engine;
:class:`HandEyeCalibrator` exposes it through ``fit``/``partial_fit``/
``predict``/``transform``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .association import (
    DEFAULT_NODE_BUDGET,
    GATE_ALPHA,
    GATE_SIGMA_E,
    GATE_SIGMA_V,
    NoiseModel,
    Observation,
    build_candidate_lists,
    jcbb,
)
from .camera import CameraIntrinsics, chain_point
from .estimators import (
    FILTER_SIGMA_E,
    FILTER_SIGMA_V,
    CalibrationFilter,
    CalibrationState,
    FilterConfig,
    MatchedPair,
    predict_keypoints,
    rms_innovation,
)
from .geometry import InstrumentModel, Transform, default_instrument_model, state_to_transform
from .pnp import Correspondence, IncrementalPnP
from .visibility import RATIO_THRESHOLD, prune_predictions, visibility_verdict

log = logging.getLogger(__name__)

PIPELINE_KINDS = ("ekf", "aekf", "pf", "pnp")
# prior spread of the correction before any frame: 3 degrees, 3 cm
DEFAULT_INITIAL_SIGMA_X = np.diag([math.radians(3.0) ** 2] * 3 + [0.03**2] * 3)


@dataclass(frozen=True)
class FrameResult:
    index: int
    n_obs: int
    n_pred: int
    n_pred_total: int
    assigned: tuple
    n_matched: int
    d2: float
    l: float
    x: np.ndarray
    rms_innovation: float
    assoc_time_s: float
    filter_time_s: float
    nodes: int = 0
    exhausted: bool = False
    visible_sides: tuple = ()


def frame_arrays(q, observations, n_joints: int | None = None):
    """Validate one frame's joint vector and ``(m, 2)`` pixel array."""
    q = check_array(np.asarray(q, dtype=float).reshape(1, -1), ensure_2d=True).ravel()
    if n_joints is not None and len(q) != n_joints:
        raise ValueError(f"expected {n_joints} joint values, got {len(q)}")
    obs = np.asarray(observations, dtype=float)
    if obs.size == 0:
        obs = obs.reshape(0, 2)
    else:
        obs = check_array(obs, ensure_2d=True)
    if obs.shape[1] != 2:
        raise ValueError(f"observations must be (m, 2), got {obs.shape}")
    return q, obs


class CalibrationPipeline:
    """Streaming engine holding the estimate between frames."""

    def __init__(
        self,
        model: InstrumentModel,
        intrinsics: CameraIntrinsics,
        T_init: Transform,
        filter_config: FilterConfig | None = None,
        initial: CalibrationState | None = None,
        kind: str | None = None,
        gate_noise: NoiseModel | None = None,
        alpha: float = GATE_ALPHA,
        visibility: bool = True,
        gamma: float = RATIO_THRESHOLD,
        node_budget: int = DEFAULT_NODE_BUDGET,
        pnp_iterations: int = 100,
        pnp_threshold_px: float = 3.0,
    ):
        self.model = model
        self.k = intrinsics
        self.T_init = T_init
        self.filter_config = filter_config or FilterConfig()
        self.kind = kind or self.filter_config.kind
        if self.kind not in PIPELINE_KINDS:
            raise ValueError(f"filter must be one of {PIPELINE_KINDS}")
        self.gate_noise = gate_noise or NoiseModel()
        self.alpha = alpha
        self.visibility = visibility
        self.gamma = gamma
        self.node_budget = node_budget
        initial = initial or CalibrationState(np.zeros(6), DEFAULT_INITIAL_SIGMA_X)
        if self.kind == "pnp":
            self.filter = None
            self.pnp = IncrementalPnP(intrinsics, T_init, pnp_iterations, pnp_threshold_px, self.filter_config.rng_seed)
            self.pnp.pose = T_init.compose(state_to_transform(initial.x))
            self.state = initial
        else:
            self.filter = CalibrationFilter(replace(self.filter_config, kind=self.kind), initial)
            self.pnp = None
        self.n_frames = 0

    @property
    def x(self) -> np.ndarray:
        return self.filter.state.x if self.filter is not None else self.state.x

    def kick(self, delta) -> None:
        """Add ``delta`` to the current estimate (estimate-side disturbance)."""
        delta = np.asarray(delta, dtype=float)
        if self.filter is not None:
            st = self.filter.state
            self.filter.state = CalibrationState(st.x + delta, st.sigma_x)
        else:
            self.state = CalibrationState(self.state.x + delta, self.state.sigma_x)
            self.pnp.pose = self.T_init.compose(state_to_transform(self.state.x))

    def process(self, q, observations, index: int | None = None) -> FrameResult:
        q, obs_px = frame_arrays(q, observations, self.model.chain.n_joints)
        t0 = time.perf_counter()
        preds, n_total, obs, _, hset, verdict = self.associate(q, obs_px)
        t1 = time.perf_counter()
        by_label = {p.label: p for p in preds}
        matches = [
            MatchedPair(obs_px[h.obs_index], h.pred_label, by_label[h.pred_label].p_r, by_label[h.pred_label].pixel)
            for h in hset.assignments
            if h.pred_label is not None
        ]
        if self.filter is not None:
            out = self.filter.step(matches, self.T_init, self.k)
            rms = rms_innovation(out.innovations)
        else:
            corrs = [Correspondence(m.p_r, np.asarray(m.obs_pixel, dtype=float), self.n_frames) for m in matches]
            res = self.pnp.add(corrs)
            if res is not None:
                self.state = CalibrationState(self.pnp.state, self.state.sigma_x)
            rms = rms_innovation([m.innovation for m in matches])
        t2 = time.perf_counter()
        idx = self.n_frames if index is None else index
        self.n_frames += 1
        return FrameResult(
            index=idx,
            n_obs=len(obs_px),
            n_pred=len(preds),
            n_pred_total=n_total,
            assigned=tuple(h.pred_label for h in hset.assignments),
            n_matched=hset.n_pair,
            d2=hset.d2,
            l=hset.l,
            x=self.x.copy(),
            rms_innovation=rms,
            assoc_time_s=t1 - t0,
            filter_time_s=t2 - t1,
            nodes=hset.nodes,
            exhausted=hset.exhausted,
            visible_sides=tuple(sorted(verdict.visible_sides)) if verdict is not None else (),
        )

    def associate(self, q, obs_px):
        """Predictions, pre-pruning count, observations, candidates, JCBB result and verdict."""
        frames = self.model.frames(q)
        preds = predict_keypoints(self.x, self.model, q, self.T_init, self.k, visibility=False, frames=frames)
        n_total = len(preds)
        verdict = None
        if self.visibility:
            pixels = {p.label: p.pixel for p in preds if p.label[0] in "rp"}
            verdict = visibility_verdict(self.model, q, self.T_init, self.x, self.k, self.gamma, frames=frames, pixels=pixels)
            preds = prune_predictions(preds, verdict)
        obs = [Observation(i, p) for i, p in enumerate(obs_px)]
        cands = build_candidate_lists(preds, obs, self.gate_noise, self.alpha)
        hset = jcbb(preds, obs, self.gate_noise, self.alpha, cands, self.node_budget)
        return preds, n_total, obs, cands, hset, verdict


class HandEyeCalibrator(TransformerMixin, BaseEstimator):
    """Streaming hand-eye correction estimator.

    ``X`` is a sequence of frames, each a ``(q, observations)`` pair (or any
    object with ``q`` and ``observations`` attributes). ``fit`` starts from
    the initial state and consumes every frame; ``partial_fit`` continues
    from the current estimate. ``predict`` returns per-frame observation
    labels at the current estimate without updating it. ``transform`` maps
    base-frame points into the camera frame with the fitted correction.
    """

    def __init__(
        self,
        filter="aekf",
        visibility=True,
        gamma=RATIO_THRESHOLD,
        alpha=GATE_ALPHA,
        gate_sigma_e=None,
        gate_sigma_v=None,
        sigma_e=None,
        sigma_v=None,
        forget_factor=0.6,
        n_particles=1000,
        n_effective=100,
        pf_adapt_cov=False,
        random_state=0,
        initial_state=None,
        initial_sigma_x=None,
        model=None,
        intrinsics=None,
        T_init=None,
        node_budget=DEFAULT_NODE_BUDGET,
    ):
        self.filter = filter
        self.visibility = visibility
        self.gamma = gamma
        self.alpha = alpha
        self.gate_sigma_e = gate_sigma_e
        self.gate_sigma_v = gate_sigma_v
        self.sigma_e = sigma_e
        self.sigma_v = sigma_v
        self.forget_factor = forget_factor
        self.n_particles = n_particles
        self.n_effective = n_effective
        self.pf_adapt_cov = pf_adapt_cov
        self.random_state = random_state
        self.initial_state = initial_state
        self.initial_sigma_x = initial_sigma_x
        self.model = model
        self.intrinsics = intrinsics
        self.T_init = T_init
        self.node_budget = node_budget

    def _build(self) -> CalibrationPipeline:
        if self.intrinsics is None or self.T_init is None:
            raise ValueError("intrinsics and T_init are required")
        x0 = np.zeros(6) if self.initial_state is None else check_array(np.reshape(self.initial_state, (1, 6))).ravel()
        P0 = DEFAULT_INITIAL_SIGMA_X if self.initial_sigma_x is None else np.asarray(self.initial_sigma_x, dtype=float)
        kind = self.filter
        cfg = FilterConfig(
            kind="aekf" if kind == "pnp" else kind,
            sigma_e=FILTER_SIGMA_E if self.sigma_e is None else self.sigma_e,
            sigma_v=FILTER_SIGMA_V if self.sigma_v is None else self.sigma_v,
            forget_factor=self.forget_factor,
            n_particles=self.n_particles,
            n_effective=self.n_effective,
            rng_seed=self.random_state,
            pf_adapt_cov=self.pf_adapt_cov,
        )
        noise = NoiseModel(
            GATE_SIGMA_E if self.gate_sigma_e is None else self.gate_sigma_e,
            GATE_SIGMA_V if self.gate_sigma_v is None else self.gate_sigma_v,
        )
        return CalibrationPipeline(
            self.model or default_instrument_model(),
            self.intrinsics,
            self.T_init,
            cfg,
            CalibrationState(x0, P0),
            kind=kind,
            gate_noise=noise,
            alpha=self.alpha,
            visibility=self.visibility,
            gamma=self.gamma,
            node_budget=self.node_budget,
        )

    @staticmethod
    def _unpack(frame):
        if hasattr(frame, "q"):
            return frame.q, frame.observations
        q, obs = frame
        return q, obs

    def fit(self, X, y=None):
        self.pipeline_ = self._build()
        self.results_ = []
        return self.partial_fit(X)

    def partial_fit(self, X, y=None):
        if not hasattr(self, "pipeline_"):
            self.pipeline_ = self._build()
            self.results_ = []
        for frame in X:
            kick = getattr(frame, "estimate_kick", None)
            if kick is not None:
                self.pipeline_.kick(kick)
            q, obs = self._unpack(frame)
            self.results_.append(self.pipeline_.process(q, obs, getattr(frame, "index", None)))
        self.state_ = self.pipeline_.x.copy()
        st = self.pipeline_.filter.state if self.pipeline_.filter is not None else self.pipeline_.state
        self.sigma_x_ = st.sigma_x.copy()
        self.n_frames_seen_ = self.pipeline_.n_frames
        return self

    @property
    def trace_(self) -> np.ndarray:
        check_is_fitted(self, "state_")
        return np.array([r.x for r in self.results_]).reshape(-1, 6)

    def predict(self, X):
        check_is_fitted(self, "state_")
        out = []
        for frame in X:
            q, obs = self._unpack(frame)
            q, obs = frame_arrays(q, obs, self.pipeline_.model.chain.n_joints)
            _, _, _, _, hset, _ = self.pipeline_.associate(q, obs)
            out.append([h.pred_label for h in hset.assignments])
        return out

    def transform(self, X):
        check_is_fitted(self, "state_")
        P = check_array(X)
        if P.shape[1] != 3:
            raise ValueError("transform expects (n, 3) base-frame points")
        return chain_point(self.pipeline_.T_init, self.state_, P)
