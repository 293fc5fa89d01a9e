"""Observation/prediction data association.

Individual gating on the squared Mahalanobis distance, the stacked joint
compatibility test, and a branch-and-bound search (JCBB) over assignments
that maximises the number of non-trivial pairs and then minimises the
negative log matching likelihood.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
from numba import njit
from scipy.stats import chi2

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_NODE_BUDGET = 200_000

# Appendix defaults used for gating (radians^2 / meters^2, pixels^2).
GATE_SIGMA_E = np.diag([5.0, 5.0, 5.0, 0.25, 0.25, 0.25]) * 1e-2
GATE_SIGMA_V = np.diag([50.0, 50.0])
GATE_ALPHA = 0.975


@dataclass(frozen=True)
class Prediction:
    label: str
    pixel: np.ndarray
    p_r: np.ndarray
    jacobian: np.ndarray  # 2x6


@dataclass(frozen=True)
class Observation:
    index: int
    pixel: np.ndarray


@dataclass(frozen=True)
class Hypothesis:
    obs_index: int
    pred_label: str | None = None

    @property
    def trivial(self) -> bool:
        return self.pred_label is None


@dataclass(frozen=True)
class HypothesisSet:
    assignments: tuple[Hypothesis, ...] = ()
    n_pair: int = 0
    d2: float = 0.0
    l: float = 0.0
    nodes: int = 0
    exhausted: bool = False

    @property
    def pairs(self) -> list[tuple[int, str]]:
        return [(h.obs_index, h.pred_label) for h in self.assignments if h.pred_label is not None]

    def label_of(self, obs_index: int) -> str | None:
        for h in self.assignments:
            if h.obs_index == obs_index:
                return h.pred_label
        raise KeyError(obs_index)


@dataclass(frozen=True)
class NoiseModel:
    sigma_e: np.ndarray = field(default_factory=lambda: GATE_SIGMA_E.copy())
    sigma_v: np.ndarray = field(default_factory=lambda: GATE_SIGMA_V.copy())
    # optional per-label measurement covariance
    sigma_v_overrides: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        se = np.array(self.sigma_e, dtype=float).reshape(6, 6)
        sv = np.array(self.sigma_v, dtype=float).reshape(2, 2)
        for name, m in (("sigma_e", se), ("sigma_v", sv)):
            if not np.allclose(m, m.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(m).min() <= 0:
                raise ValueError(f"{name} must be positive definite")
        object.__setattr__(self, "sigma_e", se)
        object.__setattr__(self, "sigma_v", sv)
        object.__setattr__(
            self,
            "sigma_v_overrides",
            {k: np.array(v, dtype=float).reshape(2, 2) for k, v in dict(self.sigma_v_overrides).items()},
        )

    def sigma_v_for(self, label: str) -> np.ndarray:
        return self.sigma_v_overrides.get(label, self.sigma_v)


@lru_cache(maxsize=256)
def chi2_quantile(d: int, alpha: float) -> float:
    """Inverse CDF of the chi-square distribution with ``d`` degrees of freedom."""
    if int(d) != d or d < 1:
        raise ValueError(f"degrees of freedom must be a positive integer, got {d}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"confidence must lie in (0, 1), got {alpha}")
    return float(chi2.ppf(alpha, int(d)))


@dataclass(frozen=True)
class Compatibility:
    d2: float
    compatible: bool


def _inv2(S: np.ndarray):
    a, b, c, d = S[0, 0], S[0, 1], S[1, 0], S[1, 1]
    det = a * d - b * c
    if not det > 0 or not math.isfinite(det):
        return None, det
    return np.array([[d, -b], [-c, a]]) / det, det


def individual_compatibility(obs: Observation, pred: Prediction, noise: NoiseModel, alpha: float = GATE_ALPHA) -> Compatibility:
    h = np.asarray(obs.pixel, dtype=float) - np.asarray(pred.pixel, dtype=float)
    H = pred.jacobian
    C = H @ noise.sigma_e @ H.T + noise.sigma_v_for(pred.label)
    Cinv, _ = _inv2(C)
    if Cinv is None:
        log.debug("singular innovation covariance for obs %d / %s", obs.index, pred.label)
        return Compatibility(math.inf, False)
    d2 = float(h @ Cinv @ h)
    return Compatibility(d2, d2 < chi2_quantile(2, alpha))


def pairwise_d2(preds: Sequence[Prediction], obs: Sequence[Observation], noise: NoiseModel) -> np.ndarray:
    """``(m, n)`` matrix of individual squared Mahalanobis distances."""
    m, n = len(obs), len(preds)
    if m == 0 or n == 0:
        return np.zeros((m, n))
    Hs = np.stack([p.jacobian for p in preds])
    Sv = np.stack([noise.sigma_v_for(p.label) for p in preds])
    C = Hs @ noise.sigma_e @ Hs.transpose(0, 2, 1) + Sv
    det = C[:, 0, 0] * C[:, 1, 1] - C[:, 0, 1] * C[:, 1, 0]
    inv = np.empty_like(C)
    inv[:, 0, 0] = C[:, 1, 1]
    inv[:, 1, 1] = C[:, 0, 0]
    inv[:, 0, 1] = -C[:, 0, 1]
    inv[:, 1, 0] = -C[:, 1, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv /= det[:, None, None]
    h = np.stack([o.pixel for o in obs])[:, None, :] - np.stack([p.pixel for p in preds])[None, :, :]
    d2 = np.einsum("mni,nij,mnj->mn", h, inv, h)
    d2[:, ~(det > 0)] = np.inf
    return d2


def build_candidate_lists(preds: Sequence[Prediction], obs: Sequence[Observation], noise: NoiseModel, alpha: float = GATE_ALPHA) -> list[list[tuple[int, float]]]:
    """Per observation, the individually compatible ``(prediction position, d2)``.

    Each list is sorted by ascending d2 (ties by prediction position).
    """
    d2 = pairwise_d2(preds, obs, noise)
    gate = chi2_quantile(2, alpha)
    out = []
    for i in range(len(obs)):
        row = [(j, float(d2[i, j])) for j in range(len(preds)) if d2[i, j] < gate]
        row.sort(key=lambda t: (t[1], t[0]))
        out.append(row)
    return out


@dataclass(frozen=True)
class JointResult:
    l: float
    istrue: bool
    d2: float = 0.0
    k: int = 0


def joint_compatibility(hset: HypothesisSet | Sequence[Hypothesis], preds: Sequence[Prediction], obs: Sequence[Observation], noise: NoiseModel, alpha: float = GATE_ALPHA) -> JointResult:
    """Stacked joint test of every non-trivial member of ``hset``.

    ``C = H Σe Hᵀ + blockdiag(Σv)`` over the stacked 2k innovations.
    An empty set is incompatible with ``l = inf``; an all-trivial set is
    compatible with ``l = 0``.
    """
    members = hset.assignments if isinstance(hset, HypothesisSet) else tuple(hset)
    if len(members) == 0:
        return JointResult(math.inf, False)
    by_label = {p.label: p for p in preds}
    by_index = {o.index: o for o in obs}
    Hs, hs, Svs = [], [], []
    for hyp in members:
        if hyp.pred_label is None:
            continue
        p = by_label[hyp.pred_label]
        Hs.append(p.jacobian)
        hs.append(np.asarray(by_index[hyp.obs_index].pixel, dtype=float) - p.pixel)
        Svs.append(noise.sigma_v_for(p.label))
    k = len(Hs)
    if k == 0:
        return JointResult(0.0, True, 0.0, 0)
    H = np.vstack(Hs)
    h = np.concatenate(hs)
    C = H @ noise.sigma_e @ H.T
    for i, Sv in enumerate(Svs):
        C[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] += Sv
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        log.debug("joint innovation covariance is not positive definite (k=%d)", k)
        return JointResult(math.inf, False, math.inf, k)
    z = np.linalg.solve(L, h)
    d2 = float(z @ z)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    l = 2 * k * LOG_2PI + d2 + logdet
    return JointResult(l, d2 < chi2_quantile(2 * k, alpha), d2, k)


@njit(cache=True)
def _upper_bound(start, used, cand, ncand, seen):
    """Pairs still obtainable from observations ``start..m-1``: at most one
    per observation with a free candidate and one per free candidate."""
    m = ncand.shape[0]
    count = 0
    seen[:] = False
    free = 0
    for i in range(start, m):
        has = False
        for c in range(ncand[i]):
            j = cand[i, c]
            if not used[j]:
                has = True
                if not seen[j]:
                    seen[j] = True
                    free += 1
        if has:
            count += 1
    return min(count, free)


@njit(cache=True)
def _worth(ub, d2, l, kp, best_n, best_l, thresholds, min_inc, prune):
    if ub < best_n:
        return False
    if not prune:
        return True
    if ub > 0 and d2 >= thresholds[ub]:
        return False
    if ub == best_n and best_n > 0:
        # a tie needs exactly best_n - kp more pairs, each adding at least min_inc
        if l + (best_n - kp) * min_inc > best_l + 1e-9:
            return False
    return True


@njit(cache=True)
def _jcbb_kernel(H, Sv, h, cand, ncand, P0, thresholds, min_inc, prune, node_budget):
    """Iterative depth-first JCBB.

    Observations are visited in order; at each depth the candidates are tried
    in list order and the outlier branch last. The joint statistic is
    accumulated by sequential conditioning on a N(0, P0) state prior, which
    reproduces the stacked D² and log det C exactly.
    """
    m = ncand.shape[0]
    n = H.shape[0]
    mu = np.zeros((m + 1, 6))
    P = np.empty((m + 1, 6, 6))
    P[0] = P0
    d2s = np.zeros(m + 1)
    ls = np.zeros(m + 1)
    kps = np.zeros(m + 1, dtype=np.int64)
    cursor = np.zeros(m + 1, dtype=np.int64)
    assign = -np.ones(m, dtype=np.int64)
    best_assign = -np.ones(m, dtype=np.int64)
    used = np.zeros(n, dtype=np.bool_)
    seen = np.zeros(n, dtype=np.bool_)
    best_n = 0
    best_l = 0.0
    best_d2 = 0.0
    nodes = 1
    exhausted = False
    PHt = np.empty((6, 2))
    i = 0
    while i >= 0:
        if i == m:
            kp = kps[m]
            if kp > 0 and d2s[m] < thresholds[kp]:
                if kp > best_n or (kp == best_n and ls[m] < best_l):
                    best_n = kp
                    best_l = ls[m]
                    best_d2 = d2s[m]
                    best_assign[:] = assign
            i -= 1
            if assign[i] >= 0:
                used[assign[i]] = False
                assign[i] = -1
            continue
        c = cursor[i]
        descend = False
        if c < ncand[i]:
            cursor[i] += 1
            j = cand[i, c]
            if used[j]:
                continue
            used[j] = True
            ub = kps[i] + 1 + _upper_bound(i + 1, used, cand, ncand, seen)
            if ub >= best_n:
                Hj = H[j]
                for r in range(6):
                    for q in range(2):
                        acc = 0.0
                        for s in range(6):
                            acc += P[i, r, s] * Hj[q, s]
                        PHt[r, q] = acc
                s00 = Sv[j, 0, 0]
                s01 = Sv[j, 0, 1]
                s10 = Sv[j, 1, 0]
                s11 = Sv[j, 1, 1]
                for s in range(6):
                    s00 += Hj[0, s] * PHt[s, 0]
                    s01 += Hj[0, s] * PHt[s, 1]
                    s10 += Hj[1, s] * PHt[s, 0]
                    s11 += Hj[1, s] * PHt[s, 1]
                det = s00 * s11 - s01 * s10
                if det > 0 and np.isfinite(det):
                    i00 = s11 / det
                    i01 = -s01 / det
                    i10 = -s10 / det
                    i11 = s00 / det
                    nu0 = h[i, j, 0]
                    nu1 = h[i, j, 1]
                    for s in range(6):
                        nu0 -= Hj[0, s] * mu[i, s]
                        nu1 -= Hj[1, s] * mu[i, s]
                    w0 = i00 * nu0 + i01 * nu1
                    w1 = i10 * nu0 + i11 * nu1
                    inc = nu0 * w0 + nu1 * w1
                    d2n = d2s[i] + inc
                    ln = ls[i] + 2.0 * LOG_2PI + inc + np.log(det)
                    if _worth(ub, d2n, ln, kps[i] + 1, best_n, best_l, thresholds, min_inc, prune):
                        for r in range(6):
                            mu[i + 1, r] = mu[i, r] + PHt[r, 0] * w0 + PHt[r, 1] * w1
                            k0 = PHt[r, 0] * i00 + PHt[r, 1] * i10
                            k1 = PHt[r, 0] * i01 + PHt[r, 1] * i11
                            for s in range(6):
                                P[i + 1, r, s] = P[i, r, s] - (k0 * PHt[s, 0] + k1 * PHt[s, 1])
                        d2s[i + 1] = d2n
                        ls[i + 1] = ln
                        kps[i + 1] = kps[i] + 1
                        assign[i] = j
                        descend = True
            if not descend:
                used[j] = False
        elif c == ncand[i]:
            cursor[i] += 1
            ub = kps[i] + _upper_bound(i + 1, used, cand, ncand, seen)
            if _worth(ub, d2s[i], ls[i], kps[i], best_n, best_l, thresholds, min_inc, prune):
                mu[i + 1] = mu[i]
                P[i + 1] = P[i]
                d2s[i + 1] = d2s[i]
                ls[i + 1] = ls[i]
                kps[i + 1] = kps[i]
                assign[i] = -1
                descend = True
        else:
            i -= 1
            if i >= 0 and assign[i] >= 0:
                used[assign[i]] = False
                assign[i] = -1
            continue
        if descend:
            nodes += 1
            if nodes > node_budget:
                exhausted = True
                break
            i += 1
            cursor[i] = 0
    return best_assign, best_n, best_l, best_d2, nodes, exhausted


def jcbb(
    preds: Sequence[Prediction],
    obs: Sequence[Observation],
    noise: NoiseModel,
    alpha: float = GATE_ALPHA,
    candidates: list | None = None,
    node_budget: int = DEFAULT_NODE_BUDGET,
    prune: bool = True,
) -> HypothesisSet:
    """Joint compatibility branch and bound.

    Returns the jointly compatible assignment with the most non-trivial pairs,
    ties broken by the smallest ``l``. Observations are visited in input
    order and candidates in ascending individual d2, with the outlier branch
    last. When ``node_budget`` is exhausted the incumbent is returned and
    ``exhausted`` is set. ``prune=False`` disables the likelihood and
    chi-square bounds (the pair-count bound stays), for testing.
    """
    if len(obs) == 0:
        return HypothesisSet()
    if candidates is None:
        candidates = build_candidate_lists(preds, obs, noise, alpha)
    m, n = len(obs), len(preds)
    width = max([len(row) for row in candidates] + [1])
    cand = np.zeros((m, width), dtype=np.int64)
    ncand = np.zeros(m, dtype=np.int64)
    h = np.zeros((m, max(n, 1), 2))
    for i, row in enumerate(candidates):
        ncand[i] = len(row)
        oi = np.asarray(obs[i].pixel, dtype=float)
        for c, (j, _) in enumerate(row):
            cand[i, c] = j
            h[i, j] = oi - preds[j].pixel
    if n:
        H = np.ascontiguousarray(np.stack([p.jacobian for p in preds]), dtype=float)
        Sv = np.ascontiguousarray(np.stack([noise.sigma_v_for(p.label) for p in preds]), dtype=float)
        min_inc = min(2 * LOG_2PI + math.log(np.linalg.det(s)) for s in Sv)
    else:
        H = np.zeros((0, 2, 6))
        Sv = np.zeros((0, 2, 2))
        min_inc = 0.0
    thresholds = np.array([0.0] + [chi2_quantile(2 * k, alpha) for k in range(1, min(m, n) + 1)])
    best, best_n, best_l, best_d2, nodes, exhausted = _jcbb_kernel(
        H, Sv, h, cand, ncand, np.ascontiguousarray(noise.sigma_e), thresholds, min_inc, prune, node_budget
    )
    if exhausted:
        log.warning("JCBB node budget (%d) exhausted; returning incumbent", node_budget)
    assignments = tuple(Hypothesis(o.index, None if j < 0 else preds[j].label) for o, j in zip(obs, best))
    return HypothesisSet(assignments, int(best_n), float(best_d2), float(best_l), int(nodes), bool(exhausted))


def enumerate_assignments(preds, obs, noise, alpha=GATE_ALPHA):
    """Exhaustive optimum over all injective, gated, jointly compatible assignments.

    Exponential; intended for small test scenes only.
    """
    cands = build_candidate_lists(preds, obs, noise, alpha)
    best = (0, 0.0, tuple(Hypothesis(o.index) for o in obs))
    m = len(obs)

    def rec(i, used, acc):
        nonlocal best
        if i == m:
            hs = tuple(acc)
            k = sum(h.pred_label is not None for h in hs)
            if k == 0:
                return
            jr = joint_compatibility(hs, preds, obs, noise, alpha)
            if jr.istrue and (k > best[0] or (k == best[0] and jr.l < best[1])):
                best = (k, jr.l, hs)
            return
        for j, _ in cands[i]:
            if j in used:
                continue
            rec(i + 1, used | {j}, acc + [Hypothesis(obs[i].index, preds[j].label)])
        rec(i + 1, used, acc + [Hypothesis(obs[i].index)])

    rec(0, frozenset(), [])
    return best


def diagnostics(preds, obs, candidates, result: HypothesisSet) -> dict:
    """JSON-ready dump of one frame's candidate lists and chosen set."""
    return {
        "observations": [[float(v) for v in o.pixel] for o in obs],
        "predictions": {p.label: [float(v) for v in p.pixel] for p in preds},
        "candidates": [
            [{"label": preds[j].label, "d2": d2} for j, d2 in row] for row in candidates
        ],
        "chosen": [h.pred_label for h in result.assignments],
        "n_pair": result.n_pair,
        "d2": result.d2,
        "l": result.l,
        "nodes": result.nodes,
        "exhausted": result.exhausted,
    }


def warmup() -> None:
    """Load or compile the search kernel now instead of inside the first timed frame."""
    H = np.zeros((1, 2, 6))
    H[0, 0, 3] = H[0, 1, 4] = 1.0
    pred = Prediction("rf", np.zeros(2), np.zeros(3), H[0])
    jcbb([pred], [Observation(0, np.zeros(2))], NoiseModel())
