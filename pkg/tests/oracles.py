"""Independent reference implementations used by several test modules."""

from __future__ import annotations

import itertools
import math

import numpy as np

LD = np.longdouble


def _rot_ld(axis, angle):
    c, s = np.cos(LD(angle)), np.sin(LD(angle))
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    R = np.eye(3, dtype=LD)
    R[i, i] = c
    R[j, j] = c
    R[i, j] = -s
    R[j, i] = s
    return R


def pixel_chain_ld(Rc, tc, x, p, fx, fy, cx, cy):
    """Pixel of a base-frame point in extended precision."""
    x = np.asarray(x, dtype=LD)
    R = _rot_ld(2, x[0]) @ _rot_ld(1, x[1]) @ _rot_ld(0, x[2])
    pc = np.asarray(Rc, dtype=LD) @ (R @ np.asarray(p, dtype=LD) + x[3:]) + np.asarray(tc, dtype=LD)
    return np.array([LD(fx) * pc[0] / pc[2] + LD(cx), LD(fy) * pc[1] / pc[2] + LD(cy)]), pc


def fd_pixel_jacobian(Rc, tc, x, p, fx, fy, cx, cy, h=1e-6):
    """Central differences of the pixel chain with respect to the 6 state entries."""
    J = np.zeros((2, 6), dtype=LD)
    for c in range(6):
        xp = np.array(x, dtype=LD)
        xm = np.array(x, dtype=LD)
        xp[c] += LD(h)
        xm[c] -= LD(h)
        up, _ = pixel_chain_ld(Rc, tc, xp, p, fx, fy, cx, cy)
        um, _ = pixel_chain_ld(Rc, tc, xm, p, fx, fy, cx, cy)
        J[:, c] = (up - um) / (LD(2) * LD(h))
    return J.astype(float)


def jacobian_mismatch(analytic, numeric, rel=1e-5, abs_small=1e-7, small=1e-3):
    """Entries failing the mixed relative/absolute criterion."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    err = np.abs(a - n)
    tiny = np.abs(a) < small
    bad = np.where(tiny, err >= abs_small, err >= rel * np.abs(a))
    return int(np.sum(bad))


def gamma_series_cdf(d: int, q: float) -> float:
    """Regularised lower incomplete gamma P(d/2, q/2) by its power series."""
    a = d / 2.0
    x = q / 2.0
    term = 1.0 / a
    total = term
    n = 1
    while abs(term) > 1e-18 * abs(total):
        term *= x / (a + n)
        total += term
        n += 1
        if n > 10_000:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * total


def chi2_quantile_oracle(d: int, alpha: float) -> float:
    """Bisection on the series CDF."""
    lo, hi = 0.0, 1.0
    while gamma_series_cdf(d, hi) < alpha:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gamma_series_cdf(d, mid) < alpha:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13 * hi:
            break
    return 0.5 * (lo + hi)


def exhaustive_jcbb(H, h, Sv, Se, gate_pairs, thresholds):
    """Best ``(n_pair, l, assignment)`` over every injective gated assignment.

    ``H[j]`` is the 2x6 Jacobian of prediction j, ``h[i][j]`` the innovation
    of observation i against prediction j, ``gate_pairs[i]`` the set of
    individually compatible predictions for observation i, and
    ``thresholds[k]`` the chi-square bound for 2k degrees of freedom.
    """
    m = len(gate_pairs)
    options = [[None] + sorted(gate_pairs[i]) for i in range(m)]
    best = (0, 0.0, tuple([None] * m))
    for combo in itertools.product(*options):
        used = [j for j in combo if j is not None]
        if len(used) != len(set(used)) or not used:
            continue
        k = len(used)
        rows = [(i, j) for i, j in enumerate(combo) if j is not None]
        HH = np.vstack([H[j] for _, j in rows])
        hh = np.concatenate([h[i][j] for i, j in rows])
        C = HH @ Se @ HH.T
        for r, (_, j) in enumerate(rows):
            C[2 * r : 2 * r + 2, 2 * r : 2 * r + 2] += Sv[j]
        sol = np.linalg.solve(C, hh)
        d2 = float(hh @ sol)
        if d2 >= thresholds[k]:
            continue
        sign, logdet = np.linalg.slogdet(C)
        l = 2 * k * math.log(2 * math.pi) + d2 + logdet
        if k > best[0] or (k == best[0] and l < best[1]):
            best = (k, l, combo)
    return best


def cramer_d2(h, H, Se, Sv):
    """hᵀ (H Se Hᵀ + Sv)⁻¹ h with the 2x2 inverse written out."""
    C = H @ Se @ H.T + Sv
    a, b, c, d = C[0, 0], C[0, 1], C[1, 0], C[1, 1]
    det = a * d - b * c
    u, v = h
    return (u * (d * u - b * v) + v * (-c * u + a * v)) / det


def association_scene(seed, max_obs=6, max_pred=8, max_outliers=3):
    """Random small association problem around a projected point cloud.

    Returns ``(H, px, obs_px, Se, Sv)`` where some observations are noisy
    copies of predictions and the rest uniform outliers.
    """
    from calibkit.camera import CameraIntrinsics, predict_batch
    from calibkit.geometry import look_at

    rng = np.random.default_rng(seed)
    k = CameraIntrinsics(800.0, 800.0, 320.0, 240.0)
    T = look_at([0.3, 0.2, 0.25], [0.0, 0.0, 0.0])
    n = int(rng.integers(1, max_pred + 1))
    n_out = int(rng.integers(0, max_outliers + 1))
    n_in = int(rng.integers(0 if n_out else 1, min(n, max_obs - n_out) + 1))
    P = rng.uniform(-0.05, 0.05, (n, 3))
    x = rng.normal(0.0, 0.01, 6)
    _, px, H = predict_batch(T, x, P, k)
    sel = rng.permutation(n)[:n_in]
    obs = [px[j] + rng.normal(0.0, 3.0, 2) for j in sel] + [rng.uniform(0.0, 640.0, 2) for _ in range(n_out)]
    obs = [obs[i] for i in rng.permutation(len(obs))]
    Se = np.diag([1e-3] * 3 + [1e-4] * 3)
    Sv = np.diag([9.0, 9.0])
    return H, px, np.array(obs), Se, Sv


def solve_scene_exhaustively(H, px, obs, Se, Sv, alpha):
    gate = chi2_quantile_oracle(2, alpha)
    m, n = len(obs), len(px)
    h = [[obs[i] - px[j] for j in range(n)] for i in range(m)]
    pairs = [{j for j in range(n) if cramer_d2(h[i][j], H[j], Se, Sv) < gate} for i in range(m)]
    thresholds = [0.0] + [chi2_quantile_oracle(2 * kk, alpha) for kk in range(1, min(m, n) + 1)]
    return exhaustive_jcbb(H, h, [Sv] * n, Se, pairs, thresholds)
