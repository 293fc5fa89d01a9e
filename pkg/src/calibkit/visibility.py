"""Side-visibility pruning of predicted keypoints.

The roll and pitch links are modelled as cylinders. Their projected
silhouette edges and centre lines decide whether one side of the instrument
dominates the view or two adjacent sides are visible, and keypoints on the
remaining sides are dropped from the prediction list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .camera import Z_MIN, BehindCameraError, CameraIntrinsics, chain_point, project
from .geometry import InstrumentModel, Segment, Transform

RATIO_THRESHOLD = 100.0
SIDE_OF = {"f": "front", "b": "back", "l": "left", "r": "right"}


class DegenerateAxisError(ValueError):
    """The segment axis projects to (almost) a single pixel."""


@dataclass(frozen=True)
class Line2D:
    """``a u + b v + c = 0`` with ``a² + b² = 1``."""

    a: float
    b: float
    c: float

    @classmethod
    def through(cls, p, q) -> "Line2D":
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        d = q - p
        nrm = math.hypot(d[0], d[1])
        if nrm == 0:
            raise DegenerateAxisError("line through coincident points")
        a, b = -d[1] / nrm, d[0] / nrm
        return cls(a, b, -(a * p[0] + b * p[1]))

    def signed(self, p) -> np.ndarray | float:
        p = np.asarray(p, dtype=float)
        return self.a * p[..., 0] + self.b * p[..., 1] + self.c

    def distance(self, p):
        return np.abs(self.signed(p))


@dataclass(frozen=True)
class SegmentSilhouette:
    edge_upper: Line2D
    edge_lower: Line2D
    center: Line2D


@dataclass(frozen=True)
class VisibilityVerdict:
    visible_sides: frozenset
    dominant: str | None = None
    ratios: tuple[float, float] = (math.nan, math.nan)
    counts: Mapping[str, int] = field(default_factory=dict)


def silhouette_from_axis(A, B, radius: float, k: CameraIntrinsics, min_axis_px: float = 1.0, z_min: float = Z_MIN) -> SegmentSilhouette:
    """Silhouette of a cylinder with camera-frame axis endpoints ``A``, ``B``.

    The two edges are the images of the generators where the viewing cone
    from the camera centre is tangent to the cylinder.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    pa, pb = project(k, np.stack([A, B]), z_min)
    if math.hypot(*(pb - pa)) < min_axis_px:
        raise DegenerateAxisError("segment axis projects within one pixel")
    axis = (B - A) / np.linalg.norm(B - A)
    w = -A - np.dot(-A, axis) * axis
    D = np.linalg.norm(w)
    if D <= radius:
        raise BehindCameraError("camera centre lies inside the cylinder")
    w_hat = w / D
    e = np.cross(axis, w_hat)
    cos_t = radius / D
    sin_t = math.sqrt(1.0 - cos_t * cos_t)
    center = Line2D.through(pa, pb)
    offs = [radius * (cos_t * w_hat + sgn * sin_t * e) for sgn in (1.0, -1.0)]
    q = project(k, np.stack([A + offs[0], B + offs[0], A + offs[1], B + offs[1]]), z_min)
    edges = [Line2D.through(q[0], q[1]), Line2D.through(q[2], q[3])]
    mid = 0.5 * (pa + pb)
    # the edge lying on the positive side of the oriented centre line is "upper"
    side0 = center.signed(_closest_on(edges[0], mid))
    if side0 >= 0:
        return SegmentSilhouette(edges[0], edges[1], center)
    return SegmentSilhouette(edges[1], edges[0], center)


def _closest_on(line: Line2D, p):
    s = line.signed(p)
    return np.asarray(p) - s * np.array([line.a, line.b])


def project_segment_silhouette(model: InstrumentModel, segment: Segment, q, T_init: Transform, x, k: CameraIntrinsics, frames=None) -> SegmentSilhouette:
    if frames is None:
        frames = model.frames(q)
    A = chain_point(T_init, x, frames[segment.start_joint].translation)
    B = chain_point(T_init, x, frames[segment.end_joint].translation)
    return silhouette_from_axis(A, B, segment.radius, k)


def center_edge_ratios(silhouette: SegmentSilhouette, roll_pixels: Mapping[str, np.ndarray]) -> tuple[float, float]:
    """``(eta_fb, eta_lr)`` from the four roll keypoint projections keyed by side."""

    def terms(side):
        p = roll_pixels[side]
        dc = float(silhouette.center.distance(p))
        de = min(float(silhouette.edge_upper.distance(p)), float(silhouette.edge_lower.distance(p)))
        return dc, de

    out = []
    for s1, s2 in (("front", "back"), ("left", "right")):
        c1, e1 = terms(s1)
        c2, e2 = terms(s2)
        den = e1 + e2
        out.append(math.inf if den < 1e-9 else (c1 + c2) / den)
    return out[0], out[1]


def count_up(silhouettes: Mapping[str, SegmentSilhouette], pixels: Mapping[str, np.ndarray]) -> dict[str, int]:
    """Per side, how many roll/pitch keypoints sit on the upper half of their segment."""
    counts = {s: 0 for s in SIDE_OF.values()}
    for label, px in pixels.items():
        fam = {"r": "roll", "p": "pitch"}.get(label[0])
        if fam is None or fam not in silhouettes:
            continue
        if silhouettes[fam].center.signed(px) > 0:
            counts[SIDE_OF[label[1]]] += 1
    return counts


def visible_sides(eta_fb: float, eta_lr: float, counts: Mapping[str, int], gamma: float = RATIO_THRESHOLD) -> VisibilityVerdict:
    """Decide the visible sides from the centre-edge ratios and side counts.

    A large ratio means that pair of sides sits on the silhouette edges, so
    the dominant side belongs to the other pair. Which member of a pair faces
    the camera is read off the perpendicular pair: with ``front x left``
    along the oriented centre line, front faces the camera exactly when the
    left-side keypoints lie on the upper half, and left faces it exactly
    when the back-side keypoints do. Ties go to front and left.
    """
    mf, mb, ml, mr = (counts.get(s, 0) for s in ("front", "back", "left", "right"))
    fb_choice = "front" if ml >= mr else "back"
    lr_choice = "left" if mb >= mf else "right"
    ratios = (eta_fb, eta_lr)
    if max(eta_fb, eta_lr) >= gamma:
        dominant = lr_choice if eta_fb >= eta_lr else fb_choice
        return VisibilityVerdict(frozenset([dominant]), dominant, ratios, dict(counts))
    return VisibilityVerdict(frozenset([fb_choice, lr_choice]), None, ratios, dict(counts))


def side_of_label(label: str) -> str:
    return SIDE_OF[label[1]]


def prune_predictions(preds: Sequence, verdict: VisibilityVerdict | None) -> list:
    """Keep predictions whose side is visible; ``None`` keeps everything."""
    if verdict is None:
        return list(preds)
    return [p for p in preds if side_of_label(p.label) in verdict.visible_sides]


def visibility_verdict(model: InstrumentModel, q, T_init: Transform, x, k: CameraIntrinsics, gamma: float = RATIO_THRESHOLD, frames=None, pixels: Mapping[str, np.ndarray] | None = None) -> VisibilityVerdict | None:
    """Full check for one frame; ``None`` when the geometry is degenerate."""
    if frames is None:
        frames = model.frames(q)
    segs = {"roll": model.roll_segment, "pitch": model.pitch_segment}
    ends = [frames[j].translation for s in segs.values() for j in (s.start_joint, s.end_joint)]
    axis_c = chain_point(T_init, x, np.stack(ends))
    sils = {}
    for i, (name, seg) in enumerate(segs.items()):
        try:
            sils[name] = silhouette_from_axis(axis_c[2 * i], axis_c[2 * i + 1], seg.radius, k)
        except (DegenerateAxisError, BehindCameraError):
            if name == "roll":
                return None
            # pitch link seen end-on: count roll keypoints only
    if pixels is None:
        kps = [kp for kp in model.keypoints if kp.family in ("roll", "pitch")]
        p_c = chain_point(T_init, x, np.stack([frames[kp.joint_index].apply(kp.local_position) for kp in kps]))
        try:
            px = project(k, p_c)
        except BehindCameraError:
            return None
        pixels = {kp.label: px[i] for i, kp in enumerate(kps)}
    roll = {SIDE_OF[lbl[1]]: px for lbl, px in pixels.items() if lbl[0] == "r"}
    if len(roll) != 4:
        return None
    eta_fb, eta_lr = center_edge_ratios(sils["roll"], roll)
    counts = count_up(sils, pixels)
    return visible_sides(eta_fb, eta_lr, counts, gamma)
