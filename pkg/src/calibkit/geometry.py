"""Rigid transforms, Z-Y-X Euler angles and instrument forward kinematics.

Everything here works in meters and radians.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FAMILIES = ("roll", "pitch", "end", "grip")
SIDES = ("front", "back", "left", "right")
_ALLOWED_SIDES = {
    "roll": set(SIDES),
    "pitch": set(SIDES),
    "end": {"front", "back"},
    "grip": {"left", "right"},
}

GIMBAL_EPS = 1e-8


class GimbalLockWarning(UserWarning):
    pass


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class EulerZYX:
    alpha: float
    beta: float
    gamma: float

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma], dtype=float)

    def normalized(self) -> "EulerZYX":
        """Equivalent angles with alpha, gamma in (-pi, pi] and beta in [-pi/2, pi/2]."""
        return rotation_to_euler(euler_to_rotation(self))


def euler_to_rotation(e) -> np.ndarray:
    """Closed-form R_z(alpha) R_y(beta) R_x(gamma)."""
    if isinstance(e, EulerZYX):
        a, b, g = e.alpha, e.beta, e.gamma
    else:
        a, b, g = (float(v) for v in e)
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cg, sg = np.cos(g), np.sin(g)
    return np.array(
        [
            [ca * cb, ca * sb * sg - sa * cg, ca * sb * cg + sa * sg],
            [sa * cb, sa * sb * sg + ca * cg, sa * sb * cg - ca * sg],
            [-sb, cb * sg, cb * cg],
        ]
    )


def euler_to_rotation_batch(angles: np.ndarray) -> np.ndarray:
    """Vectorised :func:`euler_to_rotation` over an ``(N, 3)`` array."""
    angles = np.asarray(angles, dtype=float)
    ca, sa = np.cos(angles[:, 0]), np.sin(angles[:, 0])
    cb, sb = np.cos(angles[:, 1]), np.sin(angles[:, 1])
    cg, sg = np.cos(angles[:, 2]), np.sin(angles[:, 2])
    out = np.empty((angles.shape[0], 3, 3))
    out[:, 0, 0] = ca * cb
    out[:, 0, 1] = ca * sb * sg - sa * cg
    out[:, 0, 2] = ca * sb * cg + sa * sg
    out[:, 1, 0] = sa * cb
    out[:, 1, 1] = sa * sb * sg + ca * cg
    out[:, 1, 2] = sa * sb * cg - ca * sg
    out[:, 2, 0] = -sb
    out[:, 2, 1] = cb * sg
    out[:, 2, 2] = cb * cg
    return out


def rotation_to_euler(R: np.ndarray, return_flag: bool = False):
    """Decompose a rotation matrix into Z-Y-X Euler angles.

    At gimbal lock (``|cos beta| < 1e-8``) gamma is set to zero and the whole
    in-plane rotation is folded into alpha. With ``return_flag=True`` the
    result is ``(EulerZYX, locked)``.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {R.shape}")
    sb = float(np.clip(-R[2, 0], -1.0, 1.0))
    cb = float(np.hypot(R[0, 0], R[1, 0]))
    locked = cb < GIMBAL_EPS
    if not locked:
        beta = float(np.arctan2(sb, cb))
        alpha = float(np.arctan2(R[1, 0], R[0, 0]))
        gamma = float(np.arctan2(R[2, 1], R[2, 2]))
    else:
        gamma = 0.0
        if sb > 0:
            beta = np.pi / 2
            # R[0,1] = sin(beta)*sin(gamma - alpha) ... with gamma = 0 -> -sin(alpha)
            alpha = float(np.arctan2(-R[0, 1], R[1, 1]))
        else:
            beta = -np.pi / 2
            alpha = float(np.arctan2(-R[0, 1], R[1, 1]))
    # arctan2 gives -pi for a signed-zero numerator; keep angles in (-pi, pi]
    alpha, gamma = (np.pi if a == -np.pi else a for a in (alpha, gamma))
    e = EulerZYX(alpha, beta, gamma)
    if return_flag:
        return e, locked
    return e


def wrap_angle(a):
    """Wrap into (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return w if np.ndim(w) else float(w)


@dataclass(frozen=True)
class Transform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Transform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "Transform":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def compose(self, other: "Transform") -> "Transform":
        """``self ∘ other``: apply ``other`` first."""
        return Transform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> "Transform":
        Rt = self.rotation.T
        return Transform(Rt, -Rt @ self.translation)

    def apply(self, p) -> np.ndarray:
        """Map a point ``(3,)`` or an array of points ``(N, 3)``."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.translation

    def is_rigid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol
        )


def state_to_transform(x) -> Transform:
    x = np.asarray(x, dtype=float).reshape(6)
    return Transform(euler_to_rotation(x[:3]), x[3:])


def transform_to_state(T: Transform, return_flag: bool = False):
    e, locked = rotation_to_euler(T.rotation, return_flag=True)
    x = np.concatenate([e.as_array(), T.translation])
    if return_flag:
        return x, locked
    return x


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    return float(np.arctan2(s, np.clip(c, -1.0, 1.0)))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Transform:
    """Camera-from-world transform for a camera at ``eye`` looking at ``target``.

    Camera axes follow the pinhole convention: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_wc = np.column_stack([x, y, z])  # camera axes in world
    return Transform(R_wc, eye).inverse()


# --------------------------------------------------------------------------
# kinematic chain


@dataclass(frozen=True)
class DhRow:
    """One classic (distal) Denavit-Hartenberg row.

    ``T = Rz(theta) Tz(d) Tx(a) Rx(alpha)`` where theta = q + theta_offset for
    revolute joints and d = q + d for prismatic ones.
    """

    a: float
    alpha: float
    d: float
    theta_offset: float = 0.0
    joint_type: str = "revolute"

    def __post_init__(self):
        if self.joint_type not in ("revolute", "prismatic"):
            raise ValueError(f"unknown joint type {self.joint_type!r}")

    def parts(self, q: float) -> tuple[np.ndarray, np.ndarray]:
        if self.joint_type == "revolute":
            theta, d = q + self.theta_offset, self.d
        else:
            theta, d = self.theta_offset, self.d + q
        ct, st = math.cos(theta), math.sin(theta)
        ca, sa = math.cos(self.alpha), math.sin(self.alpha)
        R = np.array([[ct, -st * ca, st * sa], [st, ct * ca, -ct * sa], [0.0, sa, ca]])
        return R, np.array([self.a * ct, self.a * st, d])

    def transform(self, q: float) -> Transform:
        return Transform(*self.parts(q))


@dataclass(frozen=True)
class DhChain:
    rows: tuple[DhRow, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        if not self.rows:
            raise ValueError("a DH chain needs at least one joint")

    @property
    def n_joints(self) -> int:
        return len(self.rows)


def forward_kinematics(chain: DhChain, q) -> list[Transform]:
    """Base-from-joint-k transforms for k = 1..n (index 0 is joint 1's frame)."""
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape[0] != chain.n_joints:
        raise ValueError(f"expected {chain.n_joints} joint values, got {q.shape[0]}")
    out = []
    R, t = np.eye(3), np.zeros(3)
    for row, qi in zip(chain.rows, q):
        Rj, tj = row.parts(float(qi))
        R, t = R @ Rj, R @ tj + t
        out.append(Transform(R, t))
    return out


def frame_of(chain: DhChain, q, joint_index: int) -> Transform:
    """Frame of joint ``joint_index`` (0 = base, k = after joint k)."""
    if joint_index == 0:
        return Transform.identity()
    return forward_kinematics(chain, q)[joint_index - 1]


# --------------------------------------------------------------------------
# instrument model


@dataclass(frozen=True)
class KeyPoint:
    family: str
    side: str
    joint_index: int
    local_position: np.ndarray
    # outward surface normal in the joint frame; used by the simulator only
    local_normal: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in _ALLOWED_SIDES:
            raise ValueError(f"unknown keypoint family {self.family!r}")
        if self.side not in _ALLOWED_SIDES[self.family]:
            raise ValueError(f"side {self.side!r} not allowed for family {self.family!r}")
        p = np.array(self.local_position, dtype=float).reshape(3)
        p.setflags(write=False)
        object.__setattr__(self, "local_position", p)
        if self.local_normal is not None:
            n = np.array(self.local_normal, dtype=float).reshape(3)
            n = n / np.linalg.norm(n)
            n.setflags(write=False)
            object.__setattr__(self, "local_normal", n)

    @property
    def label(self) -> str:
        return self.family[0] + self.side[0]


@dataclass(frozen=True)
class Segment:
    """Cylinder whose axis joins the origins of two joint frames."""

    start_joint: int
    end_joint: int
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("segment radius must be positive")


@dataclass(frozen=True)
class InstrumentModel:
    chain: DhChain
    keypoints: tuple[KeyPoint, ...]
    roll_segment: Segment
    pitch_segment: Segment

    def __post_init__(self):
        object.__setattr__(self, "keypoints", tuple(self.keypoints))
        labels = [k.label for k in self.keypoints]
        if len(set(labels)) != len(labels):
            raise ValueError("keypoint labels must be unique")
        n = self.chain.n_joints
        for k in self.keypoints:
            if not 0 <= k.joint_index <= n:
                raise ValueError(f"keypoint {k.label} refers to joint {k.joint_index}")
        for seg in (self.roll_segment, self.pitch_segment):
            for j in (seg.start_joint, seg.end_joint):
                if not 0 <= j <= n:
                    raise ValueError(f"segment refers to joint {j}")

    @property
    def labels(self) -> list[str]:
        return [k.label for k in self.keypoints]

    def keypoint(self, label: str) -> KeyPoint:
        for k in self.keypoints:
            if k.label == label:
                return k
        raise KeyError(f"unknown keypoint label {label!r}")

    def frames(self, q) -> list[Transform]:
        """Frames 0..n, frame 0 being the base."""
        return [Transform.identity()] + forward_kinematics(self.chain, q)


def keypoint_in_base(model: InstrumentModel, q, label: str) -> np.ndarray:
    kp = model.keypoint(label)
    return frame_of(model.chain, q, kp.joint_index).apply(kp.local_position)


def keypoints_in_base(model: InstrumentModel, q) -> np.ndarray:
    """All keypoint positions ``(n_keypoints, 3)`` in model order."""
    frames = model.frames(q)
    return np.array([frames[k.joint_index].apply(k.local_position) for k in model.keypoints])


def keypoint_normals_in_base(model: InstrumentModel, q) -> np.ndarray:
    frames = model.frames(q)
    out = np.full((len(model.keypoints), 3), np.nan)
    for i, k in enumerate(model.keypoints):
        if k.local_normal is not None:
            out[i] = frames[k.joint_index].rotation @ k.local_normal
    return out


# --------------------------------------------------------------------------
# serialisation


def model_to_dict(model: InstrumentModel) -> dict:
    return {
        "convention": "classic-dh",
        "units": {"length": "m", "angle": "rad"},
        "dh": [
            {
                "type": r.joint_type,
                "a": r.a,
                "alpha": r.alpha,
                "d": r.d,
                "theta_offset": r.theta_offset,
            }
            for r in model.chain.rows
        ],
        "keypoints": [
            {
                "family": k.family,
                "side": k.side,
                "joint": k.joint_index,
                "position": k.local_position.tolist(),
                **({"normal": k.local_normal.tolist()} if k.local_normal is not None else {}),
            }
            for k in model.keypoints
        ],
        "segments": {
            name: {"joints": [s.start_joint, s.end_joint], "radius": s.radius}
            for name, s in (("roll", model.roll_segment), ("pitch", model.pitch_segment))
        },
    }


def model_from_dict(doc: dict) -> InstrumentModel:
    conv = doc.get("convention", "classic-dh")
    if conv != "classic-dh":
        raise ValueError(f"unsupported DH convention {conv!r}")
    try:
        rows = [
            DhRow(
                a=float(r["a"]),
                alpha=float(r["alpha"]),
                d=float(r["d"]),
                theta_offset=float(r.get("theta_offset", 0.0)),
                joint_type=r.get("type", "revolute"),
            )
            for r in doc["dh"]
        ]
        kps = [
            KeyPoint(
                family=k["family"],
                side=k["side"],
                joint_index=int(k["joint"]),
                local_position=k["position"],
                local_normal=k.get("normal"),
            )
            for k in doc["keypoints"]
        ]
        segs = doc["segments"]
        roll = Segment(*map(int, segs["roll"]["joints"]), float(segs["roll"]["radius"]))
        pitch = Segment(*map(int, segs["pitch"]["joints"]), float(segs["pitch"]["radius"]))
    except KeyError as exc:
        raise ValueError(f"instrument model is missing field {exc}") from None
    return InstrumentModel(DhChain(tuple(rows)), tuple(kps), roll, pitch)


def load_model(path) -> InstrumentModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


# --------------------------------------------------------------------------
# illustrative large-needle-driver surrogate

# Lengths loosely follow a da Vinci 8 mm wristed instrument. The table is an
# illustration, not a measured calibration of any real tool.
SHAFT_RADIUS = 0.0042
ROLL_LENGTH = 0.010
PITCH_LENGTH = 0.0091
JAW_LENGTH = 0.012


def _surrogate_chain() -> DhChain:
    return DhChain(
        (
            DhRow(a=0.0, alpha=np.pi / 2, d=0.0, theta_offset=np.pi / 2),  # outer yaw
            DhRow(a=0.0, alpha=-np.pi / 2, d=0.0, theta_offset=-np.pi / 2),  # outer pitch
            DhRow(a=0.0, alpha=0.0, d=-ROLL_LENGTH, joint_type="prismatic"),  # insertion
            DhRow(a=0.0, alpha=np.pi / 2, d=ROLL_LENGTH),  # tool roll
            DhRow(a=PITCH_LENGTH, alpha=-np.pi / 2, d=0.0, theta_offset=np.pi / 2),  # wrist pitch
            DhRow(a=JAW_LENGTH, alpha=0.0, d=0.0),  # wrist yaw
        )
    )


def default_instrument_model() -> InstrumentModel:
    """12-keypoint wristed needle driver on a 6-joint surrogate chain.

    Keypoints are placed at the zero pose in base coordinates and converted
    to the frame of the link that carries them, so that the side names stay
    geometrically consistent: ``front x left = distal axis`` on both the roll
    and the pitch link.
    """
    chain = _surrogate_chain()
    q0 = np.array([0.0, 0.0, 0.1, 0.0, 0.0, 0.0])
    frames = [Transform.identity()] + forward_kinematics(chain, q0)
    o3, o4, o5, o6 = (frames[k].translation for k in (3, 4, 5, 6))
    axis = (o4 - o3) / np.linalg.norm(o4 - o3)
    left = frames[4].rotation[:, 2]  # wrist pitch axis
    front = np.cross(left, axis)
    normals = {"front": front, "back": -front, "left": left, "right": -left}
    r = SHAFT_RADIUS
    kps = []

    def add(family, side, joint, world_pos):
        T = frames[joint]
        kps.append(
            KeyPoint(
                family=family,
                side=side,
                joint_index=joint,
                local_position=T.inverse().apply(world_pos),
                local_normal=T.rotation.T @ normals[side],
            )
        )

    roll_centre = o4 - 0.4 * ROLL_LENGTH * axis
    pitch_centre = 0.5 * (o4 + o5)
    for side in ("front", "back", "left", "right"):
        add("roll", side, 4, roll_centre + r * normals[side])
    for side in ("front", "back", "left", "right"):
        add("pitch", side, 5, pitch_centre + 0.9 * r * normals[side])
    end_centre = o6 - 0.2 * JAW_LENGTH * axis
    for side in ("front", "back"):
        add("end", side, 6, end_centre + 0.5 * r * normals[side])
    grip_centre = o5 + 0.45 * JAW_LENGTH * axis
    for side in ("left", "right"):
        add("grip", side, 6, grip_centre + 0.8 * r * normals[side])
    return InstrumentModel(
        chain=chain,
        keypoints=tuple(kps),
        roll_segment=Segment(3, 4, r),
        pitch_segment=Segment(4, 5, 0.9 * r),
    )


def save_model(model: InstrumentModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n")


def as_points(points: Sequence) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {arr.shape}")
    return arr
