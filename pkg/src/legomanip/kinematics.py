"""Rigid transforms and a 6-DOF Denavit-Hartenberg arm.

Rotations are kept as 3x3 matrices internally. Anything that goes to or
comes from a file uses fixed-axis XYZ angles in degrees.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

ORTHO_TOL = 1e-9


class KinematicsError(Exception):
    pass


class JointLimitError(KinematicsError):
    pass


class IKError(KinematicsError):
    """Raised when IK cannot return a valid configuration."""


class IKNotConverged(IKError):
    pass


class IKJointLimit(IKError):
    pass


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_xyz_deg(cls, translation, angles_deg) -> "Pose":
        return cls(rot_xyz_deg(*angles_deg), translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        R = self.rotation
        return (
            np.allclose(R @ R.T, np.eye(3), atol=tol, rtol=0.0)
            and abs(np.linalg.det(R) - 1.0) <= tol
            and bool(np.all(np.isfinite(self.translation)))
        )

    def xyz_deg(self) -> np.ndarray:
        return xyz_deg_from_rot(self.rotation)

    def transform_point(self, p) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=float) + self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __repr__(self):
        t = ", ".join(f"{v:.4f}" for v in self.translation)
        a = ", ".join(f"{v:.4f}" for v in self.xyz_deg())
        return f"Pose(t=[{t}] mm, xyz=[{a}] deg)"


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_xyz_deg(ax: float, ay: float, az: float) -> np.ndarray:
    """Fixed-axis X, then Y, then Z (equivalently Rz @ Ry @ Rx)."""
    return rot_z(math.radians(az)) @ rot_y(math.radians(ay)) @ rot_x(math.radians(ax))


def xyz_deg_from_rot(R: np.ndarray) -> np.ndarray:
    sy = -R[2, 0]
    sy = min(1.0, max(-1.0, sy))
    ay = math.asin(sy)
    if abs(sy) < 1.0 - 1e-12:
        ax = math.atan2(R[2, 1], R[2, 2])
        az = math.atan2(R[1, 0], R[0, 0])
    else:
        # gimbal lock, put everything on x
        az = 0.0
        ax = math.atan2(R[0, 1], R[1, 1]) if sy > 0 else math.atan2(-R[0, 1], R[1, 1])
    return np.degrees([ax, ay, az])


def skew(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def rotvec_from_matrix(R: np.ndarray) -> np.ndarray:
    """Log map SO(3) -> axis*angle."""
    cos_a = (np.trace(R) - 1.0) / 2.0
    cos_a = min(1.0, max(-1.0, cos_a))
    angle = math.acos(cos_a)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-6:
        return 0.5 * v
    if math.pi - angle < 1e-4:
        # near pi the antisymmetric part vanishes; use the symmetric part
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if np.dot(axis, v) < 0:
            axis = -axis
        return angle * axis
    return angle / (2.0 * math.sin(angle)) * v


def matrix_from_rotvec(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    angle = float(np.linalg.norm(w))
    if angle < 1e-12:
        return np.eye(3) + skew(w)
    k = skew(w / angle)
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def rotation_angle(R: np.ndarray) -> float:
    return float(np.linalg.norm(rotvec_from_matrix(R)))


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


def rot_y_pose(angle: float) -> Pose:
    return Pose(rot_y(angle), np.zeros(3))


def rotate_about_axis_frame(target: Pose, axis_frame: Pose, angle: float) -> Pose:
    """Rotate ``target`` rigidly about the Y-axis of ``axis_frame``.

    Points on that axis stay put. ``angle`` is in radians, |angle| <= pi/2.
    """
    if abs(angle) > math.pi / 2 + 1e-12:
        raise ValueError(f"twist angle {angle} rad outside [-pi/2, pi/2]")
    # world-frame rotation: A Ry A^-1
    R = axis_frame.rotation @ rot_y(angle) @ axis_frame.rotation.T
    o = axis_frame.translation
    return Pose(R @ target.rotation, R @ (target.translation - o) + o)


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation error mm, rotation error rad) between two poses."""
    dt = float(np.linalg.norm(a.translation - b.translation))
    dr = rotation_angle(a.rotation.T @ b.rotation)
    return dt, dr


# --------------------------------------------------------------------------
# Arm model


@dataclass(frozen=True)
class DHRow:
    a: float
    alpha: float
    d: float
    theta_offset: float = 0.0


@dataclass(frozen=True, eq=False)
class ArmModel:
    dh_rows: tuple[DHRow, ...]
    joint_limits: np.ndarray  # (6, 2) radians
    base_pose: Pose = field(default_factory=Pose.identity)
    tool_pose: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        rows = tuple(r if isinstance(r, DHRow) else DHRow(*r) for r in self.dh_rows)
        object.__setattr__(self, "dh_rows", rows)
        lim = _frozen(self.joint_limits)
        object.__setattr__(self, "joint_limits", lim)
        if len(rows) != 6:
            raise ValueError(f"arm needs exactly 6 DH rows, got {len(rows)}")
        if lim.shape != (6, 2):
            raise ValueError("joint_limits must be 6 (lower, upper) pairs")
        if np.any(lim[:, 0] >= lim[:, 1]):
            raise ValueError("every joint limit needs lower < upper")
        # cached per-row constants for the hot FK/Jacobian loop
        object.__setattr__(self, "_a", np.array([r.a for r in rows]))
        object.__setattr__(self, "_d", np.array([r.d for r in rows]))
        object.__setattr__(self, "_ca", np.cos([r.alpha for r in rows]))
        object.__setattr__(self, "_sa", np.sin([r.alpha for r in rows]))
        object.__setattr__(self, "_off", np.array([r.theta_offset for r in rows]))
        object.__setattr__(self, "_base", self.base_pose.matrix())
        object.__setattr__(self, "_tool", self.tool_pose.matrix())

    @property
    def n(self) -> int:
        return 6

    def with_tool(self, tool_pose: Pose) -> "ArmModel":
        return ArmModel(self.dh_rows, self.joint_limits, self.base_pose, tool_pose)

    def within_limits(self, q, tol: float = 0.0) -> bool:
        q = np.asarray(q, dtype=float)
        lo, hi = self.joint_limits[:, 0], self.joint_limits[:, 1]
        return bool(np.all(q >= lo - tol) and np.all(q <= hi + tol))

    def check_limits(self, q) -> None:
        q = np.asarray(q, dtype=float)
        if q.shape != (6,):
            raise ValueError("joint vector must have 6 entries")
        if not self.within_limits(q):
            bad = [
                i
                for i in range(6)
                if not self.joint_limits[i, 0] <= q[i] <= self.joint_limits[i, 1]
            ]
            raise JointLimitError(f"joints {bad} outside limits: q={q.tolist()}")

    def mid_configuration(self) -> np.ndarray:
        return self.joint_limits.mean(axis=1)


def dh_matrix(row: DHRow, q: float) -> np.ndarray:
    th = q + row.theta_offset
    ct, st = math.cos(th), math.sin(th)
    ca, sa = math.cos(row.alpha), math.sin(row.alpha)
    return np.array(
        [
            [ct, -st * ca, st * sa, row.a * ct],
            [st, ct * ca, -ct * sa, row.a * st],
            [0.0, sa, ca, row.d],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def _dh_stack(arm: ArmModel, q) -> np.ndarray:
    th = np.asarray(q, dtype=float) + arm._off
    ct, st = np.cos(th), np.sin(th)
    ca, sa = arm._ca, arm._sa
    M = np.zeros((6, 4, 4))
    M[:, 0, 0] = ct
    M[:, 0, 1] = -st * ca
    M[:, 0, 2] = st * sa
    M[:, 0, 3] = arm._a * ct
    M[:, 1, 0] = st
    M[:, 1, 1] = ct * ca
    M[:, 1, 2] = -ct * sa
    M[:, 1, 3] = arm._a * st
    M[:, 2, 1] = sa
    M[:, 2, 2] = ca
    M[:, 2, 3] = arm._d
    M[:, 3, 3] = 1.0
    return M


def _chain(arm: ArmModel, q) -> list[np.ndarray]:
    """Cumulative transforms: base, after joint 1, ..., after joint 6."""
    T = arm._base
    frames = [T]
    for M in _dh_stack(arm, q):
        T = T @ M
        frames.append(T)
    return frames


def _fk_matrix(arm: ArmModel, q) -> np.ndarray:
    return _chain(arm, q)[-1] @ arm._tool


def forward_kinematics(arm: ArmModel, q, check: bool = True) -> Pose:
    q = np.asarray(q, dtype=float)
    if check:
        arm.check_limits(q)
    return Pose.from_matrix(_fk_matrix(arm, q))


def _jacobian(arm: ArmModel, q) -> tuple[np.ndarray, np.ndarray]:
    frames = _chain(arm, q)
    T_end = frames[-1] @ arm._tool
    F = np.array(frames[:6])
    z = F[:, :3, 2]
    o = F[:, :3, 3]
    d = T_end[:3, 3] - o
    J = np.empty((6, 6))
    # z x d per joint, written out (np.cross is slow on small arrays)
    J[0] = z[:, 1] * d[:, 2] - z[:, 2] * d[:, 1]
    J[1] = z[:, 2] * d[:, 0] - z[:, 0] * d[:, 2]
    J[2] = z[:, 0] * d[:, 1] - z[:, 1] * d[:, 0]
    J[3:] = z.T
    return J, T_end


def jacobian(arm: ArmModel, q) -> tuple[np.ndarray, Pose]:
    """Geometric Jacobian (rows: v mm/rad, w rad/rad) at the tool point."""
    J, T = _jacobian(arm, q)
    return J, Pose.from_matrix(T)


@dataclass(frozen=True)
class IKSettings:
    damping: float = 1e-3
    max_iterations: int = 200
    step_clamp: float = 0.1
    tol_translation: float = 1e-5  # mm
    tol_rotation: float = 1e-7  # rad
    workspace_radius: float | None = None  # mm from the seed's tool point


DEFAULT_IK = IKSettings()


def inverse_kinematics(
    arm: ArmModel, target: Pose, q_seed, settings: IKSettings = DEFAULT_IK
) -> np.ndarray:
    """Damped least-squares IK started from ``q_seed``.

    Raises IKNotConverged or IKJointLimit; callers treat both as an
    unreachable waypoint.
    """
    q = np.array(q_seed, dtype=float)
    lam2 = settings.damping**2
    if settings.workspace_radius is not None:
        p0 = _fk_matrix(arm, q)[:3, 3]
        if np.linalg.norm(target.translation - p0) > settings.workspace_radius:
            raise IKNotConverged("target outside the workspace radius of the seed")
    Rt = target.rotation
    pt = target.translation
    eye6 = np.eye(6)
    for _ in range(settings.max_iterations + 1):
        J, T = _jacobian(arm, q)
        R = T[:3, :3]
        e_p = pt - T[:3, 3]
        e_r = R @ rotvec_from_matrix(R.T @ Rt)
        if (
            math.sqrt(e_p @ e_p) < settings.tol_translation
            and math.sqrt(e_r @ e_r) < settings.tol_rotation
        ):
            break
        e = np.concatenate([e_p, e_r])
        dq = J.T @ np.linalg.solve(J @ J.T + lam2 * eye6, e)
        m = np.max(np.abs(dq))
        if m > settings.step_clamp:
            dq *= settings.step_clamp / m
        q = q + dq
    else:
        raise IKNotConverged(
            f"IK did not converge in {settings.max_iterations} iterations "
            f"(|e_p|={np.linalg.norm(e_p):.3g} mm, |e_r|={np.linalg.norm(e_r):.3g} rad)"
        )
    # wrap revolute joints into the limit window where possible
    lo, hi = arm.joint_limits[:, 0], arm.joint_limits[:, 1]
    for i in range(6):
        while q[i] > hi[i] and q[i] - 2 * math.pi >= lo[i]:
            q[i] -= 2 * math.pi
        while q[i] < lo[i] and q[i] + 2 * math.pi <= hi[i]:
            q[i] += 2 * math.pi
    if not arm.within_limits(q):
        raise IKJointLimit(f"IK solution violates joint limits: {q.tolist()}")
    return q


# --------------------------------------------------------------------------
# Config I/O


def arm_from_dict(doc: dict) -> ArmModel:
    try:
        dh = doc["dh"]
        limits = np.radians(np.asarray(doc["joint_limits_deg"], dtype=float))
        base = doc.get("base_pose", {})
        tool = doc.get("tool_pose", {})
    except (KeyError, TypeError) as exc:
        raise ValueError(f"arm config missing key: {exc}") from exc
    rows = []
    for r in dh:
        if len(r) != 4:
            raise ValueError("each dh row needs 4 numbers: a_mm, alpha_deg, d_mm, theta_offset_deg")
        a, alpha, d, off = (float(v) for v in r)
        rows.append(DHRow(a, math.radians(alpha), d, math.radians(off)))

    def pose(p):
        return Pose.from_xyz_deg(p.get("translation_mm", [0, 0, 0]), p.get("xyz_deg", [0, 0, 0]))

    return ArmModel(tuple(rows), limits, pose(base), pose(tool))


def load_arm(path: str | Path) -> ArmModel:
    with open(path) as fh:
        return arm_from_dict(yaml.safe_load(fh))


def default_arm() -> ArmModel:
    return load_arm(Path(__file__).parent / "data" / "arm.yaml")
