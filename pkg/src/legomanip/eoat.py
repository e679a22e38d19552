"""Geometric model of the lever tool and insert-and-twist waypoint plans.

The tool frame O_0 sits at the center of the brick's top face once the
knobs are pushed into the tool: X along the brick length, Z pointing down
into the brick, Y = Z x X. The twist axis is the Y-axis of O_0 shifted by
d_x along X and d_z along Z.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .kinematics import (
    DEFAULT_IK,
    ArmModel,
    IKError,
    IKSettings,
    Pose,
    inverse_kinematics,
    rot_x,
    rotate_about_axis_frame,
    rotation_angle,
)
from .lego_world import BrickDims, LegoWorld, Placement, PlacementError, WorldError

MODES = ("assemble", "disassemble")
PHASES = ("approach", "insert", "twist_arc", "retreat")


class PlanError(Exception):
    pass


class OccludedTarget(PlanError):
    pass


class UnreachablePose(PlanError):
    pass


@dataclass(frozen=True)
class EoatConfig:
    top_lever: float = 7.8
    side_lever: float = 3.2
    tool_length: float = 120.0
    arc_steps: int = 16
    approach_clearance: float = 4.0
    retreat_height: float = 6.0
    max_step_translation: float = 2.0
    max_step_rotation_deg: float = 3.0

    def __post_init__(self):
        for name in ("top_lever", "side_lever", "tool_length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.arc_steps < 1:
            raise ValueError("arc_steps must be >= 1")

    def tool_pose(self) -> Pose:
        """Flange -> tool frame O_0."""
        return Pose(np.eye(3), [0.0, 0.0, self.tool_length])


def load_eoat(path: str | Path) -> EoatConfig:
    with open(path) as fh:
        return EoatConfig(**(yaml.safe_load(fh) or {}))


@dataclass(frozen=True)
class TwistSpec:
    mode: str
    d_x: float
    d_z: float
    theta: float  # degrees

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        vals = (self.d_x, self.d_z, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("twist parameters must be finite")
        if not 0 <= self.theta <= 90:
            raise ValueError("theta must lie in [0, 90] degrees")

    @property
    def theta_rad(self) -> float:
        return math.radians(self.theta)

    @property
    def twist_sign(self) -> int:
        # disassembly lifts the -X end of the brick, assembly presses the +X pivot
        return 1 if self.mode == "assemble" else -1

    def within(self, theta=(1.0, 25.0), d_x=(0.0, 10.0), d_z=(0.0, 10.0)) -> bool:
        return (
            theta[0] <= self.theta <= theta[1]
            and d_x[0] <= self.d_x <= d_x[1]
            and d_z[0] <= self.d_z <= d_z[1]
        )


@dataclass(frozen=True)
class Waypoint:
    pose: Pose
    phase: str


@dataclass(frozen=True, eq=False)
class ManipulationPlan:
    waypoints: tuple[Waypoint, ...]
    target: Placement
    spec: TwistSpec
    arc_steps: int
    tool_frame: Pose
    axis_frame: Pose
    joint_path: np.ndarray | None = field(default=None)

    @property
    def poses(self) -> list[Pose]:
        return [w.pose for w in self.waypoints]

    @property
    def phases(self) -> list[str]:
        return [w.phase for w in self.waypoints]

    def phase_sequence(self) -> list[str]:
        out: list[str] = []
        for p in self.phases:
            if not out or out[-1] != p:
                out.append(p)
        return out

    def phase_indices(self, phase: str) -> list[int]:
        return [i for i, w in enumerate(self.waypoints) if w.phase == phase]

    def dump(self) -> str:
        buf = io.StringIO()
        buf.write("phase,x_mm,y_mm,z_mm,ax_deg,ay_deg,az_deg\n")
        for w in self.waypoints:
            t, a = w.pose.translation, w.pose.xyz_deg()
            buf.write(w.phase + "," + ",".join(f"{v:.9g}" for v in (*t, *a)) + "\n")
        return buf.getvalue()


def tool_frame_for(brick_pose: Pose, dims: BrickDims) -> Pose:
    """O_0 for a brick whose base-center pose is ``brick_pose``."""
    return brick_pose @ Pose(rot_x(math.pi), [0.0, 0.0, dims.brick_height])


def twist_axis_frame(brick_pose: Pose, spec: TwistSpec, dims: BrickDims) -> Pose:
    """O_a (assemble) or O_d (disassemble).

    Both offsets apply in both modes; with d_z = 0 the axis lies in the top
    face, with d_z = brick_height it lies in the brick's base plane.
    """
    return tool_frame_for(brick_pose, dims) @ Pose(np.eye(3), [spec.d_x, 0.0, spec.d_z])


def _lift(p: Pose, dz: float) -> Pose:
    return Pose(p.rotation, p.translation + np.array([0.0, 0.0, dz]))


def _linear(start: Pose, end_dz: float, max_step: float, include_start: bool) -> list[Pose]:
    n = max(1, math.ceil(abs(end_dz) / max_step - 1e-12))
    k0 = 0 if include_start else 1
    return [_lift(start, end_dz * k / n) for k in range(k0, n + 1)]


def plan_manipulation(
    world: LegoWorld,
    target: int | Placement,
    spec: TwistSpec,
    eoat: EoatConfig | None = None,
    arc_steps: int | None = None,
    arm: ArmModel | None = None,
    q_seed=None,
    ik: IKSettings = DEFAULT_IK,
) -> ManipulationPlan:
    """Waypoints approach -> insert -> twist_arc -> retreat for one brick.

    ``target`` is a brick id for disassembly and a Placement for assembly.
    With ``arm`` given every waypoint is solved by IK (seeded by the
    previous one) and stored as ``joint_path``.
    """
    eoat = eoat or EoatConfig()
    arc_steps = eoat.arc_steps if arc_steps is None else int(arc_steps)
    if arc_steps < 1:
        raise ValueError("arc_steps must be >= 1")
    dims = world.dims
    if spec.mode == "disassemble":
        if isinstance(target, Placement):
            found = world.find(target)
            if found is None:
                raise WorldError(f"no brick at {target}")
            target = found.id
        brick = world.brick(target)
        if not world.is_exposed(brick.id):
            raise OccludedTarget(f"brick {brick.id} has bricks on top of it")
        placement = brick.placement
    else:
        if not isinstance(target, Placement):
            raise TypeError("assembly targets are Placements")
        try:
            world.check_placement(target)
        except PlacementError as exc:
            raise OccludedTarget(str(exc)) from exc
        placement = target

    step_rot = spec.theta / arc_steps
    if step_rot > eoat.max_step_rotation_deg + 1e-12:
        raise ValueError(
            f"{arc_steps} arc steps give {step_rot:.3f} deg per step, above {eoat.max_step_rotation_deg}"
        )

    bpose = world.brick_pose(placement)
    O0 = tool_frame_for(bpose, dims)
    axis = twist_axis_frame(bpose, spec, dims)
    ms = eoat.max_step_translation

    pre_insert = _lift(O0, dims.knob_height)
    top = _lift(pre_insert, eoat.approach_clearance)
    wps = [Waypoint(p, "approach") for p in _linear(top, -eoat.approach_clearance, ms, True)]
    wps += [Waypoint(p, "insert") for p in _linear(pre_insert, -dims.knob_height, ms, False)]
    signed = spec.twist_sign * spec.theta_rad
    for k in range(1, arc_steps + 1):
        wps.append(Waypoint(rotate_about_axis_frame(O0, axis, signed * k / arc_steps), "twist_arc"))
    wps += [Waypoint(p, "retreat") for p in _linear(wps[-1].pose, eoat.retreat_height, ms, False)]

    for a, b in zip(wps, wps[1:]):
        dt = np.linalg.norm(a.pose.translation - b.pose.translation)
        if dt > ms + 1e-9:
            raise ValueError(f"waypoint step {dt:.3f} mm exceeds {ms} mm")

    joint_path = None
    if arm is not None:
        joint_path = solve_waypoints(arm, [w.pose for w in wps], q_seed, ik)
    return ManipulationPlan(tuple(wps), placement, spec, arc_steps, O0, axis, joint_path)


def home_configuration(arm: ArmModel) -> np.ndarray:
    """Elbow-up, tool-down configuration used to seed the first IK solve."""
    q = np.radians([0.0, 10.0, -10.0, 0.0, 90.0, 0.0])
    return np.clip(q, arm.joint_limits[:, 0], arm.joint_limits[:, 1])


def solve_waypoints(arm: ArmModel, poses, q_seed=None, ik: IKSettings = DEFAULT_IK) -> np.ndarray:
    q = home_configuration(arm) if q_seed is None else np.asarray(q_seed, dtype=float)
    out = np.empty((len(poses), arm.n))
    for i, p in enumerate(poses):
        try:
            q = inverse_kinematics(arm, p, q, ik)
        except IKError as exc:
            raise UnreachablePose(f"waypoint {i} unreachable: {exc}") from exc
        out[i] = q
    return out


def arc_step_angles(plan: ManipulationPlan) -> list[float]:
    """Rotation (rad) between consecutive twist-arc waypoints, first one from the insert pose."""
    idx = plan.phase_indices("twist_arc")
    prev = plan.waypoints[idx[0] - 1].pose
    out = []
    for i in idx:
        cur = plan.waypoints[i].pose
        out.append(rotation_angle(prev.rotation.T @ cur.rotation))
        prev = cur
    return out
