"""Lever/spring surrogate for brick manipulation outcomes.

Coordinates below are tool coordinates in the brick's length plane:
``x`` along the brick length from the top-face center, ``depth`` downward
from the top face. The twist axis sits at (d_x, d_z).

Disassembly. Twisting by theta lifts the -X end of the target. With
``lever = half_length + d_x`` (axis to the lifted end) the target
interface sees a peel moment ``k * theta * lever**2 * s``. An interface
``j`` bricks further down sees that moment scaled by
``|brick_height - d_z| / (j * brick_height)``: with the axis in the
target's base plane the structure below only rotates rigidly with the
plate, with the axis at the top face the peel is shared. Each interface
lets go at the angle where its moment reaches its strength; the brick
also has to tilt far enough for the knobs to clear the sockets,
``atan(knob_height / lever)``.

Assembly. The brick is pressed down about the axis; each knob row at
``x_r`` gets ``k * theta * s * max(d_x - x_r, 0)`` of seating force, and
the mean over rows has to reach the seat threshold.

Contact force. ``k * theta * (distance(axis, ideal pivot) + knob_height)``
where the ideal pivot is the target's base plane below the top-face
center (disassembly) or the leading top edge (assembly).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .eoat import ManipulationPlan, TwistSpec
from .lego_world import ConnectionState, LegoWorld, Placement, PlacementError, UnknownBrick, WorldError
from .trajectory import ControlSequence

FAILURE_MODES = (
    "none",
    "assemble_misalign",
    "assemble_unseated",
    "disassemble_drag",
    "disassemble_stuck",
    "force_abort",
    "infeasible_trajectory",
)


@dataclass(frozen=True)
class ForceModel:
    seat_stiffness: float = 4.0  # N/mm
    peel_arm_scale: float = 1.0
    force_abort_threshold: float = 30.0  # N
    align_tol: float = 1.0  # mm
    seat_threshold: float = 2.0  # N per knob
    align_noise_sd: float = 0.05  # mm

    def __post_init__(self):
        if not (self.seat_stiffness > 0 and self.peel_arm_scale > 0):
            raise ValueError("stiffness and arm scale must be positive")
        if self.force_abort_threshold < 0 or self.align_tol < 0 or self.seat_threshold < 0:
            raise ValueError("thresholds must be non-negative")
        if self.align_noise_sd < 0:
            raise ValueError("noise sd must be non-negative")


def load_force_model(path: str | Path) -> ForceModel:
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    return ForceModel(**doc.get("force", {}))


@dataclass(frozen=True)
class AttemptOutcome:
    success: bool
    failure_mode: str
    peak_force: float
    duration: float
    bricks_moved: tuple[int, ...] = ()

    def __post_init__(self):
        if self.failure_mode not in FAILURE_MODES:
            raise ValueError(f"unknown failure mode {self.failure_mode!r}")
        if self.success != (self.failure_mode == "none"):
            raise ValueError("success and failure_mode disagree")


@dataclass(frozen=True)
class ContactEvent:
    step: int
    phase: str
    angle: float  # rad of twist reached
    force: float  # N


@dataclass
class AttemptLog:
    mode: str
    target: tuple
    spec: dict
    outcome: dict
    alignment_error: float
    moments: list = field(default_factory=list)
    yield_angles: list = field(default_factory=list)

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# --------------------------------------------------------------------------
# lever model


def _lever(world: LegoWorld, placement: Placement, spec: TwistSpec) -> float:
    return world.dims.half_length(placement.kind) + spec.d_x


def clearance_angle(world: LegoWorld, placement: Placement, spec: TwistSpec) -> float:
    """Tilt (rad) at which the lifted end's sockets clear the knobs below."""
    lever = _lever(world, placement, spec)
    if lever <= 0:
        return math.pi / 2
    return math.atan(world.dims.knob_height / lever)


def interface_chain(world: LegoWorld, brick_id: int) -> list[ConnectionState]:
    """Target interface followed by the interfaces straight below it.

    The walk follows the first supporting brick at each level and stops at
    the plate.
    """
    out = []
    bid = brick_id
    while True:
        conn = world.connections[bid]
        out.append(conn)
        if conn.on_plate:
            return out
        bid = conn.lower[0]


def peel_moment_profile(world: LegoWorld, target_brick: int, spec: TwistSpec, model: ForceModel | None = None):
    """[(ConnectionState, moment N*mm)] for the target interface and every one below."""
    model = model or ForceModel()
    try:
        b = world.brick(target_brick)
    except (KeyError, WorldError) as exc:
        raise UnknownBrick(f"no brick {target_brick}") from exc
    H = world.dims.brick_height
    lever = _lever(world, b.placement, spec)
    base = model.seat_stiffness * spec.theta_rad * lever * lever * model.peel_arm_scale
    ratio = abs(H - spec.d_z) / H
    out = []
    for j, conn in enumerate(interface_chain(world, target_brick)):
        out.append((conn, base if j == 0 else base * ratio / j))
    return out


def yield_angles(world: LegoWorld, target_brick: int, spec: TwistSpec, model: ForceModel | None = None) -> list[float]:
    """Twist (rad) at which each interface in the chain releases (inf if never)."""
    unit = TwistSpec(spec.mode, spec.d_x, spec.d_z, math.degrees(1.0))
    out = []
    for conn, m in peel_moment_profile(world, target_brick, unit, model):
        out.append(conn.strength() / m if m > 0 else math.inf)
    return out


def disassembly_verdict(world: LegoWorld, target_brick: int, spec: TwistSpec, model: ForceModel | None = None):
    """(failure_mode, dragged depth) for a full twist, ignoring force aborts."""
    angles = yield_angles(world, target_brick, spec, model)
    theta = spec.theta_rad
    first = min(range(len(angles)), key=lambda i: (angles[i], i))
    if first > 0 and angles[first] <= theta and angles[first] < angles[0]:
        return "disassemble_drag", first
    b = world.brick(target_brick)
    if theta >= angles[0] and theta >= clearance_angle(world, b.placement, spec):
        return "none", 0
    return "disassemble_stuck", 0


def _knob_rows(world: LegoWorld, placement: Placement) -> np.ndarray:
    L, p = placement.kind.length_knobs, world.dims.knob_pitch
    return (np.arange(L) + 0.5) * p - L * p / 2


def seat_force_per_knob(world: LegoWorld, placement: Placement, spec: TwistSpec, model: ForceModel | None = None) -> float:
    model = model or ForceModel()
    arms = np.maximum(spec.d_x - _knob_rows(world, placement), 0.0)
    return float(model.seat_stiffness * spec.theta_rad * model.peel_arm_scale * arms.mean())


def assembly_success_predicate(
    world: LegoWorld, target_cell: Placement, spec: TwistSpec, alignment_error: float, model: ForceModel | None = None
) -> tuple[bool, str]:
    model = model or ForceModel()
    if alignment_error > model.align_tol:
        return False, "assemble_misalign"
    if seat_force_per_knob(world, target_cell, spec, model) < model.seat_threshold:
        return False, "assemble_unseated"
    return True, "none"


def pivot_distance(world: LegoWorld, placement: Placement, spec: TwistSpec) -> float:
    if spec.mode == "disassemble":
        px, pz = 0.0, world.dims.brick_height
    else:
        px, pz = world.dims.half_length(placement.kind), 0.0
    return math.hypot(spec.d_x - px, spec.d_z - pz)


def contact_force(world: LegoWorld, placement: Placement, spec: TwistSpec, angle: float, model: ForceModel) -> float:
    arm = pivot_distance(world, placement, spec) + world.dims.knob_height
    return model.seat_stiffness * abs(angle) * arm * model.peel_arm_scale


def contact_trace(world, plan: ManipulationPlan, alignment_error: float, model: ForceModel) -> list[ContactEvent]:
    """Force at every waypoint of the plan; approach is contact-free."""
    events = []
    step = 0
    for k, w in enumerate(plan.waypoints):
        if w.phase == "approach":
            events.append(ContactEvent(k, w.phase, 0.0, 0.0))
        elif w.phase == "insert":
            events.append(ContactEvent(k, w.phase, 0.0, model.seat_stiffness * alignment_error))
        elif w.phase == "twist_arc":
            step += 1
            ang = plan.spec.theta_rad * step / plan.arc_steps
            events.append(ContactEvent(k, w.phase, ang, contact_force(world, plan.target, plan.spec, ang, model)))
    return events


def force_feedback(trace, model: ForceModel) -> tuple[float, int | None]:
    """(peak force, index of the aborting event or None).

    Only events after first contact count; the attempt stops at the first
    contact event whose force reaches the abort threshold.
    """
    peak = 0.0
    for i, ev in enumerate(trace):
        if ev.phase == "approach":
            continue
        peak = max(peak, ev.force)
        if ev.force >= model.force_abort_threshold:
            return peak, i
    return peak, None


def sample_alignment_error(noise_seed: int, model: ForceModel) -> float:
    rng = np.random.default_rng(noise_seed)
    return float(np.hypot(*rng.normal(0.0, model.align_noise_sd, size=2)))


def execute_attempt(
    world: LegoWorld,
    plan: ManipulationPlan,
    seq: ControlSequence | None,
    spec: TwistSpec,
    model: ForceModel | None = None,
    noise_seed: int = 0,
    misalignment: float = 0.0,
    log: list | None = None,
) -> tuple[AttemptOutcome, LegoWorld]:
    """Run one insert-and-twist attempt on a copy of ``world``.

    Returns the outcome and the updated copy (unchanged unless the attempt
    succeeded). ``misalignment`` adds a lateral offset (mm) to the sampled
    placement jitter for assembly.
    """
    model = model or ForceModel()
    if plan.spec != spec:
        raise ValueError("plan and spec disagree")
    if seq is not None and plan.joint_path is not None and not np.allclose(seq.positions[0], plan.joint_path[0]):
        raise ValueError("control sequence does not start at the plan's first waypoint")
    duration = seq.duration if seq is not None else 0.0
    out_world = world.copy()
    moments, angles = [], []
    align = 0.0

    def done(success, mode, peak, moved=()):
        outcome = AttemptOutcome(success, mode, float(peak), duration, tuple(moved))
        if log is not None:
            log.append(
                AttemptLog(
                    spec.mode, (plan.target.plate, plan.target.kind.name, plan.target.cell, plan.target.layer),
                    asdict(spec), asdict(outcome), align, moments, angles,
                )
            )
        return outcome, out_world

    if seq is not None and seq.limit_violation:
        return done(False, "infeasible_trajectory", 0.0)

    if spec.mode == "assemble":
        align = sample_alignment_error(noise_seed, model) + abs(misalignment)
        trace = contact_trace(world, plan, align, model)
        peak, abort = force_feedback(trace, model)
        if abort is not None:
            return done(False, "force_abort", peak)
        ok, mode = assembly_success_predicate(world, plan.target, spec, align, model)
        if not ok:
            return done(False, mode, peak)
        try:
            bid = out_world.add_brick(plan.target)
        except PlacementError:
            return done(False, "assemble_misalign", peak)
        return done(True, "none", peak, (bid,))

    target = world.find(plan.target)
    if target is None:
        raise WorldError(f"no brick at {plan.target}")
    prof = peel_moment_profile(world, target.id, spec, model)
    moments = [[list(map(str, c.interface_id)), m] for c, m in prof]
    angles = yield_angles(world, target.id, spec, model)
    trace = contact_trace(world, plan, 0.0, model)
    peak, abort = force_feedback(trace, model)
    if abort is not None:
        return done(False, "force_abort", peak)
    mode, depth = disassembly_verdict(world, target.id, spec, model)
    if mode == "disassemble_drag":
        chain = interface_chain(world, target.id)
        return done(False, mode, peak, tuple(c.upper for c in chain[: depth + 1]))
    if mode != "none":
        return done(False, mode, peak)
    out_world.remove_brick(target.id)
    return done(True, "none", peak, (target.id,))
