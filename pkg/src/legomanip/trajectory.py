"""Jerk-bounded position controllers.

Every path segment (waypoint to waypoint) is a rest-to-rest seven-phase
S-curve. Phase lengths are whole multiples of ``dt`` so the jerk is
piecewise constant on the control grid and triple integration of the
controls reproduces the path exactly. Controls ``u_t`` are jerk commands.
"""
from __future__ import annotations

import functools
import heapq
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .eoat import ManipulationPlan, solve_waypoints
from .kinematics import (
    DEFAULT_IK,
    ArmModel,
    IKError,
    IKSettings,
    Pose,
    inverse_kinematics,
    matrix_from_rotvec,
    rotvec_from_matrix,
)

DEFAULT_DT = 0.004
CONTROLLERS = ("joint_jpc", "cartesian_jpc")


class TrajectoryError(Exception):
    pass


class InfeasibleHorizon(TrajectoryError):
    pass


class TrajectoryIKError(TrajectoryError):
    pass


@dataclass(frozen=True)
class CartesianLimits:
    v_lin: float = 100.0  # mm/s
    a_lin: float = 1000.0  # mm/s^2
    j_lin: float = 20000.0  # mm/s^3
    v_ang: float = 1.0  # rad/s
    a_ang: float = 10.0
    j_ang: float = 200.0

    def as_arrays(self):
        v = np.array([self.v_lin] * 3 + [self.v_ang] * 3)
        a = np.array([self.a_lin] * 3 + [self.a_ang] * 3)
        j = np.array([self.j_lin] * 3 + [self.j_ang] * 3)
        return v, a, j


@dataclass(frozen=True)
class ControlLimits:
    u_min: np.ndarray
    u_max: np.ndarray
    v_max: np.ndarray
    a_max: np.ndarray
    cartesian: CartesianLimits = field(default_factory=CartesianLimits)

    def __post_init__(self):
        for name in ("u_min", "u_max", "v_max", "a_max"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (np.all(self.u_min < 0) and np.all(self.u_max > 0)):
            raise ValueError("need u_min < 0 < u_max for every joint")
        if np.any(self.v_max <= 0) or np.any(self.a_max <= 0):
            raise ValueError("velocity and acceleration caps must be positive")

    @classmethod
    def uniform(cls, n=6, jerk=400.0, acc=20.0, vel=2.0, cartesian=None) -> "ControlLimits":
        return cls(
            -np.full(n, jerk), np.full(n, jerk), np.full(n, vel), np.full(n, acc),
            cartesian or CartesianLimits(),
        )

    @property
    def j_max(self) -> np.ndarray:
        return np.minimum(-self.u_min, self.u_max)

    def scaled(self, factor: float) -> "ControlLimits":
        return ControlLimits(self.u_min * factor, self.u_max * factor, self.v_max * factor, self.a_max * factor, self.cartesian)


@dataclass(frozen=True, eq=False)
class ControlSequence:
    """Controls (T_steps x n jerk) and the realized path (T_steps+1 samples)."""

    controls: np.ndarray
    dt: float
    positions: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray
    controller: str = "joint_jpc"
    limit_violation: bool = False
    max_abs_jerk: float = 0.0
    segment_steps: tuple[int, ...] = ()

    @property
    def n(self) -> int:
        return self.controls.shape[1]

    @property
    def steps(self) -> int:
        return self.controls.shape[0]

    @property
    def duration(self) -> float:
        return self.steps * self.dt

    def export(self) -> str:
        """Tab-free CSV: time, then q/v/a/jerk per joint."""
        n = self.n
        head = ["t"] + [f"{k}{j + 1}" for k in ("q", "v", "a", "u") for j in range(n)]
        buf = io.StringIO()
        buf.write(",".join(head) + "\n")
        u = np.vstack([self.controls, np.zeros((1, n))])
        for k in range(self.steps + 1):
            row = [k * self.dt, *self.positions[k], *self.velocities[k], *self.accelerations[k], *u[k]]
            buf.write(",".join(f"{v:.9g}" for v in row) + "\n")
        return buf.getvalue()


# --------------------------------------------------------------------------
# S-curve primitives


def scurve_phases(D: float, v_max: float, a_max: float, j_max: float) -> tuple[float, float, float]:
    """Time-optimal rest-to-rest phase lengths (T_j, T_a, T_v) for distance D >= 0.

    Total time is 4*T_j + 2*T_a + T_v.
    """
    D = abs(D)
    if D == 0.0:
        return 0.0, 0.0, 0.0
    if v_max * j_max >= a_max**2:
        tj, ta = a_max / j_max, v_max / a_max - a_max / j_max
    else:
        tj, ta = math.sqrt(v_max / j_max), 0.0
    d_full = v_max * (2 * tj + ta)
    if D >= d_full:
        return tj, ta, (D - d_full) / v_max
    tj = a_max / j_max
    ta = (-3 * tj + math.sqrt(tj * tj + 4 * D / a_max)) / 2
    if ta >= 0 and a_max * (tj + ta) <= v_max * (1 + 1e-12):
        return tj, ta, 0.0
    return (D / (2 * j_max)) ** (1 / 3), 0.0, 0.0


def scurve_min_time(D: float, v_max: float, a_max: float, j_max: float) -> float:
    tj, ta, tv = scurve_phases(D, v_max, a_max, j_max)
    return 4 * tj + 2 * ta + tv


def _phase_times(D, v_max, a_max, j_max) -> np.ndarray:
    """Shared (jerk, accel, cruise) phase times that suit every axis."""
    T = np.zeros(3)
    for d, v, a, j in zip(D, v_max, a_max, j_max):
        T = np.maximum(T, scurve_phases(d, v, a, j))
    return T


def _min_counts(D, v_max, a_max, j_max, dt) -> tuple[int, int, int]:
    """Smallest whole-step phase lengths that keep every axis inside its limits."""
    return _counts_from_times(_phase_times(D, v_max, a_max, j_max), dt)


def _counts_from_times(T, dt) -> tuple[int, int, int]:
    return tuple(int(math.ceil(t / dt - 1e-9)) for t in T)


def _stretch(m: tuple[int, int, int], n_seg: int) -> tuple[int, int, int]:
    m1, m2, m4 = m
    n_min = 4 * m1 + 2 * m2 + m4
    if n_min == 0:
        return 0, 0, n_seg
    c = n_seg / n_min
    n1 = max(m1, int(math.floor(c * m1 + 1e-9)))
    n2 = max(m2, int(math.floor(c * m2 + 1e-9)))
    n4 = n_seg - 4 * n1 - 2 * n2
    assert n4 >= m4
    return n1, n2, n4


def _jerk_pattern(n1: int, n2: int, n4: int) -> np.ndarray:
    """Unit-jerk sign pattern of one seven-phase segment."""
    return np.concatenate(
        [np.ones(n1), np.zeros(n2), -np.ones(n1), np.zeros(n4), -np.ones(n1), np.zeros(n2), np.ones(n1)]
    )


def _segment_jerk(D: np.ndarray, counts, dt: float) -> np.ndarray:
    n1, n2, n4 = counts
    if n1 == 0:
        return np.zeros((4 * n1 + 2 * n2 + n4, len(D)))
    t1, t2, t4 = n1 * dt, n2 * dt, n4 * dt
    J = D / (t1 * (t1 + t2) * (2 * t1 + t2 + t4))
    return np.outer(_jerk_pattern(n1, n2, n4), J)


def _jerk_weight(D, times, dt) -> float:
    """Peak jerk of the stretched segment times its step count cubed."""
    tj, ta, tv = times
    if tj <= 0:
        return 0.0
    t_min = 4 * tj + 2 * ta + tv
    return float(np.max(np.abs(D))) / (tj * (tj + ta) * (2 * tj + ta + tv)) * (t_min / dt) ** 3


@functools.lru_cache(maxsize=4096)
def _unit_profile(n_seg: int, r2: float, r4: float):
    """Per-step mean of a unit-jerk S-curve n_seg steps long, in step units.

    r2 and r4 are the accel and cruise phase lengths relative to the jerk
    phase. Returns (jerk, reach, peak |jerk|, peak |accel|, peak |velocity|);
    with a real step dt these scale by 1, dt**3, 1, dt and dt**2.
    """
    t1 = n_seg / (4 + 2 * r2 + r4)
    t2, t4 = r2 * t1, r4 * t1
    edges = np.cumsum([0.0, t1, t2, t1, t4, t1, t2, t1])
    edges[-1] = n_seg
    levels = np.array([1.0, 0.0, -1.0, 0.0, -1.0, 0.0, 1.0])
    # running integral of the unit jerk at each phase edge
    area = np.concatenate([[0.0], np.cumsum(levels * np.diff(edges))])
    unit = np.diff(np.interp(np.arange(n_seg + 1.0), edges, area))
    a = np.cumsum(unit)
    a_start = np.concatenate([[0.0], a[:-1]])
    v = np.cumsum(a_start + unit / 2)
    v_start = np.concatenate([[0.0], v[:-1]])
    reach = float(np.sum(v_start + a_start / 2 + unit / 6))
    unit.setflags(write=False)
    return unit, reach, float(np.max(np.abs(unit))), float(np.max(np.abs(a))), float(np.max(np.abs(v)))


def _scaled_segment_jerk(D, times, n_seg: int, dt: float, v_max, a_max, j_max):
    """Continuous S-curve stretched to exactly n_seg steps, as per-step mean jerk.

    The profile is time-symmetric, so zero-order-hold errors in velocity cancel
    over the segment; the amplitude is then set so the end point is exact.
    Returns None if the sampled profile would break a limit.
    """
    tj, ta, tv = times
    if tj <= 0:
        return None
    unit, reach, u_pk, a_pk, v_pk = _unit_profile(int(n_seg), ta / tj, tv / tj)
    if reach <= 0:
        return None
    J = np.asarray(D, dtype=float) / (reach * dt**3)
    scale = np.abs(J)
    tol = 1 + 1e-9
    if (
        np.any(scale * u_pk > np.asarray(j_max) * tol)
        or np.any(scale * a_pk * dt > np.asarray(a_max) * tol)
        or np.any(scale * v_pk * dt * dt > np.asarray(v_max) * tol)
    ):
        return None
    return np.outer(unit, J)


def integrate_controls(u: np.ndarray, dt: float, q0, v0=None, a0=None):
    """Exact zero-order-hold jerk integration. Returns (q, v, a), each (N+1, n)."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    N, n = u.shape
    q = np.empty((N + 1, n))
    v = np.empty((N + 1, n))
    a = np.empty((N + 1, n))
    q[0] = q0
    v[0] = 0.0 if v0 is None else v0
    a[0] = 0.0 if a0 is None else a0
    for k in range(N):
        uk = u[k]
        q[k + 1] = q[k] + v[k] * dt + a[k] * (dt * dt / 2) + uk * (dt**3 / 6)
        v[k + 1] = v[k] + a[k] * dt + uk * (dt * dt / 2)
        a[k + 1] = a[k] + uk * dt
    return q, v, a


def _integrate_segment(u: np.ndarray, dt: float, q0: np.ndarray):
    """Vectorized version of integrate_controls for one rest-to-rest segment."""
    a_end = np.cumsum(u, axis=0) * dt
    a_start = np.vstack([np.zeros((1, u.shape[1])), a_end[:-1]])
    dv = a_start * dt + u * (dt * dt / 2)
    v_end = np.cumsum(dv, axis=0)
    v_start = np.vstack([np.zeros((1, u.shape[1])), v_end[:-1]])
    dq = v_start * dt + a_start * (dt * dt / 2) + u * (dt**3 / 6)
    q_end = q0 + np.cumsum(dq, axis=0)
    return q_end, v_end, a_end


def _allocate(n_mins: list[int], weights: list[float], N: int) -> list[int]:
    """Split N steps over segments so the largest peak jerk is as small as possible.

    A segment stretched to n steps has peak jerk close to weight / n**3, so the
    continuous optimum gives every moving segment the same peak. Steps are set
    by bisection on that common peak, and the few left over go one at a time
    to whichever segment currently peaks highest.
    """
    total = sum(n_mins)
    if N < total:
        raise InfeasibleHorizon(f"horizon of {N} steps is below the minimum of {total}")
    w = np.asarray(weights, dtype=float)
    m = np.asarray(n_mins, dtype=int)
    if not np.any(w > 0):
        return [N - total + n_mins[0]] + list(n_mins[1:])

    def counts(J):
        with np.errstate(divide="ignore", over="ignore"):
            # no segment can use more than N steps; the cap keeps the cast finite
            n = np.minimum(np.ceil(np.cbrt(w / J) - 1e-9), N + 1).astype(int)
        return np.maximum(m, n)

    # the continuous optimum ignoring minimum lengths brackets the answer from below
    lo = max((float(np.sum(np.cbrt(w))) / N) ** 3, np.finfo(float).tiny)
    if counts(lo).sum() <= N:
        hi = lo
    else:
        hi = 2 * lo
        while counts(hi).sum() > N:
            hi *= 2
    for _ in range(50):
        if hi == lo:
            break
        mid = 0.5 * (lo + hi)
        if counts(mid).sum() <= N:
            hi = mid
        else:
            lo = mid
    alloc = counts(hi)
    rem = N - int(alloc.sum())
    heap = [(-wi / n**3, i) for i, (wi, n) in enumerate(zip(w, alloc)) if wi > 0]
    heapq.heapify(heap)
    for _ in range(rem):
        _, i = heapq.heappop(heap)
        alloc[i] += 1
        heapq.heappush(heap, (-w[i] / alloc[i] ** 3, i))
    return [int(n) for n in alloc]


def _steps_for(horizon_T: float, dt: float) -> int:
    if horizon_T <= 0 or dt <= 0:
        raise InfeasibleHorizon("horizon and dt must be positive")
    return max(1, int(round(horizon_T / dt)))


def _multi_segment(points: np.ndarray, N: int, dt: float, v_max, a_max, j_max):
    """Stop-and-go S-curve through ``points`` in exactly N steps.

    Returns (jerk controls, per-segment step counts).
    """
    deltas = np.diff(points, axis=0)
    times = [_phase_times(d, v_max, a_max, j_max) for d in deltas]
    mins = [_counts_from_times(t, dt) for t in times]
    n_mins = [4 * m1 + 2 * m2 + m4 for m1, m2, m4 in mins]
    alloc = _allocate(n_mins, [_jerk_weight(d, t, dt) for d, t in zip(deltas, times)], N) if len(deltas) else [N]
    if not len(deltas):
        return np.zeros((N, points.shape[1])), tuple(alloc)
    parts = []
    for d, t, m, n in zip(deltas, times, mins, alloc):
        u = None
        if n > 4 * m[0] + 2 * m[1] + m[2]:
            u = _scaled_segment_jerk(d, t, n, dt, v_max, a_max, j_max)
        # at the minimum length, or if sampling breaks a limit, use whole-step phases
        parts.append(_segment_jerk(d, _stretch(m, n), dt) if u is None else u)
    return np.vstack(parts), tuple(alloc)


def _joint_waypoints(arm: ArmModel, plan: ManipulationPlan, ik: IKSettings) -> np.ndarray:
    if plan.joint_path is not None:
        return plan.joint_path
    try:
        return solve_waypoints(arm, plan.poses, None, ik)
    except Exception as exc:  # UnreachablePose
        raise TrajectoryIKError(str(exc)) from exc


def joint_min_steps(points: np.ndarray, limits: ControlLimits, dt: float) -> int:
    deltas = np.diff(points, axis=0)
    return sum(
        4 * m1 + 2 * m2 + m4
        for m1, m2, m4 in (_min_counts(d, limits.v_max, limits.a_max, limits.j_max, dt) for d in deltas)
    )


def generate_joint_jpc(
    arm: ArmModel,
    plan: ManipulationPlan,
    horizon_T: float,
    limits: ControlLimits,
    dt: float = DEFAULT_DT,
    ik: IKSettings = DEFAULT_IK,
) -> ControlSequence:
    """Joint-space S-curves through the IK solutions of every waypoint.

    Every jerk sample is within limits by construction.
    """
    qs = _joint_waypoints(arm, plan, ik)
    return joint_jpc_from_points(qs, horizon_T, limits, dt)


def joint_jpc_from_points(qs: np.ndarray, horizon_T: float, limits: ControlLimits, dt: float = DEFAULT_DT) -> ControlSequence:
    qs = np.atleast_2d(np.asarray(qs, dtype=float))
    N = _steps_for(horizon_T, dt)
    u, alloc = _multi_segment(qs, N, dt, limits.v_max, limits.a_max, limits.j_max)
    q_parts, v_parts, a_parts = [qs[:1]], [np.zeros((1, qs.shape[1]))], [np.zeros((1, qs.shape[1]))]
    start = 0
    seg_starts = list(qs[:-1]) if len(qs) > 1 else [qs[0]]
    for q0, n in zip(seg_starts, alloc):
        if n == 0:
            continue
        qe, ve, ae = _integrate_segment(u[start : start + n], dt, q0)
        q_parts.append(qe)
        v_parts.append(ve)
        a_parts.append(ae)
        start += n
    max_j = float(np.max(np.abs(u))) if u.size else 0.0
    return ControlSequence(
        u, dt, np.vstack(q_parts), np.vstack(v_parts), np.vstack(a_parts), "joint_jpc",
        bool(np.any(u > limits.u_max + 1e-9) or np.any(u < limits.u_min - 1e-9)), max_j, alloc,
    )


def minimum_feasible_time(
    arm: ArmModel, plan: ManipulationPlan, limits: ControlLimits, dt: float = DEFAULT_DT, ik: IKSettings = DEFAULT_IK
) -> float:
    """Shortest horizon accepted by generate_joint_jpc (0 for a motionless plan).

    Feasibility is monotone in the step count, so the bisection bracket
    collapses onto the summed per-segment minimum step counts; that value
    is returned directly.
    """
    qs = _joint_waypoints(arm, plan, ik)
    return joint_min_steps(qs, limits, dt) * dt


# --------------------------------------------------------------------------
# Cartesian controller


def _cartesian_points(poses: list[Pose]) -> np.ndarray:
    """Per-segment (translation delta, body-frame rotation vector) as 6-vectors."""
    out = [np.zeros(6)]
    for a, b in zip(poses, poses[1:]):
        w = rotvec_from_matrix(a.rotation.T @ b.rotation)
        out.append(out[-1] + np.concatenate([b.translation - a.translation, w]))
    return np.array(out)


def cartesian_min_steps(poses: list[Pose], limits: ControlLimits, dt: float) -> int:
    v, a, j = limits.cartesian.as_arrays()
    pts = _cartesian_points(poses)
    return sum(
        4 * m1 + 2 * m2 + m4 for m1, m2, m4 in (_min_counts(d, v, a, j, dt) for d in np.diff(pts, axis=0))
    )


def finite_difference_jerk(q: np.ndarray, dt: float) -> np.ndarray:
    """Third backward difference with the path held at rest before t=0.

    Summing these controls three times with the discrete scheme
    a+=u*dt, v+=a*dt, q+=v*dt reproduces ``q`` exactly.
    """
    Q = np.vstack([q[:1], q[:1], q[:1], q])
    # nested differences keep a motionless path at exactly zero jerk
    return np.diff(Q, n=3, axis=0)[1:] / dt**3


def generate_cartesian_jpc(
    arm: ArmModel,
    plan: ManipulationPlan,
    horizon_T: float,
    limits: ControlLimits,
    dt: float = DEFAULT_DT,
    ik: IKSettings = DEFAULT_IK,
) -> ControlSequence:
    """Cartesian S-curves (straight lines, constant-axis rotations) mapped through IK.

    The joint jerk is a finite difference of the IK path and is reported,
    not clamped: ``limit_violation`` flags any sample beyond the joint limits.
    """
    poses = plan.poses
    N = _steps_for(horizon_T, dt)
    v, a, j = limits.cartesian.as_arrays()
    pts = _cartesian_points(poses)
    u_c, alloc = _multi_segment(pts, N, dt, v, a, j)

    # normalized progress s in [0,1] along each segment; all 6 axes share it
    samples: list[Pose] = [poses[0]]
    start = 0
    for i, n in enumerate(alloc):
        if n == 0:
            continue
        if len(poses) < 2:
            samples.extend([poses[0]] * n)
            break
        d = pts[i + 1] - pts[i]
        scale = np.max(np.abs(d))
        if scale == 0:
            samples.extend([poses[i + 1]] * n)
            start += n
            continue
        k = int(np.argmax(np.abs(d)))
        qe, _, _ = _integrate_segment(u_c[start : start + n, k : k + 1], dt, np.zeros(1))
        s = qe[:, 0] / d[k]
        s[-1] = 1.0
        p0, R0 = poses[i].translation, poses[i].rotation
        dp, w = d[:3], d[3:]
        for sk in s:
            samples.append(Pose(R0 @ matrix_from_rotvec(w * sk), p0 + dp * sk))
        start += n

    if plan.joint_path is not None:
        q = plan.joint_path[0]
    else:
        try:
            q = solve_waypoints(arm, poses[:1], None, ik)[0]
        except Exception as exc:
            raise TrajectoryIKError(str(exc)) from exc
    qs = np.empty((len(samples), arm.n))
    qs[0] = q
    for i, p in enumerate(samples[1:], start=1):
        if p is samples[i - 1]:
            # dwell on a waypoint: hold the joints exactly
            qs[i] = q
            continue
        # seed with a linear extrapolation of the last two solutions
        guess = 2 * qs[i - 1] - qs[i - 2] if i > 1 else q
        try:
            q = inverse_kinematics(arm, p, guess, ik)
        except IKError as exc:
            raise TrajectoryIKError(f"IK failed at sample {i}: {exc}") from exc
        qs[i] = q
    u = finite_difference_jerk(qs, dt)
    vel = np.vstack([np.zeros((1, arm.n)), np.diff(qs, axis=0) / dt])
    acc = np.vstack([np.zeros((1, arm.n)), np.diff(vel, axis=0) / dt])
    violation = bool(np.any(u > limits.u_max + 1e-9) or np.any(u < limits.u_min - 1e-9))
    return ControlSequence(
        u, dt, qs, vel, acc, "cartesian_jpc", violation, float(np.max(np.abs(u))) if u.size else 0.0, alloc
    )


def generate(controller: str, arm, plan, horizon_T, limits, dt=DEFAULT_DT, ik=DEFAULT_IK) -> ControlSequence:
    if controller == "joint_jpc":
        return generate_joint_jpc(arm, plan, horizon_T, limits, dt, ik)
    if controller == "cartesian_jpc":
        return generate_cartesian_jpc(arm, plan, horizon_T, limits, dt, ik)
    raise ValueError(f"unknown controller {controller!r}")


def control_effort(seq: ControlSequence | np.ndarray) -> float:
    """Mean per-step L1 control magnitude, (1/T_steps) * sum_t ||u_t||_1."""
    u = seq.controls if isinstance(seq, ControlSequence) else np.atleast_2d(np.asarray(seq, dtype=float))
    if u.shape[0] == 0:
        raise ValueError("empty control sequence")
    return float(np.abs(u).sum() / u.shape[0])


def load_limits(doc: dict) -> ControlLimits:
    n = 6
    j = np.broadcast_to(np.asarray(doc.get("jerk", 400.0), dtype=float), (n,))
    a = np.broadcast_to(np.asarray(doc.get("acceleration", 20.0), dtype=float), (n,))
    v = np.broadcast_to(np.asarray(doc.get("velocity", 2.0), dtype=float), (n,))
    cart = CartesianLimits(**doc.get("cartesian", {}))
    return ControlLimits(-j, j, v, a, cart)
