import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from legomanip.eoat import ManipulationPlan, TwistSpec, Waypoint, home_configuration, plan_manipulation
from legomanip.kinematics import Pose, compose, forward_kinematics
from legomanip.learn import Scenario, scenario_world
from legomanip.lego_world import BrickKind, Placement
from legomanip.trajectory import (
    ControlLimits,
    InfeasibleHorizon,
    control_effort,
    finite_difference_jerk,
    generate,
    generate_cartesian_jpc,
    generate_joint_jpc,
    integrate_controls,
    joint_jpc_from_points,
    joint_min_steps,
    minimum_feasible_time,
)

LIMITS = ControlLimits.uniform(jerk=50000.0, acc=1500.0, vel=3.0)


def min_time_oracle(D, v, a, j):
    """Rest-to-rest jerk-limited minimum time by bisection on the peak velocity."""

    def t_acc(vp):
        return vp / a + a / j if vp * j >= a * a else 2 * math.sqrt(vp / j)

    if D * 1.0 >= v * t_acc(v):
        return 2 * t_acc(v) + (D - v * t_acc(v)) / v
    lo, hi = 0.0, v
    for _ in range(200):
        mid = (lo + hi) / 2
        if mid * t_acc(mid) <= D:
            lo = mid
        else:
            hi = mid
    return 2 * t_acc(lo)


def plan_for(sim, mode="disassemble", cell=(10, 10), height=1, spec=None):
    sc = Scenario(mode, BrickKind(1, 2), height)
    world, target = scenario_world(sim, sc, cell, 0, None)
    spec = spec or TwistSpec(mode, 7.8 if mode == "assemble" else 0.0, 0.0 if mode == "assemble" else 3.2, 15.0)
    return plan_manipulation(world, target, spec, sim.eoat, None, sim.arm)


def static_plan(sim, q):
    p = forward_kinematics(sim.arm, q)
    wps = (Waypoint(p, "approach"),)
    return ManipulationPlan(wps, Placement(BrickKind(1, 2), (0, 0)), TwistSpec("disassemble", 0, 3.2, 15), 1, p, p, np.array([q]))


@pytest.fixture(scope="module")
def plan(sim):
    return plan_for(sim)


def test_single_waypoint_gives_zero_controls(sim):
    q = home_configuration(sim.arm)
    for ctrl in ("joint_jpc", "cartesian_jpc"):
        seq = generate(ctrl, sim.arm, static_plan(sim, q), 0.5, sim.limits, sim.dt)
        assert np.all(seq.controls == 0)
        assert not seq.limit_violation


def test_zero_displacement_min_time(sim):
    assert minimum_feasible_time(sim.arm, static_plan(sim, home_configuration(sim.arm)), sim.limits) == 0.0


def test_jerk_scales_with_inverse_cube(sim, plan):
    a = generate_joint_jpc(sim.arm, plan, 2.0, sim.limits, sim.dt)
    b = generate_joint_jpc(sim.arm, plan, 4.0, sim.limits, sim.dt)
    assert b.max_abs_jerk / a.max_abs_jerk == pytest.approx(1 / 8, rel=0.05)


def test_horizon_below_minimum_raises(sim, plan):
    tmin = minimum_feasible_time(sim.arm, plan, sim.limits, sim.dt)
    generate_joint_jpc(sim.arm, plan, tmin, sim.limits, sim.dt)
    with pytest.raises(InfeasibleHorizon):
        generate_joint_jpc(sim.arm, plan, tmin - 2 * sim.dt, sim.limits, sim.dt)


def test_min_time_is_the_feasibility_boundary(sim, plan):
    # bisection over step counts lands on the closed-form count
    dt = sim.dt
    lo, hi = 1, 10_000
    while lo < hi:
        mid = (lo + hi) // 2
        try:
            generate_joint_jpc(sim.arm, plan, mid * dt, sim.limits, dt)
            hi = mid
        except InfeasibleHorizon:
            lo = mid + 1
    assert lo * dt == pytest.approx(minimum_feasible_time(sim.arm, plan, sim.limits, dt), abs=1e-12)


@pytest.mark.parametrize(
    "D,v,a,j",
    [(1.0, 3.0, 1500.0, 50000.0), (0.01, 3.0, 1500.0, 50000.0), (0.5, 2.0, 20.0, 400.0), (0.05, 2.0, 20.0, 400.0), (0.002, 2.0, 20.0, 400.0)],
)
def test_single_joint_min_time_matches_closed_form(D, v, a, j):
    lim = ControlLimits.uniform(n=1, jerk=j, acc=a, vel=v)
    dt = 1e-4
    steps = joint_min_steps(np.array([[0.0], [D]]), lim, dt)
    assert abs(steps * dt - min_time_oracle(D, v, a, j)) < 2e-3


def test_doubling_limits_shortens_min_time(sim, plan):
    # fine dt so the per-phase one-step floor does not mask the change
    t1 = minimum_feasible_time(sim.arm, plan, sim.limits, 1e-5)
    t2 = minimum_feasible_time(sim.arm, plan, sim.limits.scaled(2.0), 1e-5)
    assert t2 < t1


def test_jerk_bound_over_random_plans():
    rng = np.random.default_rng(11)
    dt = 0.004
    worst = 0.0
    for _ in range(500):
        k = rng.integers(2, 8)
        qs = np.cumsum(rng.normal(0, 0.05, (k, 6)), axis=0)
        qs[:, rng.random(6) < 0.2] = 0.0  # some idle joints
        n_min = joint_min_steps(qs, LIMITS, dt)
        T = (n_min + rng.integers(0, 400)) * dt
        seq = joint_jpc_from_points(qs, T, LIMITS, dt)
        worst = max(worst, float(np.max(np.abs(seq.controls) - LIMITS.j_max)))
        assert not seq.limit_violation
        assert np.max(np.abs(seq.velocities)) <= 3.0 + 1e-9
        assert np.max(np.abs(seq.accelerations)) <= 1500.0 + 1e-6
    assert worst <= 1e-9


def test_triple_integration_reproduces_path(sim, plan):
    seq = generate_joint_jpc(sim.arm, plan, 1.5, sim.limits, sim.dt)
    q, v, a = integrate_controls(seq.controls, seq.dt, seq.positions[0])
    assert np.max(np.abs(q - seq.positions)) < 1e-6
    assert np.allclose(v, seq.velocities, atol=1e-6)
    assert np.allclose(a, seq.accelerations, atol=1e-6)


def test_rest_at_every_waypoint(sim, plan):
    seq = generate_joint_jpc(sim.arm, plan, 1.5, sim.limits, sim.dt)
    bounds = np.cumsum((0,) + seq.segment_steps)
    assert bounds[-1] == seq.steps
    for k in bounds:
        assert np.max(np.abs(seq.velocities[k])) < 1e-9
        assert np.max(np.abs(seq.accelerations[k])) < 1e-9
    assert np.allclose(seq.positions[bounds], plan.joint_path, atol=1e-9)


def test_generation_is_deterministic(sim, plan):
    for ctrl in ("joint_jpc", "cartesian_jpc"):
        a = generate(ctrl, sim.arm, plan, 2.0, sim.limits, sim.dt)
        b = generate(ctrl, sim.arm, plan, 2.0, sim.limits, sim.dt)
        assert np.array_equal(a.controls, b.controls) and np.array_equal(a.positions, b.positions)


def test_cartesian_straight_move_is_smooth(sim):
    q = home_configuration(sim.arm)
    start = forward_kinematics(sim.arm, q)
    end = compose(Pose(np.eye(3), [10.0, 0.0, 0.0]), start)
    wps = (Waypoint(start, "approach"), Waypoint(end, "insert"))
    plan = ManipulationPlan(wps, Placement(BrickKind(1, 2), (0, 0)), TwistSpec("disassemble", 0, 3.2, 15), 1, start, start, np.array([q]))
    seq = generate_cartesian_jpc(sim.arm, plan, 1.0, sim.limits, sim.dt)
    assert np.all(np.isfinite(seq.controls))
    assert not seq.limit_violation
    # controls are the finite-difference jerk of the produced path
    assert np.allclose(finite_difference_jerk(seq.positions, seq.dt), seq.controls, atol=1e-6)
    tip = [forward_kinematics(sim.arm, qk, check=False).translation for qk in seq.positions]
    tip = np.array(tip)
    off_line = np.linalg.norm(np.cross(tip - start.translation, [1.0, 0.0, 0.0]), axis=1)
    assert off_line.max() < 1e-3
    assert np.linalg.norm(tip[-1] - end.translation) < 1e-4


def near_singular_plan(sim, miss=0.02):
    """Wrist tilt swings across the flange axis, passing ``miss`` rad from it."""
    q0 = np.radians([0.0, 10.0, -10.0, 0.0, 0.0, 0.0])
    qa, qb = q0.copy(), q0.copy()
    qa[3:] = miss, 0.3, -miss
    qb[3:] = math.pi - miss, 0.3, -(math.pi - miss)
    pa, pb = forward_kinematics(sim.arm, qa), forward_kinematics(sim.arm, qb)
    wps = (Waypoint(pa, "approach"), Waypoint(pb, "insert"))
    return ManipulationPlan(wps, Placement(BrickKind(1, 2), (0, 0)), TwistSpec("disassemble", 0, 3.2, 15), 1, pa, pa, np.vstack([qa, qb]))


def test_cartesian_near_singularity_flags_violation(sim):
    seq = generate_cartesian_jpc(sim.arm, near_singular_plan(sim), 1.5, sim.limits, sim.dt)
    assert seq.limit_violation
    assert seq.max_abs_jerk > sim.limits.j_max.max()
    # joint-space generation of the same waypoints stays inside the bound
    js = generate_joint_jpc(sim.arm, near_singular_plan(sim), 1.5, sim.limits, sim.dt)
    assert not js.limit_violation


def test_effort_examples():
    assert control_effort(np.zeros((5, 6))) == 0.0
    assert control_effort(np.full((7, 1), -2.5)) == 2.5


@given(st.integers(1, 50), st.integers(1, 6), st.integers(0, 2**31))
def test_effort_matches_loop_oracle(n, m, seed):
    u = np.random.default_rng(seed).normal(0, 100, (n, m))
    total = 0.0
    for row in u:
        for x in row:
            total += abs(x)
    assert control_effort(u) == pytest.approx(total / n, rel=1e-12, abs=1e-12)


def test_export_has_header_and_rows(sim, plan):
    seq = generate_joint_jpc(sim.arm, plan, 1.0, sim.limits, sim.dt)
    lines = seq.export().splitlines()
    assert lines[0].split(",")[:2] == ["t", "q1"]
    assert len(lines) == seq.steps + 2


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 12), st.floats(0, 1e6)), min_size=1, max_size=12),
    st.integers(0, 400),
)
def test_allocation_is_minimax(segments, extra):
    from legomanip.trajectory import _allocate

    n_mins = [max(m, 1) if w > 0 else 0 for m, w in segments]
    weights = [w for _, w in segments]
    N = sum(n_mins) + extra
    alloc = _allocate(n_mins, weights, N)
    assert sum(alloc) == N
    assert all(n >= m for n, m in zip(alloc, n_mins))

    def peak(a):
        return max((w / n**3 for w, n in zip(weights, a) if w > 0), default=0.0)

    # proportional split is one feasible choice; the minimax split never peaks higher
    total = sum(n_mins)
    if total and any(w > 0 for w in weights):
        prop = [m + (extra * m) // total for m in n_mins]
        prop[0] += N - sum(prop)
        assert peak(alloc) <= peak(prop) * (1 + 1e-9)
