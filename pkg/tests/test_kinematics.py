import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from legomanip.eoat import EoatConfig, home_configuration
from legomanip.kinematics import (
    ArmModel,
    DHRow,
    IKNotConverged,
    IKSettings,
    JointLimitError,
    Pose,
    compose,
    default_arm,
    dh_matrix,
    forward_kinematics,
    inverse,
    inverse_kinematics,
    jacobian,
    pose_error,
    rot_xyz_deg,
    rot_y,
    rot_y_pose,
    rotate_about_axis_frame,
    rotation_angle,
    xyz_deg_from_rot,
)

angles = st.floats(-math.pi, math.pi, allow_nan=False)
coords = st.floats(-500, 500, allow_nan=False)


def random_pose(rng):
    return Pose(rot_xyz_deg(*rng.uniform(-180, 180, 3)), rng.uniform(-300, 300, 3))


def homog(p: Pose) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3], T[:3, 3] = p.rotation, p.translation
    return T


@pytest.fixture(scope="module")
def arm():
    return default_arm().with_tool(EoatConfig().tool_pose())


def test_compose_identity_and_closure():
    rng = np.random.default_rng(1)
    P = random_pose(rng)
    assert np.allclose(compose(P, Pose.identity()).matrix(), P.matrix(), atol=1e-12)
    half = rot_y_pose(0.3)
    assert np.allclose(compose(half, half).rotation, rot_y(0.6), atol=1e-12)


def test_compose_matches_matrix_product():
    rng = np.random.default_rng(2)
    for _ in range(50):
        P, Q = random_pose(rng), random_pose(rng)
        assert np.allclose(compose(P, Q).matrix(), homog(P) @ homog(Q), atol=1e-9)


def test_inverse_gives_identity():
    rng = np.random.default_rng(3)
    for _ in range(50):
        P = random_pose(rng)
        assert np.allclose(compose(P, inverse(P)).matrix(), np.eye(4), atol=1e-9)


def test_reflection_is_not_a_valid_pose():
    assert Pose.identity().is_valid()
    assert not Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3)).is_valid()
    with pytest.raises(ValueError):
        Pose(np.eye(2), np.zeros(3))


def test_long_composition_chain_stays_orthonormal():
    rng = np.random.default_rng(4)
    P = Pose.identity()
    for _ in range(100):
        P = compose(P, random_pose(rng))
        R = P.rotation
        assert abs(np.linalg.det(R) - 1) < 1e-9
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)


@given(st.floats(-89, 89), st.floats(-179, 179), st.floats(-179, 179))
def test_xyz_angle_round_trip(ax, ay, az):
    R = rot_xyz_deg(ax, ay, az)
    assert np.allclose(rot_xyz_deg(*xyz_deg_from_rot(R)), R, atol=1e-9)


def test_rotate_zero_angle_is_identity():
    rng = np.random.default_rng(5)
    P, A = random_pose(rng), random_pose(rng)
    assert np.allclose(rotate_about_axis_frame(P, A, 0.0).matrix(), P.matrix(), atol=1e-12)


def test_rotate_fixes_points_on_axis():
    rng = np.random.default_rng(6)
    A = random_pose(rng)
    for s in (-40.0, 0.0, 25.0):
        on_axis = A.transform_point([0.0, s, 0.0])
        target = Pose(rot_xyz_deg(10, 20, 30), on_axis)
        out = rotate_about_axis_frame(target, A, math.radians(35))
        assert np.allclose(out.translation, on_axis, atol=1e-9)


def test_rotate_matches_conjugation_oracle():
    # axis offset 7.8 mm along x of the tool frame, 15 degree twist
    tool = Pose(rot_xyz_deg(180, 0, 0), [450.0, 0.0, 260.0])
    axis = compose(tool, Pose(np.eye(3), [7.8, 0.0, 0.0]))
    angle = math.radians(15)
    oracle = homog(axis) @ homog(rot_y_pose(angle)) @ np.linalg.inv(homog(axis)) @ homog(tool)
    assert np.allclose(rotate_about_axis_frame(tool, axis, angle).matrix(), oracle, atol=1e-9)


@given(st.floats(-1.5, 1.5), coords, coords, coords)
def test_rotate_then_unrotate_restores(angle, x, y, z):
    A = Pose(rot_xyz_deg(30, -20, 45), [x, y, z])
    P = Pose(rot_xyz_deg(5, 10, 15), [100.0, -50.0, 20.0])
    back = rotate_about_axis_frame(rotate_about_axis_frame(P, A, angle), A, -angle)
    assert np.allclose(back.matrix(), P.matrix(), atol=1e-9)


def test_rotate_rejects_beyond_quarter_turn():
    with pytest.raises(ValueError):
        rotate_about_axis_frame(Pose.identity(), Pose.identity(), 2.0)


def test_fk_degenerate_chain_is_base_pose():
    base = Pose(rot_xyz_deg(0, 0, 30), [10.0, 20.0, 30.0])
    arm = ArmModel(tuple(DHRow(0.0, 0.0, 0.0) for _ in range(6)), np.tile([-3.0, 3.0], (6, 1)), base)
    assert np.allclose(forward_kinematics(arm, np.zeros(6)).matrix(), base.matrix(), atol=1e-12)


def test_fk_matches_dh_product(arm):
    q0 = home_configuration(arm)
    for j in range(6):
        q = q0.copy()
        q[j] += 0.2
        T = arm.base_pose.matrix()
        for row, qi in zip(arm.dh_rows, q):
            T = T @ dh_matrix(row, qi)
        T = T @ arm.tool_pose.matrix()
        assert np.allclose(forward_kinematics(arm, q).matrix(), T, atol=1e-9)


def test_fk_limit_boundary(arm):
    q = home_configuration(arm)
    q[0] = arm.joint_limits[0, 1]
    forward_kinematics(arm, q)
    q[0] += 1e-9
    with pytest.raises(JointLimitError):
        forward_kinematics(arm, q)


def test_jacobian_matches_finite_differences(arm):
    q = home_configuration(arm) + 0.1
    J, T0 = jacobian(arm, q)
    h = 1e-6
    for j in range(6):
        dq = np.zeros(6)
        dq[j] = h
        T1 = forward_kinematics(arm, q + dq, check=False)
        dp = (T1.translation - T0.translation) / h
        dR = T1.rotation @ T0.rotation.T
        w = np.array([dR[2, 1] - dR[1, 2], dR[0, 2] - dR[2, 0], dR[1, 0] - dR[0, 1]]) / (2 * h)
        assert np.allclose(J[:3, j], dp, atol=1e-3)
        assert np.allclose(J[3:, j], w, atol=1e-5)


def test_ik_fixed_point(arm):
    q = home_configuration(arm)
    out = inverse_kinematics(arm, forward_kinematics(arm, q), q)
    assert np.allclose(out, q, atol=1e-9)


def test_ik_small_tool_z_move(arm):
    q = home_configuration(arm)
    P = forward_kinematics(arm, q)
    target = compose(P, Pose(np.eye(3), [0.0, 0.0, 1.0]))
    dt, dr = pose_error(forward_kinematics(arm, inverse_kinematics(arm, target, q)), target)
    assert dt < 1e-4 and dr < 1e-6


def test_ik_out_of_reach(arm):
    q = home_configuration(arm)
    with pytest.raises(IKNotConverged):
        inverse_kinematics(arm, Pose(np.eye(3), [5000.0, 0.0, 0.0]), q)


def test_ik_workspace_radius(arm):
    q = home_configuration(arm)
    P = forward_kinematics(arm, q)
    far = Pose(P.rotation, P.translation + [0.0, 0.0, 50.0])
    with pytest.raises(IKNotConverged):
        inverse_kinematics(arm, far, q, IKSettings(workspace_radius=10.0))


def test_ik_round_trip_random_targets(arm):
    rng = np.random.default_rng(7)
    q0 = home_configuration(arm)
    worst_t = worst_r = 0.0
    for _ in range(1000):
        q = np.clip(q0 + rng.uniform(-0.3, 0.3, 6), arm.joint_limits[:, 0], arm.joint_limits[:, 1])
        target = forward_kinematics(arm, q)
        sol = inverse_kinematics(arm, target, q0)
        assert arm.within_limits(sol)
        dt, dr = pose_error(forward_kinematics(arm, sol), target)
        worst_t, worst_r = max(worst_t, dt), max(worst_r, dr)
    assert worst_t < 1e-4 and worst_r < 1e-6


def test_arm_validation():
    rows = tuple(DHRow(0.0, 0.0, 0.0) for _ in range(5))
    with pytest.raises(ValueError):
        ArmModel(rows, np.tile([-1.0, 1.0], (5, 1)))
    rows6 = rows + (DHRow(0.0, 0.0, 0.0),)
    bad = np.tile([-1.0, 1.0], (6, 1))
    bad[2] = [1.0, 1.0]
    with pytest.raises(ValueError):
        ArmModel(rows6, bad)


def test_rotation_angle_of_rot_y():
    assert rotation_angle(rot_y(0.4)) == pytest.approx(0.4, abs=1e-12)
