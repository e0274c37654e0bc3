import numpy as np
import pytest

from conftest import ROD_LENGTH, ROD_MASS
from rcwbc.errors import NonUnitQuaternion, UnknownFrame
from rcwbc.services.dynamics_service import RigidBodyDynamics, normalize_state
from rcwbc.services.model_service import model_from_dict, neutral_state, random_state
from rcwbc.types import RobotState
from rcwbc.utils.spatial import matrix_to_quat, rpy_to_matrix, so3_log

H = 1e-6


def _shifted(dynamics, state, h):
    q = dynamics.integrate_configuration(state.q, state.v, h)
    return RobotState(q, state.v)


def _two_particles(m1, m2, d):
    tiny = [[1e-9, 0.0, 0.0], [0.0, 1e-9, 0.0], [0.0, 0.0, 1e-9]]
    return model_from_dict({
        "name": "two_particles",
        "links": [{"name": "a", "mass": m1, "com": [0.0, 0.0, 0.0], "inertia": tiny, "parent_joint": "root"},
                  {"name": "b", "mass": m2, "com": [0.0, 0.0, 0.0], "inertia": tiny, "parent_joint": "hinge"}],
        "joints": [{"name": "root", "kind": "floating_base"},
                   {"name": "hinge", "kind": "revolute", "parent": "a", "axis": [0.0, 0.0, 1.0],
                    "origin": {"xyz": [d, 0.0, 0.0]}, "position_limits": [-3.0, 3.0], "velocity_limit": 10.0,
                    "torque_limits": [-1.0, 1.0], "acceleration_limits": [-10.0, 10.0]}],
    })


# --- KINEMATICS ---
def test_neutral_root_pose(biped):
    dynamics = RigidBodyDynamics(biped)
    R, p = dynamics.frame_pose(neutral_state(biped), "torso")
    np.testing.assert_array_equal(R, np.eye(3))
    np.testing.assert_array_equal(p, np.zeros(3))


def test_shoulder_quarter_turn_moves_lower_link(pendulum):
    dynamics = RigidBodyDynamics(pendulum)
    state = neutral_state(pendulum)
    state.q[pendulum.index.joint_position_index["shoulder"]] = np.pi / 2
    _, p = dynamics.frame_pose(state, "lower")
    np.testing.assert_allclose(p, [-ROD_LENGTH[0], 0.0, 0.0], atol=1e-12)


def test_base_translation_moves_every_frame(biped, rng):
    dynamics = RigidBodyDynamics(biped)
    state = random_state(biped, rng)
    moved = state.copy()
    moved.q[0] += 1.0
    before = dynamics.forward_kinematics(state)
    after = dynamics.forward_kinematics(moved)
    for name, (R, p) in before.items():
        np.testing.assert_allclose(after[name][1] - p, [1.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(after[name][0], R, atol=1e-12)


def test_unknown_frame(biped):
    with pytest.raises(UnknownFrame):
        RigidBodyDynamics(biped).frame_jacobian(neutral_state(biped), "nose")


def test_non_unit_quaternion(biped):
    state = neutral_state(biped)
    state.q[3] = 1.1
    with pytest.raises(NonUnitQuaternion):
        RigidBodyDynamics(biped).mass_matrix(state)


def test_root_jacobian_at_neutral(biped):
    J = RigidBodyDynamics(biped).frame_jacobian(neutral_state(biped), "torso")
    np.testing.assert_array_equal(J[:, :6], np.eye(6))
    assert not J[:, 6:].any()


def test_off_chain_columns_are_zero(biped, rng):
    dynamics = RigidBodyDynamics(biped)
    J = dynamics.frame_jacobian(random_state(biped, rng), "l_sole")
    for name in biped.index.revolute_joints:
        if name.startswith("r_"):
            assert not J[:, biped.index.joint_velocity_index[name]].any()


def test_jacobian_matches_finite_difference(biped, rng):
    dynamics = RigidBodyDynamics(biped)
    for _ in range(100):
        state = random_state(biped, rng)
        frame = ("l_sole", "r_sole", "torso", "l_shin")[rng.integers(4)]
        R0, p0 = dynamics.frame_pose(state, frame)
        R1, p1 = dynamics.frame_pose(_shifted(dynamics, state, H), frame)
        twist = dynamics.frame_jacobian(state, frame) @ state.v
        np.testing.assert_allclose(twist[3:], (p1 - p0) / H, atol=1e-4)
        np.testing.assert_allclose(twist[:3], so3_log(R1 @ R0.T) / H, atol=1e-4)


def test_frame_kinematics_agree_with_single_queries(biped, rng):
    dynamics = RigidBodyDynamics(biped)
    state = random_state(biped, rng)
    frames = ("l_sole", "r_sole", "torso")
    kinematics = dynamics.frame_kinematics(state, frames)
    assert set(kinematics) == set(frames)
    for frame in frames:
        R, p, J = kinematics[frame]
        R_ref, p_ref = dynamics.frame_pose(state, frame)
        np.testing.assert_array_equal(R, R_ref)
        np.testing.assert_array_equal(p, p_ref)
        np.testing.assert_array_equal(J, dynamics.frame_jacobian(state, frame))


def test_jacobian_dot_matches_finite_difference(biped, rng):
    dynamics = RigidBodyDynamics(biped)
    for _ in range(100):
        state = random_state(biped, rng)
        frame = ("l_sole", "r_sole", "l_thigh")[rng.integers(3)]
        plus = dynamics.frame_jacobian(_shifted(dynamics, state, H), frame)
        minus = dynamics.frame_jacobian(_shifted(dynamics, state, -H), frame)
        expected = (plus - minus) @ state.v / (2.0 * H)
        np.testing.assert_allclose(dynamics.jacobian_dot_times_v(state, frame), expected, atol=1e-4)


def test_jacobian_dot_is_zero_at_rest(biped, rng):
    state = random_state(biped, rng)
    state.v[:] = 0.0
    assert not RigidBodyDynamics(biped).jacobian_dot_times_v(state, "l_sole").any()


def test_pendulum_centripetal_acceleration(pendulum):
    dynamics = RigidBodyDynamics(pendulum)
    state = neutral_state(pendulum)
    omega = 2.0
    state.v[pendulum.index.joint_velocity_index["shoulder"]] = omega
    length = sum(ROD_LENGTH)
    np.testing.assert_allclose(dynamics.jacobian_dot_times_v(state, "tip")[3:], [0.0, 0.0, omega**2 * length],
                               atol=1e-12)


# --- MASS MATRIX AND BIAS ---
def test_single_body_mass_matrix(single_body, rng):
    dynamics = RigidBodyDynamics(single_body)
    state = random_state(single_body, rng)
    expected = np.zeros((6, 6))
    expected[:3, :3] = np.diag([0.3, 0.4, 0.5])
    expected[3:, 3:] = 3.0 * np.eye(3)
    np.testing.assert_allclose(dynamics.mass_matrix(state), expected, atol=1e-12)


@pytest.mark.parametrize("q2", [0.0, 0.4, -1.3, 2.5])
def test_double_pendulum_closed_form(pendulum, q2):
    (m1, m2), (l1, l2) = ROD_MASS, ROD_LENGTH
    c1, c2 = l1 / 2, l2 / 2
    I1, I2 = m1 * l1**2 / 12, m2 * l2**2 / 12
    state = neutral_state(pendulum)
    state.q[pendulum.index.joint_position_index["shoulder"]] = 0.7
    state.q[pendulum.index.joint_position_index["elbow"]] = q2
    A = RigidBodyDynamics(pendulum).mass_matrix(state)

    M11 = I1 + m1 * c1**2 + I2 + m2 * (l1**2 + c2**2 + 2 * l1 * c2 * np.cos(q2))
    M12 = I2 + m2 * (c2**2 + l1 * c2 * np.cos(q2))
    M22 = I2 + m2 * c2**2
    np.testing.assert_allclose(A[6:, 6:], [[M11, M12], [M12, M22]], atol=1e-10)


def test_mass_matrix_symmetric_positive_definite(biped, rng):
    dynamics = RigidBodyDynamics(biped)
    for _ in range(100):
        A = dynamics.mass_matrix(random_state(biped, rng))
        assert np.linalg.norm(A - A.T) < 1e-10 * np.linalg.norm(A)
        assert np.linalg.eigvalsh(A).min() > 0.0


def test_bias_is_zero_without_motion_or_gravity(biped, rng):
    state = random_state(biped, rng)
    state.v[:] = 0.0
    assert np.abs(RigidBodyDynamics(biped).nonlinear_effects(state, gravity=np.zeros(3))).max() < 1e-12


def test_static_gravity_load(biped):
    g = RigidBodyDynamics(biped).nonlinear_effects(neutral_state(biped))
    np.testing.assert_allclose(g[3:6], [0.0, 0.0, biped.total_mass * 9.81], atol=1e-9)


def test_rnea_matches_crba(biped, rng):
    dynamics = RigidBodyDynamics(biped)
    for _ in range(50):
        state = random_state(biped, rng)
        qdd = rng.normal(size=biped.nv)
        lhs = dynamics.inverse_dynamics(state, qdd) - dynamics.nonlinear_effects(state)
        np.testing.assert_allclose(lhs, dynamics.mass_matrix(state) @ qdd, atol=1e-9)


def test_external_wrench_enters_through_jacobian(biped, rng):
    dynamics = RigidBodyDynamics(biped)
    state = random_state(biped, rng)
    qdd = rng.normal(size=biped.nv)
    wrench = rng.normal(size=6)
    with_push = dynamics.inverse_dynamics(state, qdd, external={"l_sole": wrench})
    expected = dynamics.inverse_dynamics(state, qdd) - dynamics.frame_jacobian(state, "l_sole").T @ wrench
    np.testing.assert_allclose(with_push, expected, atol=1e-9)


def test_cache_agrees_with_direct_calls(biped, rng):
    dynamics = RigidBodyDynamics(biped)
    state = random_state(biped, rng)
    cache = dynamics.compute(state)
    np.testing.assert_allclose(cache.A, dynamics.mass_matrix(state), atol=1e-12)
    np.testing.assert_allclose(cache.bg, dynamics.nonlinear_effects(state), atol=1e-9)
    np.testing.assert_allclose(dynamics.cached_jacobian(cache, "r_sole"), dynamics.frame_jacobian(state, "r_sole"))
    np.testing.assert_allclose(dynamics.cached_com_jacobian(cache), dynamics.com_jacobian(state), atol=1e-12)


# --- CENTRE OF MASS ---
def test_neutral_biped_com_is_centred(biped):
    com, com_dot = RigidBodyDynamics(biped).com_state(neutral_state(biped))
    assert abs(com[0]) < 1e-12 and abs(com[1]) < 1e-12
    assert not com_dot.any()


def test_com_velocity_matches_finite_difference(biped, rng):
    dynamics = RigidBodyDynamics(biped)
    for _ in range(20):
        state = random_state(biped, rng)
        plus, _ = dynamics.com_state(_shifted(dynamics, state, H))
        minus, _ = dynamics.com_state(_shifted(dynamics, state, -H))
        np.testing.assert_allclose(dynamics.com_state(state)[1], (plus - minus) / (2 * H), atol=1e-6)


def test_com_bias_matches_finite_difference(biped, rng):
    dynamics = RigidBodyDynamics(biped)
    state = random_state(biped, rng)
    cache = dynamics.compute(state)
    plus = dynamics.com_jacobian(_shifted(dynamics, state, H)) @ state.v
    minus = dynamics.com_jacobian(_shifted(dynamics, state, -H)) @ state.v
    np.testing.assert_allclose(dynamics.cached_com_bias(cache), (plus - minus) / (2 * H), atol=1e-4)


def test_single_body_centroidal_inertia(single_body, rng):
    inertia = RigidBodyDynamics(single_body).centroidal_inertia(neutral_state(single_body))
    np.testing.assert_allclose(inertia.I_G, np.diag([0.3, 0.4, 0.5]), atol=1e-12)
    assert inertia.total_mass == pytest.approx(3.0)


def test_two_particle_parallel_axis():
    m1, m2, d = 2.0, 3.0, 0.4
    model = _two_particles(m1, m2, d)
    I_G = RigidBodyDynamics(model).centroidal_inertia(neutral_state(model)).I_G
    reduced = m1 * m2 * d**2 / (m1 + m2)
    assert I_G[1, 1] == pytest.approx(reduced + 2e-9, abs=1e-9)
    assert I_G[2, 2] == pytest.approx(reduced + 2e-9, abs=1e-9)
    assert I_G[0, 0] == pytest.approx(2e-9, abs=1e-12)


def test_centroidal_inertia_translation_and_rotation(biped, rng):
    dynamics = RigidBodyDynamics(biped)
    state = random_state(biped, rng)
    base = dynamics.centroidal_inertia(state).I_G

    moved = state.copy()
    moved.q[0:3] += [0.3, -1.0, 2.0]
    np.testing.assert_allclose(dynamics.centroidal_inertia(moved).I_G, base, atol=1e-12)

    R = rpy_to_matrix([0.3, -0.2, 1.1])
    turned = state.copy()
    R_base = dynamics.frame_pose(state, "torso")[0]
    turned.q[3:7] = matrix_to_quat(R @ R_base)
    np.testing.assert_allclose(dynamics.centroidal_inertia(turned).I_G, R @ base @ R.T, atol=1e-10)


# --- INTEGRATION ---
def test_integrate_configuration_keeps_unit_quaternion(biped, rng):
    dynamics = RigidBodyDynamics(biped)
    state = random_state(biped, rng, velocity_scale=3.0)
    q = dynamics.integrate_configuration(state.q, state.v, 0.01)
    assert np.linalg.norm(q[3:7]) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(q[7:], state.q[7:] + 0.01 * state.v[6:])


def test_normalize_state_flips_to_positive_scalar():
    state = RobotState(np.array([0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0]), np.zeros(6))
    normalize_state(state)
    np.testing.assert_allclose(state.q[3:7], [1.0, 0.0, 0.0, 0.0])
