import numpy as np
import pytest

from rcwbc.errors import IkDidNotConverge
from rcwbc.services.constraint_service import build_internal_jacobian, constraint_residual
from rcwbc.services.dynamics_service import RigidBodyDynamics
from rcwbc.services.ik_service import FrameTarget, constrained_velocity_basis, solve_ik
from rcwbc.services.model_service import standing_state

STANCE = {"l_hip_pitch": -0.5, "l_knee_distal": 0.5, "l_ankle_pitch": -0.5,
          "r_hip_pitch": -0.5, "r_knee_distal": 0.5, "r_ankle_pitch": -0.5}


@pytest.fixture(scope="module")
def stance(biped):
    return standing_state(biped, STANCE, ["l_sole", "r_sole"])


def _targets(dynamics, state, swing_offset):
    R_r, p_r = dynamics.frame_pose(state, "r_sole")
    R_l, p_l = dynamics.frame_pose(state, "l_sole")
    return [FrameTarget("r_sole", p_r, R_r), FrameTarget("l_sole", p_l + swing_offset, R_l)]


def test_basis_spans_constraint_subspace(biped, sagittal):
    for model in (biped, sagittal):
        B = constrained_velocity_basis(model)
        ics = build_internal_jacobian(model)
        assert B.shape == (model.nv, model.nv - ics.k)
        assert not np.abs(ics.J_int @ B).max() > 1e-15
        assert np.linalg.matrix_rank(B) == model.nv - ics.k


def test_target_already_met(biped, stance):
    dynamics = RigidBodyDynamics(biped)
    solution = solve_ik(biped, _targets(dynamics, stance, np.zeros(3)), stance, dynamics=dynamics)
    assert solution.iterations == 0
    np.testing.assert_array_equal(solution.state.q, stance.q)


def test_reachable_step(biped, stance):
    dynamics = RigidBodyDynamics(biped)
    offset = np.array([0.05, 0.02, 0.03])
    targets = _targets(dynamics, stance, offset)
    solution = solve_ik(biped, targets, stance, dynamics=dynamics)
    assert solution.residual < 1e-6
    _, p = dynamics.frame_pose(solution.state, "l_sole")
    np.testing.assert_allclose(p, targets[1].position, atol=1e-6)
    assert np.abs(constraint_residual(biped, solution.state)).max() < 1e-12
    assert np.linalg.norm(solution.state.base_quaternion) == pytest.approx(1.0)


def test_joint_limits_hold(biped, stance):
    dynamics = RigidBodyDynamics(biped)
    solution = solve_ik(biped, _targets(dynamics, stance, np.array([0.1, 0.0, 0.1])), stance, dynamics=dynamics)
    for name in biped.index.actuated_joints:
        lo, hi = biped.joint(name).position_limits
        assert lo <= solution.state.q[biped.index.joint_position_index[name]] <= hi


def test_partial_axes(biped, stance):
    dynamics = RigidBodyDynamics(biped)
    _, p = dynamics.frame_pose(stance, "torso")
    target = FrameTarget("torso", p[:2] + [0.02, 0.0], axes="xy")
    assert target.position.shape == (2,)
    R_r, p_r = dynamics.frame_pose(stance, "r_sole")
    R_l, p_l = dynamics.frame_pose(stance, "l_sole")
    targets = [FrameTarget("r_sole", p_r, R_r), FrameTarget("l_sole", p_l, R_l), target]
    solution = solve_ik(biped, targets, stance, dynamics=dynamics)
    assert dynamics.frame_pose(solution.state, "torso")[1][0] == pytest.approx(p[0] + 0.02, abs=1e-6)


def test_unreachable_target(biped, stance):
    dynamics = RigidBodyDynamics(biped)
    with pytest.raises(IkDidNotConverge) as info:
        solve_ik(biped, _targets(dynamics, stance, np.array([10.0, 0.0, 0.0])), stance, max_iterations=100,
                 dynamics=dynamics)
    assert info.value.exit_code == 4
    assert info.value.details["residual"] > 1.0
