import numpy as np
import pytest

from rcwbc.errors import ParseError, SingularKkt, ValidationError
from rcwbc.services.constraint_service import build_internal_jacobian, constraint_residual
from rcwbc.services.dynamics_service import RigidBodyDynamics
from rcwbc.services.model_service import neutral_state, random_state
from rcwbc.services.simulation_service import (
    BALANCE, INITIALIZE, SQUAT, SWING_COM, Phase, Push, Scenario, _phase_references, apply_push, initial_state,
    load_scenario, run_scenario, step_constrained_dynamics,
)
from rcwbc.utils.spatial import rpy_to_matrix

SCENARIOS = ("balance_push", "impulse_push", "com_sway", "squat")


def _scenario(**overrides):
    settings = dict(name="test", phases=(Phase(INITIALIZE, 0.5), Phase(BALANCE, 1.0)))
    settings.update(overrides)
    return Scenario(**settings)


# --- CONSTRAINED DYNAMICS ---
def test_free_body_falls(single_body):
    state = neutral_state(single_body)
    nxt = step_constrained_dynamics(single_body, state, np.zeros(0), (), 1e-3)
    assert nxt.v[5] == pytest.approx(-9.81e-3)
    assert nxt.q[2] == pytest.approx(-9.81e-6)
    assert nxt.time == pytest.approx(1e-3)


def test_free_drift_without_gravity(single_body):
    dynamics = RigidBodyDynamics(single_body, gravity=(0.0, 0.0, 0.0))
    state = neutral_state(single_body)
    state.v[3] = 1.0
    for _ in range(1000):
        state = step_constrained_dynamics(single_body, state, np.zeros(0), (), 1e-3, dynamics)
    assert state.q[0] == pytest.approx(1.0)
    assert state.v[3] == pytest.approx(1.0)
    np.testing.assert_allclose(state.base_quaternion, [1.0, 0.0, 0.0, 0.0])


def test_pinned_pivot_stays_put(pendulum):
    dynamics = RigidBodyDynamics(pendulum)
    state = neutral_state(pendulum)
    state.q[pendulum.index.joint_position_index["shoulder"]] = 0.6
    pins = {"pivot": dynamics.frame_pose(state, "pivot")}
    for _ in range(500):
        state = step_constrained_dynamics(pendulum, state, np.zeros(2), ("pivot",), 1e-3, dynamics, pins=pins)
    R, p = dynamics.frame_pose(state, "pivot")
    np.testing.assert_allclose(p, pins["pivot"][1], atol=1e-6)
    np.testing.assert_allclose(R, pins["pivot"][0], atol=1e-6)
    assert state.q[pendulum.index.joint_position_index["shoulder"]] != pytest.approx(0.6)


def test_rolling_pair_stays_consistent(rolling_arm, rng):
    dynamics = RigidBodyDynamics(rolling_arm)
    ics = build_internal_jacobian(rolling_arm)
    state = random_state(rolling_arm, rng, velocity_scale=0.5)
    for _ in range(200):
        tau = rng.normal(size=rolling_arm.na)
        state = step_constrained_dynamics(rolling_arm, state, tau, (), 1e-3, dynamics)
    assert np.abs(ics.J_int @ state.v).max() < 1e-9
    assert np.abs(constraint_residual(rolling_arm, state)).max() < 1e-9


def test_wrong_torque_count(rolling_arm):
    with pytest.raises(ValidationError):
        step_constrained_dynamics(rolling_arm, neutral_state(rolling_arm), np.zeros(5), (), 1e-3)


def test_contradicting_pins(pendulum):
    dynamics = RigidBodyDynamics(pendulum)
    state = neutral_state(pendulum)
    R_tip, p_tip = dynamics.frame_pose(state, "tip")
    pins = {"pivot": dynamics.frame_pose(state, "pivot"), "tip": (rpy_to_matrix([0.1, 0.0, 0.0]) @ R_tip, p_tip)}
    with pytest.raises(SingularKkt):
        step_constrained_dynamics(pendulum, state, np.zeros(2), ("pivot", "tip"), 1e-3, dynamics, pins=pins)


# --- PUSHES ---
def test_push_window():
    push = Push(1.0, 0.5, "torso", (0.0, 16.0, 0.0))
    assert not push.active(0.999)
    assert push.active(1.0)
    assert push.active(1.499)
    assert not push.active(1.5)


def test_push_on_root_frame(biped):
    dynamics = RigidBodyDynamics(biped)
    state = neutral_state(biped)
    push = Push(1.0, 0.5, "torso", (0.0, 16.0, 0.0))
    assert not apply_push(push, 0.5, dynamics, state).any()
    force = apply_push(push, 1.2, dynamics, state)
    np.testing.assert_allclose(force[3:6], [0.0, 16.0, 0.0])
    assert not force[:3].any() and not force[6:].any()


def test_push_on_limb_reaches_joints(biped):
    dynamics = RigidBodyDynamics(biped)
    state = random_state(biped, np.random.default_rng(3))
    force = apply_push(Push(0.0, 1.0, "l_sole", (5.0, 0.0, 0.0)), 0.1, dynamics, state)
    J = dynamics.frame_jacobian(state, "l_sole")
    np.testing.assert_allclose(force, J[3:6].T @ [5.0, 0.0, 0.0])


# --- SCENARIOS ---
def test_phase_lookup():
    scenario = _scenario()
    assert scenario.duration == pytest.approx(1.5)
    assert scenario.substeps == 2
    phase, elapsed = scenario.phase_at(0.2)
    assert (phase.name, elapsed) == (INITIALIZE, pytest.approx(0.2))
    phase, elapsed = scenario.phase_at(0.5)
    assert (phase.name, elapsed) == (BALANCE, pytest.approx(0.0))
    phase, elapsed = scenario.phase_at(2.0)
    assert (phase.name, elapsed) == (BALANCE, pytest.approx(1.5))
    assert _scenario(total_time=0.25).duration == 0.25


@pytest.mark.parametrize("overrides", [
    {"phases": ()},
    {"phases": (Phase("Walk", 1.0),)},
    {"phases": (Phase(BALANCE, 0.0),)},
    {"sim_dt": 0.002, "control_dt": 0.004},
    {"control_dt": 0.0015},
    {"control_dt": 0.0005},
    {"pushes": (Push(1.0, 0.1, "torso", (1.0, 2.0)),)},
    {"total_time": -1.0},
])
def test_invalid_scenarios(overrides):
    with pytest.raises(ValidationError):
        _scenario(**overrides)


def test_swing_references():
    phase = Phase(SWING_COM, 8.0, amplitude=0.05, period=4.0)
    com, com_v, com_a, z, _, _ = _phase_references(phase, 1.0, [0.1, 0.0, 0.9], 1.0)
    np.testing.assert_allclose(com, [0.1, 0.05])
    np.testing.assert_allclose(com_v, [0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(com_a, [0.0, -0.05 * (np.pi / 2) ** 2])
    assert z == 1.0


def test_squat_references():
    phase = Phase(SQUAT, 8.0, amplitude=0.05, period=4.0)
    com, _, _, z, z_v, z_a = _phase_references(phase, 2.0, [0.0, 0.0, 0.9], 1.0)
    assert z == pytest.approx(0.95)
    assert z_v == pytest.approx(0.0, abs=1e-12)
    assert z_a == pytest.approx(0.025 * (np.pi / 2) ** 2)
    _, _, _, z0, _, _ = _phase_references(phase, 0.0, [0.0, 0.0, 0.9], 1.0)
    assert z0 == 1.0


@pytest.mark.parametrize("name", SCENARIOS)
def test_bundled_scenarios_load(name):
    scenario = load_scenario(name)
    assert scenario.name == name
    assert scenario.substeps == 2
    assert scenario.contact_frames == ("l_sole", "r_sole")


def test_balance_push_script():
    scenario = load_scenario("balance_push")
    assert scenario.duration == pytest.approx(10.0)
    assert [p.force for p in scenario.pushes] == [(0.0, 16.0, 0.0), (0.0, 60.0, 0.0)]
    assert scenario.com_task == "icp"


def test_scenario_with_unknown_key(tmp_path):
    path = tmp_path / "odd.yaml"
    path.write_text("phases: [{name: Balance, duration: 1.0}]\nwind: strong\n", encoding="utf-8")
    with pytest.raises(ParseError):
        load_scenario(path)


def test_initial_state_touches_ground(biped):
    scenario = load_scenario("balance_push")
    state = initial_state(biped, scenario)
    dynamics = RigidBodyDynamics(biped)
    for frame in scenario.contact_frames:
        assert dynamics.frame_pose(state, frame)[1][2] == pytest.approx(0.0, abs=1e-12)
    assert not state.v.any()


def test_perturbed_initial_state_is_reproducible(biped):
    scenario = _scenario(initial_perturbation=0.01)
    a = initial_state(biped, scenario, seed=7)
    b = initial_state(biped, scenario, seed=7)
    np.testing.assert_array_equal(a.q, b.q)
    assert np.abs(constraint_residual(biped, a)).max() < 1e-12
    assert not np.array_equal(a.q, initial_state(biped, scenario, seed=8).q)


# --- CLOSED LOOP ---
def test_short_run_log_layout(biped):
    log = run_scenario(load_scenario("impulse_push"), duration=0.02, model=biped)
    assert len(log) == 10
    columns = log.columns()
    rows = list(log.rows())
    assert all(len(row) == len(columns) for row in rows)
    assert log.failure is None
    assert log.column("time")[1] == pytest.approx(0.002)
    summary = log.summary()
    assert summary["ticks"] == 10
    assert summary["phases"][INITIALIZE]["ticks"] == 10


def test_log_every(biped):
    log = run_scenario(load_scenario("impulse_push"), duration=0.02, log_every=2, model=biped)
    assert len(log) == 5
    np.testing.assert_allclose(log.column("time"), [0.0, 0.004, 0.008, 0.012, 0.016])
    with pytest.raises(ValidationError):
        run_scenario(load_scenario("impulse_push"), duration=0.02, log_every=0, model=biped)


@pytest.mark.slow
def test_sustained_push_offsets_com(biped):
    log = run_scenario(load_scenario("balance_push"), duration=2.0, log_every=10, model=biped)
    assert log.failure is None
    com_y = log.column("com")[:, 1]
    assert 0.005 < com_y[-1] - com_y[0] < 0.08
    balance = log.summary()["phases"][BALANCE]
    assert balance["max_constraint_residual"] < 1e-3
    assert balance["base_rpy_max_error_deg"] < 5.0


@pytest.mark.slow
@pytest.mark.parametrize("name,phase", [("com_sway", SWING_COM), ("squat", SQUAT)])
def test_scripted_motion_is_tracked(biped, name, phase):
    log = run_scenario(load_scenario(name), duration=5.0, log_every=10, model=biped)
    assert log.failure is None
    stats = log.summary()["phases"][phase]
    assert stats["optimal_ticks"] >= 0.9 * stats["ticks"]
    assert stats["max_constraint_residual"] < 1e-3
    assert stats["com_rms_error"] < 0.02
    assert stats["base_height_rms_error"] < 0.02
