"""
src/rcwbc/services/simulation_service.py
Closed-loop simulation of the whole-body controller on a double-support biped.
Features:
- Constrained forward dynamics: pinned feet and rolling-pair constraints with Baumgarte stabilization.
- Scripted state machine (Initialize, Balance, SwingCOM, Squat) driving the controller references.
- Lateral pushes applied through frame Jacobians.
- Per-tick trajectory log and per-phase tracking summary.
"""
from dataclasses import dataclass, field, replace

import numpy as np
import yaml
from loguru import logger
from scipy.linalg import cho_factor, cho_solve, pinv

from rcwbc.errors import ParseError, SingularKkt, SolverError, ValidationError
from rcwbc.services.actuation_service import map_joint_torques
from rcwbc.services.constraint_service import PINV_RTOL, build_internal_jacobian, constraint_residual
from rcwbc.services.dynamics_service import RigidBodyDynamics, normalize_state
from rcwbc.services.model_service import load_model, standing_state
from rcwbc.services.wbc_service import WholeBodyController, load_controller_config
from rcwbc.types import RobotModel, RobotState
from rcwbc.utils.paths import resolve_data_file
from rcwbc.utils.spatial import matrix_to_rpy, quat_to_matrix, so3_log

INITIALIZE = "Initialize"
BALANCE = "Balance"
SWING_COM = "SwingCOM"
SQUAT = "Squat"
PHASES = (INITIALIZE, BALANCE, SWING_COM, SQUAT)

DEFAULT_BAUMGARTE = 20.0
KKT_RESIDUAL_LIMIT = 1e-4


# --- SCENARIO ---
@dataclass(frozen=True)
class Phase:
    name: str
    duration: float
    amplitude: float = 0.0
    period: float = 4.0


@dataclass(frozen=True)
class Push:
    """World-frame force applied at a frame origin during [time, time + duration)."""
    time: float
    duration: float
    frame: str
    force: tuple

    def active(self, t: float) -> bool:
        return self.time <= t < self.time + self.duration


@dataclass
class Scenario:
    name: str
    phases: tuple
    model: str = "biped_rcj"
    controller: str = "balance"
    initial_joints: dict = field(default_factory=dict)
    contact_frames: tuple = ("l_sole", "r_sole")
    pushes: tuple = ()
    sim_dt: float = 0.001
    control_dt: float = 0.002
    total_time: float | None = None
    baumgarte: float = DEFAULT_BAUMGARTE
    initial_perturbation: float = 0.0
    com_task: str = "icp"
    height_task: str = "torso_height"
    orientation_task: str = "torso_orientation"

    def __post_init__(self):
        self.phases = tuple(self.phases)
        self.pushes = tuple(self.pushes)
        self.contact_frames = tuple(self.contact_frames)
        if not self.phases:
            raise ValidationError(f"Scenario '{self.name}' has no phases", field="phases")
        for phase in self.phases:
            if phase.name not in PHASES:
                raise ValidationError(f"Unknown phase '{phase.name}'", field="phases")
            if phase.duration <= 0.0 or phase.period <= 0.0:
                raise ValidationError(f"Phase '{phase.name}' needs positive duration and period", field="phases")
        if self.sim_dt <= 0.0 or self.sim_dt > 1e-3:
            raise ValidationError("sim_dt must lie in (0, 1e-3] s", field="sim_dt")
        ratio = self.control_dt / self.sim_dt
        if self.control_dt < self.sim_dt or abs(ratio - round(ratio)) > 1e-9:
            raise ValidationError("control_dt must be an integer multiple of sim_dt", field="control_dt")
        for push in self.pushes:
            if push.duration < 0.0 or len(push.force) != 3:
                raise ValidationError("Pushes need a non-negative duration and a 3-vector force", field="pushes")
        if self.total_time is not None and self.total_time <= 0.0:
            raise ValidationError("total_time must be positive", field="total_time")

    @property
    def duration(self) -> float:
        return self.total_time if self.total_time is not None else sum(p.duration for p in self.phases)

    @property
    def substeps(self) -> int:
        return int(round(self.control_dt / self.sim_dt))

    def phase_at(self, t: float):
        """Active phase and the time elapsed in it; the last phase extends past the script."""
        start = 0.0
        for phase in self.phases:
            if t < start + phase.duration - 1e-12:
                return phase, t - start
            start += phase.duration
        last = self.phases[-1]
        return last, t - (start - last.duration)


def load_scenario(path) -> Scenario:
    path = resolve_data_file(path, "scenario")
    if not path.exists():
        raise ParseError(f"Scenario file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ParseError(f"Malformed scenario file: {e}", line=mark.line + 1 if mark else None) from e
    if not isinstance(doc, dict):
        raise ParseError("Scenario document must be a mapping")

    try:
        phases = tuple(Phase(**raw) for raw in doc.pop("phases", []))
        pushes = tuple(Push(float(p["time"]), float(p["duration"]), str(p["frame"]), tuple(p["force"]))
                       for p in doc.pop("pushes", []) or [])
        references = doc.pop("references", {}) or {}
        scenario = Scenario(name=doc.pop("name", path.stem), phases=phases, pushes=pushes, **references, **doc)
    except (TypeError, KeyError, ValueError) as e:
        raise ParseError(f"Invalid scenario entry: {e}") from e
    logger.info(f"Scenario '{scenario.name}': {len(scenario.phases)} phases, {len(scenario.pushes)} pushes, "
                f"{scenario.duration:.2f}s")
    return scenario


# --- CONSTRAINED DYNAMICS ---
def apply_push(push: Push, t: float, dynamics: RigidBodyDynamics, state: RobotState, cache=None) -> np.ndarray:
    """Generalized force J^T f of the push at time t; zero outside its window."""
    if not push.active(t):
        return np.zeros(dynamics.model.nv)
    J = dynamics.cached_jacobian(cache, push.frame) if cache is not None else dynamics.frame_jacobian(state, push.frame)
    return J[3:6].T @ np.asarray(push.force, dtype=float)


def _constraint_stack(model, dynamics, cache, contact_frames, pins, ics, beta):
    """Stacked constraint Jacobian and the stabilized acceleration it must produce."""
    v = cache.state.v
    gain = 0.25 * beta * beta
    rows, targets = [], []
    for frame in contact_frames:
        J = dynamics.cached_jacobian(cache, frame)
        accel = -dynamics.cached_jacobian_dot_times_v(cache, frame) - beta * (J @ v)
        if pins is not None and frame in pins:
            R_pin, p_pin = pins[frame]
            R, p = dynamics.cached_frame_pose(cache, frame)
            accel = accel - gain * np.concatenate([so3_log(R @ R_pin.T), p - p_pin])
        rows.append(J)
        targets.append(accel)
    if ics.k:
        rows.append(ics.J_int)
        targets.append(-beta * (ics.J_int @ v) - gain * constraint_residual(model, cache.state))
    if not rows:
        return np.zeros((0, model.nv)), np.zeros(0)
    return np.vstack(rows), np.concatenate(targets)


def step_constrained_dynamics(model: RobotModel, state: RobotState, tau, contact_frames, dt: float,
                              dynamics: RigidBodyDynamics | None = None, external=None, pins=None,
                              baumgarte: float = DEFAULT_BAUMGARTE, ics=None) -> RobotState:
    """
    One semi-implicit Euler step of
        [A  -J^T] [q_ddot]   [S_a^T tau + f_ext - (b + g)]
        [J   0  ] [lambda] = [-J_dot v - beta J v - beta^2/4 e]
    solved through the reduced system (J A^-1 J^T) lambda = rhs with a pseudo-inverse.
    """
    dynamics = dynamics or RigidBodyDynamics(model)
    ics = ics or build_internal_jacobian(model)
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (model.na,):
        raise ValidationError(f"Expected {model.na} actuated torques, got {tau.shape}", field="tau")

    cache = dynamics.compute(state)
    generalized = model.selection_matrix().T @ tau - cache.bg
    if external is not None:
        generalized = generalized + np.asarray(external, dtype=float)

    factor = cho_factor(cache.A, lower=True)
    qdd_free = cho_solve(factor, generalized)
    J, accel = _constraint_stack(model, dynamics, cache, contact_frames, pins, ics, baumgarte)
    if J.shape[0]:
        A_inv_JT = cho_solve(factor, J.T)
        Lambda_inv = J @ A_inv_JT
        lam = pinv(0.5 * (Lambda_inv + Lambda_inv.T), atol=0.0, rtol=PINV_RTOL) @ (accel - J @ qdd_free)
        qdd = qdd_free + A_inv_JT @ lam
        residual = float(np.abs(J @ qdd - accel).max())
        if residual > KKT_RESIDUAL_LIMIT * max(1.0, float(np.abs(accel).max())):
            rank = int(np.linalg.matrix_rank(Lambda_inv))
            raise SingularKkt(f"Constraint stack is inconsistent at t={state.time:.4f}s "
                              f"(residual {residual:.3e}, rank {rank} of {J.shape[0]})",
                              residual=residual, rank=rank, rows=J.shape[0])
    else:
        qdd = qdd_free

    v_next = state.v + qdd * dt
    q_next = dynamics.integrate_configuration(state.q, v_next, dt)
    return normalize_state(RobotState(q_next, v_next, state.time + dt))


# --- LOG ---
@dataclass
class TickRecord:
    time: float
    phase: str
    q: np.ndarray
    v: np.ndarray
    qdd: np.ndarray
    F: np.ndarray
    tau: np.ndarray
    motor: np.ndarray
    com: np.ndarray
    com_ref: np.ndarray
    height: float
    height_ref: float
    rpy: np.ndarray
    rpy_ref: np.ndarray
    residual: np.ndarray
    internal_velocity: np.ndarray
    status: str
    iterations: int
    kkt_residual: float


@dataclass
class TrajectoryLog:
    scenario: str
    joints: tuple
    actuated: tuple
    contact_frames: tuple
    control_dt: float
    records: list = field(default_factory=list)
    failure: dict | None = None

    def __len__(self):
        return len(self.records)

    def append(self, record: TickRecord):
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def phase_slices(self) -> dict:
        out = {}
        for i, r in enumerate(self.records):
            out.setdefault(r.phase, []).append(i)
        return out

    def columns(self) -> list:
        cols = ["time", "phase", "status", "iterations", "kkt_residual",
                "com_x", "com_y", "com_z", "com_ref_x", "com_ref_y", "base_height", "base_height_ref",
                "roll", "pitch", "yaw", "roll_ref", "pitch_ref", "yaw_ref",
                "max_constraint_residual", "max_internal_velocity"]
        cols += [f"q_{j}" for j in self.joints] + [f"v_{j}" for j in self.joints]
        cols += [f"qdd_{j}" for j in self.joints]
        cols += [f"tau_{j}" for j in self.actuated] + [f"motor_{j}" for j in self.actuated]
        cols += [f"F_{f}_{c}" for f in self.contact_frames for c in ("tx", "ty", "tz", "fx", "fy", "fz")]
        return cols

    def rows(self):
        for r in self.records:
            yield [r.time, r.phase, r.status, r.iterations, r.kkt_residual, *r.com, *r.com_ref, r.height,
                   r.height_ref, *r.rpy, *r.rpy_ref, float(np.abs(r.residual).max(initial=0.0)),
                   float(np.abs(r.internal_velocity).max(initial=0.0)), *r.q[7:], *r.v[6:], *r.qdd[6:],
                   *r.tau, *r.motor, *r.F]

    def summary(self) -> dict:
        """Per-phase tracking RMS, worst attitude error, constraint drift and solver statistics."""
        phases = {}
        for name, idx in self.phase_slices().items():
            recs = [self.records[i] for i in idx]
            com_err = np.array([r.com[:2] - r.com_ref for r in recs])
            rpy_err = np.array([np.angle(np.exp(1j * (r.rpy - r.rpy_ref))) for r in recs])
            height_err = np.array([r.height - r.height_ref for r in recs])
            iterations = np.array([r.iterations for r in recs])
            com_y = np.array([r.com[1] for r in recs])
            ref_y = np.array([r.com_ref[1] for r in recs])
            phases[name] = {
                "ticks": len(recs),
                "com_rms_error": float(np.sqrt(np.mean(np.sum(com_err**2, axis=1)))),
                "base_rpy_max_error_deg": float(np.degrees(np.abs(rpy_err).max())),
                "base_height_rms_error": float(np.sqrt(np.mean(height_err**2))),
                "lateral_amplitude": float(0.5 * (com_y.max() - com_y.min())),
                "lateral_reference_amplitude": float(0.5 * (ref_y.max() - ref_y.min())),
                "max_constraint_residual": float(max(np.abs(r.residual).max(initial=0.0) for r in recs)),
                "max_internal_velocity": float(max(np.abs(r.internal_velocity).max(initial=0.0) for r in recs)),
                "optimal_ticks": sum(1 for r in recs if r.status == "optimal"),
                "mean_iterations": float(iterations.mean()),
                "max_iterations": int(iterations.max()),
            }
        return {"scenario": self.scenario, "ticks": len(self.records), "control_dt": self.control_dt,
                "failure": self.failure, "phases": phases}


# --- SCENARIO RUNNER ---
def _phase_references(phase: Phase, elapsed: float, com0, height0):
    """(com_xy, com_vel, com_acc, height, height_vel, height_acc) for the phase at `elapsed` seconds."""
    com = np.array(com0[:2], dtype=float)
    com_v = np.zeros(2)
    com_a = np.zeros(2)
    z, z_v, z_a = float(height0), 0.0, 0.0
    w = 2.0 * np.pi / phase.period
    if phase.name == SWING_COM:
        # positive y sways toward the left foot
        com[1] += phase.amplitude * np.sin(w * elapsed)
        com_v[1] = phase.amplitude * w * np.cos(w * elapsed)
        com_a[1] = -phase.amplitude * w * w * np.sin(w * elapsed)
    elif phase.name == SQUAT:
        z -= 0.5 * phase.amplitude * (1.0 - np.cos(w * elapsed))
        z_v = -0.5 * phase.amplitude * w * np.sin(w * elapsed)
        z_a = -0.5 * phase.amplitude * w * w * np.cos(w * elapsed)
    return com, com_v, com_a, z, z_v, z_a


def initial_state(model: RobotModel, scenario: Scenario, seed: int | None = None) -> RobotState:
    joints = dict(scenario.initial_joints)
    if scenario.initial_perturbation > 0.0:
        rng = np.random.default_rng(seed)
        passive = {p.passive_joint for p in model.rolling_pairs}
        for name in model.index.revolute_joints:
            if name not in passive:
                joints[name] = joints.get(name, 0.0) + rng.normal(0.0, scenario.initial_perturbation)
        for pair in model.rolling_pairs:
            joints.pop(pair.passive_joint, None)
    return standing_state(model, joints, scenario.contact_frames)


def run_scenario(scenario: Scenario, log_every: int = 1, duration: float | None = None, seed: int | None = None,
                 model: RobotModel | None = None) -> TrajectoryLog:
    if log_every < 1:
        raise ValidationError("log_every must be at least 1", field="log_every")
    model = model or load_model(scenario.model)
    tasks, contacts, config = load_controller_config(scenario.controller)
    config = replace(config, dt=scenario.control_dt)
    dynamics = RigidBodyDynamics(model)
    ics = build_internal_jacobian(model)

    state = initial_state(model, scenario, seed)
    pins = {frame: dynamics.frame_pose(state, frame) for frame in scenario.contact_frames}
    controller = WholeBodyController(model, tasks, contacts, config, dynamics)
    controller.reset(state)
    task_names = {t.name for t in controller.tasks}

    com0, _ = dynamics.com_state(state)
    height0 = float(state.q[2])
    rpy0 = matrix_to_rpy(quat_to_matrix(state.base_quaternion))
    if scenario.orientation_task in task_names:
        rpy0 = matrix_to_rpy(controller.task(scenario.orientation_task).orientation)

    duration = scenario.duration if duration is None else duration
    ticks = int(round(duration / scenario.control_dt))
    log = TrajectoryLog(scenario.name, model.index.revolute_joints, model.index.actuated_joints,
                        scenario.contact_frames, scenario.control_dt)
    logger.info(f"Running '{scenario.name}' for {duration:.2f}s: {ticks} control ticks x {scenario.substeps} "
                f"substeps on '{model.name}'")

    for tick in range(ticks):
        t = tick * scenario.control_dt
        state.time = t
        phase, elapsed = scenario.phase_at(t)
        com_ref, com_v, com_a, z_ref, z_v, z_a = _phase_references(phase, elapsed, com0, height0)
        if scenario.com_task in task_names:
            controller.set_reference(scenario.com_task, position=com_ref, velocity=com_v, acceleration=com_a)
        if scenario.height_task in task_names:
            controller.set_reference(scenario.height_task, position=[z_ref], velocity=[z_v], acceleration=[z_a])

        try:
            out = controller.update(state)
        except SolverError as e:
            log.failure = {"time": t, "error": type(e).__name__, "message": str(e), "block": e.details.get("block")}
            logger.error(f"Scenario '{scenario.name}' stopped at t={t:.3f}s: {e}")
            break

        if tick % log_every == 0:
            motor = map_joint_torques(model, out.tau)
            log.append(TickRecord(
                time=t, phase=phase.name, q=state.q.copy(), v=state.v.copy(), qdd=out.qdd.copy(),
                F=out.F.copy(), tau=out.tau.copy(), motor=np.array([motor[j] for j in model.index.actuated_joints]),
                com=out.diagnostics["com"].copy(), com_ref=com_ref, height=float(state.q[2]), height_ref=z_ref,
                rpy=matrix_to_rpy(quat_to_matrix(state.base_quaternion)), rpy_ref=rpy0,
                residual=constraint_residual(model, state), internal_velocity=ics.J_int @ state.v,
                status=out.status, iterations=out.iterations, kkt_residual=out.kkt_residual,
            ))

        try:
            for sub in range(scenario.substeps):
                t_sub = t + sub * scenario.sim_dt
                external = np.zeros(model.nv)
                for push in scenario.pushes:
                    external += apply_push(push, t_sub, dynamics, state)
                state = step_constrained_dynamics(model, state, out.tau, scenario.contact_frames, scenario.sim_dt,
                                                  dynamics, external, pins, scenario.baumgarte, ics)
        except SingularKkt as e:
            log.failure = {"time": t, "error": type(e).__name__, "message": str(e), "block": e.details.get("block")}
            logger.error(f"Simulation of '{scenario.name}' stopped at t={t:.3f}s: {e}")
            break

    logger.info(f"Scenario '{scenario.name}' finished with {len(log)} log rows"
                + (" (truncated)" if log.failure else ""))
    return log
