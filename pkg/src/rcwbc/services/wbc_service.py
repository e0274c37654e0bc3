"""
src/rcwbc/services/wbc_service.py
Whole-body controller: one weighted QP over joint accelerations and contact wrenches.
Features:
- Operational-space tasks (frame position/orientation/pose, CoM, capture point, joint posture).
- Linearized contact wrench cone, normal-force cap and torque limits through the projected dynamics.
- Internal rolling-contact constraints as hard equalities.
- Torque recovery by the dynamically consistent inverse of the truncated S_a N_int.
- Leaky integration of joint position/velocity commands.
"""
from dataclasses import dataclass, field, replace

import numpy as np
import yaml
from loguru import logger
from scipy.linalg import block_diag, lstsq

from rcwbc.errors import DimensionMismatch, MissingContactFrame, ParseError, SolverInfeasible, ValidationError
from rcwbc.services.constraint_service import (
    InternalConstraintSet, ProjectedDynamics, build_internal_jacobian, nullspace_projector,
    truncated_actuation_inverse,
)
from rcwbc.services.dynamics_service import DynamicsCache, RigidBodyDynamics
from rcwbc.services.qp_service import INFEASIBLE, OPTIMAL, QpProblem, QpSolver
from rcwbc.types import REVOLUTE, RobotModel, RobotState
from rcwbc.utils.paths import resolve_data_file
from rcwbc.utils.spatial import matrix_to_rpy, rpy_to_matrix, so3_log

FRAME_POSITION = "frame_position"
FRAME_ORIENTATION = "frame_orientation"
FRAME_POSE = "frame_pose"
COM = "com"
ICP = "icp"
JOINT = "joint"
TASK_KINDS = (FRAME_POSITION, FRAME_ORIENTATION, FRAME_POSE, COM, ICP, JOINT)

CONE_ROWS = 11
AXES = "xyz"


# --- TASKS ---
@dataclass
class TaskTerms:
    """One evaluated task: cost rows J q_ddot + bias - desired, plus what the log shows."""
    name: str
    J: np.ndarray
    bias: np.ndarray
    desired: np.ndarray
    measured: np.ndarray
    reference: np.ndarray


@dataclass
class TaskSpec:
    """
    Weight W = weight * I. References left as None are latched to the measured value
    (WholeBodyController.reset) or, for one-shot solves, read as zero error.
    Orientation references are rotation matrices; `position` of a frame_pose task is its linear part.
    """
    name: str
    kind: str
    weight: float = 1.0
    kp: float = 0.0
    kd: float = 0.0
    frame: str | None = None
    joints: tuple = ()
    axes: str | None = None
    position: np.ndarray | None = None
    orientation: np.ndarray | None = None
    velocity: np.ndarray | None = None
    acceleration: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValidationError(f"Task '{self.name}' has unknown kind '{self.kind}'", field=f"tasks.{self.name}.kind")
        if self.weight < 0.0 or self.kp < 0.0 or self.kd < 0.0:
            raise ValidationError(f"Task '{self.name}' needs non-negative weight and gains", field=f"tasks.{self.name}")
        if self.kind in (FRAME_POSITION, FRAME_ORIENTATION, FRAME_POSE) and not self.frame:
            raise ValidationError(f"Task '{self.name}' needs a frame", field=f"tasks.{self.name}.frame")
        if self.kind == JOINT and not self.joints:
            raise ValidationError(f"Task '{self.name}' needs a joint list", field=f"tasks.{self.name}.joints")
        if self.axes is None:
            self.axes = "xy" if self.kind == ICP else AXES
        if not self.axes or any(a not in AXES for a in self.axes):
            raise ValidationError(f"Task '{self.name}' has invalid axes '{self.axes}'", field=f"tasks.{self.name}.axes")
        self.joints = tuple(self.joints)
        for name in ("position", "velocity", "acceleration"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, np.array(value, dtype=float))
        if self.orientation is not None:
            R = np.array(self.orientation, dtype=float)
            self.orientation = rpy_to_matrix(R) if R.shape == (3,) else R

    @property
    def rows(self):
        return [AXES.index(a) for a in self.axes]

    @property
    def dim(self):
        if self.kind == JOINT:
            return len(self.joints)
        if self.kind == FRAME_ORIENTATION:
            return 3
        if self.kind == FRAME_POSE:
            return 6
        return len(self.axes)


def _feedforward(value, n, part=slice(None)):
    """Velocity/acceleration reference, zero when unset; `part` picks the angular or linear half of a pose."""
    return np.zeros(n) if value is None else np.asarray(value, dtype=float)[part].reshape(n)


def _frame_terms(task, dynamics, cache):
    R, p = dynamics.cached_frame_pose(cache, task.frame)
    J_full = dynamics.cached_jacobian(cache, task.frame)
    jdv = dynamics.cached_jacobian_dot_times_v(cache, task.frame)
    twist = J_full @ cache.state.v
    pose = task.kind == FRAME_POSE

    parts = []
    if task.kind in (FRAME_ORIENTATION, FRAME_POSE):
        R_ref = R if task.orientation is None else task.orientation
        omega_ref = _feedforward(task.velocity, 3, slice(0, 3) if pose else slice(None))
        alpha_ref = _feedforward(task.acceleration, 3, slice(0, 3) if pose else slice(None))
        error = so3_log(R_ref @ R.T)
        desired = alpha_ref + task.kp * error + task.kd * (omega_ref - twist[:3])
        parts.append((J_full[:3], jdv[:3], desired, matrix_to_rpy(R), matrix_to_rpy(R_ref)))

    if task.kind in (FRAME_POSITION, FRAME_POSE):
        rows = [0, 1, 2] if pose else task.rows
        n = len(rows)
        v_ref = _feedforward(task.velocity, n, slice(3, 6) if pose else slice(None))
        a_ref = _feedforward(task.acceleration, n, slice(3, 6) if pose else slice(None))
        p_ref = p[rows] if task.position is None else task.position.reshape(n)
        desired = a_ref + task.kp * (p_ref - p[rows]) + task.kd * (v_ref - twist[3:][rows])
        parts.append((J_full[3:][rows], jdv[3:][rows], desired, p[rows], p_ref))

    return [np.concatenate(x) if x[0].ndim == 1 else np.vstack(x) for x in zip(*parts)]


def _com_terms(task, dynamics, cache, ground_height):
    rows = task.rows
    n = len(rows)
    J = dynamics.cached_com_jacobian(cache)[rows]
    bias = dynamics.cached_com_bias(cache)[rows]
    c, c_dot = cache.com[rows], cache.com_velocity[rows]
    c_ref = c if task.position is None else task.position.reshape(n)
    v_ref = _feedforward(task.velocity, n)
    a_ref = _feedforward(task.acceleration, n)

    if task.kind == COM:
        desired = a_ref + task.kp * (c_ref - c) + task.kd * (v_ref - c_dot)
        return J, bias, desired, c, c_ref

    g = float(-dynamics.gravity[2])
    height = float(cache.com[2] - ground_height)
    if g <= 0.0 or height <= 0.0:
        raise ValidationError(f"Capture point task '{task.name}' needs gravity and a CoM above the ground",
                              field=f"tasks.{task.name}")
    omega = np.sqrt(g / height)
    icp = c + c_dot / omega
    icp_ref = c_ref + v_ref / omega
    icp_rate_ref = v_ref + a_ref / omega
    desired = omega * (icp_rate_ref + task.kp * (icp_ref - icp) - c_dot)
    return J, bias, desired, icp, icp_ref


def _joint_terms(task, model, cache):
    n = len(task.joints)
    J = np.zeros((n, model.nv))
    q = np.zeros(n)
    qd = np.zeros(n)
    for row, name in enumerate(task.joints):
        if name not in model.index.joint_velocity_index or model.joint(name).kind != REVOLUTE:
            raise ValidationError(f"Task '{task.name}' names unknown joint '{name}'", field=f"tasks.{task.name}.joints")
        i_v = model.index.joint_velocity_index[name]
        J[row, i_v] = 1.0
        q[row] = cache.state.q[model.index.joint_position_index[name]]
        qd[row] = cache.state.v[i_v]
    q_ref = q if task.position is None else task.position.reshape(n)
    qd_ref = _feedforward(task.velocity, n)
    desired = _feedforward(task.acceleration, n) + task.kp * (q_ref - q) + task.kd * (qd_ref - qd)
    return J, np.zeros(n), desired, q, q_ref


def evaluate_task(task: TaskSpec, model: RobotModel, dynamics: RigidBodyDynamics, cache: DynamicsCache,
                  ground_height: float = 0.0) -> TaskTerms:
    if task.kind in (FRAME_POSITION, FRAME_ORIENTATION, FRAME_POSE):
        J, bias, desired, measured, reference = _frame_terms(task, dynamics, cache)
    elif task.kind in (COM, ICP):
        J, bias, desired, measured, reference = _com_terms(task, dynamics, cache, ground_height)
    else:
        J, bias, desired, measured, reference = _joint_terms(task, model, cache)
    return TaskTerms(task.name, J, bias, desired, measured, reference)


# --- CONTACTS ---
@dataclass
class ContactSpec:
    """Surface foot contact with a [torque; force] wrench at the contact frame origin."""
    frame: str
    mu: float = 0.6
    half_length_x: float = 0.1
    half_length_y: float = 0.05
    max_normal_force: float = 1000.0
    desired_wrench: np.ndarray | None = None
    weight: float = 1e-3
    yaw_friction: float | None = None
    dim: int = 6

    def __post_init__(self):
        where = f"contacts.{self.frame}"
        if self.mu <= 0.0:
            raise ValidationError(f"Contact '{self.frame}' needs mu > 0", field=f"{where}.mu")
        if self.max_normal_force <= 0.0:
            raise ValidationError(f"Contact '{self.frame}' needs max_normal_force > 0", field=f"{where}.max_normal_force")
        if self.half_length_x <= 0.0 or self.half_length_y <= 0.0:
            raise ValidationError(f"Contact '{self.frame}' needs positive foot half-lengths", field=where)
        if self.weight < 0.0:
            raise ValidationError(f"Contact '{self.frame}' needs a non-negative weight", field=f"{where}.weight")
        if self.dim != 6:
            raise ValidationError("Only surface contacts (dim 6) are supported", field=f"{where}.dim")
        if self.desired_wrench is not None:
            self.desired_wrench = np.array(self.desired_wrench, dtype=float).reshape(6)
            if (build_friction_cone(self) @ self.desired_wrench < -1e-9).any():
                raise ValidationError(f"Desired wrench of '{self.frame}' lies outside its friction cone",
                                      field=f"{where}.desired_wrench")

    @property
    def torsional_friction(self):
        if self.yaw_friction is not None:
            return self.yaw_friction
        return self.mu * min(self.half_length_x, self.half_length_y)


def build_friction_cone(contact: ContactSpec, rotation=None) -> np.ndarray:
    """
    11 x 6 rows U with U F >= 0 on F = [tau_x, tau_y, tau_z, f_x, f_y, f_z]:
    unilateral, four friction edges, four CoP edges, two yaw-torque bounds.
    With `rotation` (contact -> world) the rows act on the world-aligned wrench.
    """
    mu, lx, ly, mu_z = contact.mu, contact.half_length_x, contact.half_length_y, contact.torsional_friction
    U = np.array([
        [0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, -1.0, 0.0, mu],
        [0.0, 0.0, 0.0, 1.0, 0.0, mu],
        [0.0, 0.0, 0.0, 0.0, -1.0, mu],
        [0.0, 0.0, 0.0, 0.0, 1.0, mu],
        [0.0, -1.0, 0.0, 0.0, 0.0, lx],
        [0.0, 1.0, 0.0, 0.0, 0.0, lx],
        [-1.0, 0.0, 0.0, 0.0, 0.0, ly],
        [1.0, 0.0, 0.0, 0.0, 0.0, ly],
        [0.0, 0.0, -1.0, 0.0, 0.0, mu_z],
        [0.0, 0.0, 1.0, 0.0, 0.0, mu_z],
    ])
    if rotation is None:
        return U
    R = np.asarray(rotation, dtype=float)
    return U @ block_diag(R.T, R.T)


def gravity_compensating_wrenches(dynamics: RigidBodyDynamics, cache: DynamicsCache, frames) -> np.ndarray:
    """Minimum-norm stacked wrenches that hold the floating base against gravity: J_c[:, :6]^T F = g[:6]."""
    if not frames:
        return np.zeros(0)
    J_c = np.vstack([dynamics.cached_jacobian(cache, f) for f in frames])
    return lstsq(J_c[:, :6].T, cache.g[:6])[0]


# --- CONFIGURATION ---
@dataclass
class WbcConfig:
    lambda_q: float = 1e-4
    lambda_f: float = 1e-6
    tolerance: float = 1e-8
    max_iterations: int = 200
    dt: float = 0.002
    velocity_clamp: float | None = None
    position_margin: float = 0.0
    velocity_time_constant: float | None = 0.1
    position_time_constant: float | None = 0.5

    def __post_init__(self):
        if self.lambda_q <= 0.0 or self.lambda_f <= 0.0:
            raise ValidationError("Regularization weights must be strictly positive", field="regularization")
        if self.dt <= 0.0:
            raise ValidationError("Controller dt must be positive", field="dt")
        if self.position_margin < 0.0:
            raise ValidationError("Position margin must be non-negative", field="clamps.position_margin")


@dataclass(frozen=True)
class CommandClamps:
    velocity: np.ndarray
    position_lower: np.ndarray
    position_upper: np.ndarray

    @classmethod
    def from_model(cls, model: RobotModel, margin: float = 0.0, velocity: float | None = None):
        joints = [model.joint(name) for name in model.index.revolute_joints]
        v_max = np.array([j.velocity_limit if velocity is None else min(velocity, j.velocity_limit) for j in joints])
        lower = np.array([j.position_limits[0] + margin for j in joints])
        upper = np.array([j.position_limits[1] - margin for j in joints])
        return cls(v_max, lower, upper)


@dataclass
class WbcOutput:
    qdd: np.ndarray
    F: np.ndarray
    tau: np.ndarray
    q_des: np.ndarray
    v_des: np.ndarray
    status: str
    iterations: int
    kkt_residual: float
    objective: float
    tasks: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def optimal(self):
        return self.status == OPTIMAL


# --- ASSEMBLY ---
def project_dynamics(model: RobotModel, cache: DynamicsCache, contacts, dynamics: RigidBodyDynamics,
                     ics: InternalConstraintSet | None = None) -> ProjectedDynamics:
    """N_int and every projected term the QP and torque recovery need at this state."""
    ics = ics or build_internal_jacobian(model)
    J_c = _contact_jacobian(model, cache, contacts, dynamics)
    return nullspace_projector(ics, cache.A, cache.bg, model.selection_matrix(), J_c)


def _contact_jacobian(model, cache, contacts, dynamics):
    for c in contacts:
        if c.frame not in model.index.frames:
            raise MissingContactFrame(f"Contact frame '{c.frame}' is not defined on model '{model.name}'",
                                      frame=c.frame)
    if not contacts:
        return np.zeros((0, model.nv))
    return np.vstack([dynamics.cached_jacobian(cache, c.frame) for c in contacts])


def _torque_map(model, projected, J_c, bg):
    """tau = T_q q_ddot + T_F F + t0, the joint rows of the projected dynamics mapped through S_bar^T."""
    S_bar = projected.actuation_inverse
    if S_bar is None:
        S_bar = truncated_actuation_inverse(projected, model.selection_matrix())
    N = projected.N_int
    bias = projected.bias if projected.bias is not None else N.T @ bg
    contact_map = projected.contact_map
    if contact_map is None or contact_map.shape[1] != J_c.shape[0]:
        contact_map = N.T @ J_c.T
    return S_bar.T @ projected.A[6:, :], -S_bar.T @ contact_map[6:, :], S_bar.T @ bias[6:]


def _add_task_cost(H, g, terms: TaskTerms, weight):
    # 1/2 of w |J x + bias - desired|^2
    if weight > 0.0:
        H += weight * (terms.J.T @ terms.J)
        g += weight * (terms.J.T @ (terms.bias - terms.desired))


def assemble_wbc_qp(model: RobotModel, state: RobotState, tasks, contacts, projected: ProjectedDynamics,
                    config: WbcConfig, dynamics: RigidBodyDynamics | None = None, cache: DynamicsCache | None = None,
                    ics: InternalConstraintSet | None = None, task_terms: dict | None = None) -> QpProblem:
    """
    Decision variables x = [q_ddot; F], F the stacked contact wrenches.
    Equalities: floating-base rows of the dynamics, then J_int q_ddot = 0.
    Inequalities: wrench cones, normal-force caps, actuated torque limits. Box: joint accelerations.
    """
    dynamics = dynamics or RigidBodyDynamics(model)
    cache = cache or dynamics.compute(state)
    ics = ics or build_internal_jacobian(model)
    nv = model.nv
    nc = len(contacts)
    nf = 6 * nc
    n = nv + nf
    if projected.A.shape != (nv, nv):
        raise DimensionMismatch(f"Projected dynamics are {projected.A.shape[0]}-dimensional, model nv is {nv}")

    J_c = _contact_jacobian(model, cache, contacts, dynamics)
    ground = float(np.mean([dynamics.cached_frame_pose(cache, c.frame)[1][2] for c in contacts])) if contacts else 0.0

    # cost
    H = np.zeros((n, n))
    g = np.zeros(n)
    H[:nv, :nv] += config.lambda_q * np.eye(nv)
    for task in tasks:
        terms = evaluate_task(task, model, dynamics, cache, ground)
        if task_terms is not None:
            task_terms[task.name] = terms
        padded = replace(terms, J=np.hstack([terms.J, np.zeros((terms.J.shape[0], nf))]))
        _add_task_cost(H, g, padded, task.weight)

    if nc:
        F_auto = None
        for i, c in enumerate(contacts):
            sl = slice(nv + 6 * i, nv + 6 * i + 6)
            if c.desired_wrench is not None:
                F_d = c.desired_wrench
            else:
                if F_auto is None:
                    F_auto = gravity_compensating_wrenches(dynamics, cache, [c.frame for c in contacts])
                F_d = F_auto[6 * i:6 * i + 6]
            H[sl, sl] += (c.weight + config.lambda_f) * np.eye(6)
            g[sl] -= c.weight * F_d

    # equalities
    k = ics.k
    A_eq = np.zeros((6 + k, n))
    b_eq = np.zeros(6 + k)
    A_eq[:6, :nv] = cache.A[:6]
    A_eq[:6, nv:] = -J_c[:, :6].T
    b_eq[:6] = -cache.bg[:6]
    A_eq[6:, :nv] = ics.J_int

    # inequalities
    blocks, lower, upper, names = [], [], [], {"floating_base": (0, 6), "internal": (6, 6 + k)}
    row = 0
    if nc:
        cone = np.zeros((CONE_ROWS * nc, n))
        cap = np.zeros((nc, n))
        for i, c in enumerate(contacts):
            R, _ = dynamics.cached_frame_pose(cache, c.frame)
            cone[CONE_ROWS * i:CONE_ROWS * (i + 1), nv + 6 * i:nv + 6 * i + 6] = build_friction_cone(c, R)
            cap[i, nv + 6 * i + 3:nv + 6 * i + 6] = R[:, 2]
        blocks += [cone, cap]
        lower += [np.zeros(CONE_ROWS * nc), np.full(nc, -np.inf)]
        upper += [np.full(CONE_ROWS * nc, np.inf), np.array([c.max_normal_force for c in contacts])]
        names["friction_cone"] = (row, row + CONE_ROWS * nc)
        names["normal_force_cap"] = (row + CONE_ROWS * nc, row + CONE_ROWS * nc + nc)
        row += CONE_ROWS * nc + nc

    T_q, T_F, t0 = _torque_map(model, projected, J_c, cache.bg)
    limits = np.array([model.joint(name).torque_limits for name in model.index.actuated_joints]).reshape(-1, 2)
    blocks.append(np.hstack([T_q, T_F]))
    lower.append(limits[:, 0] - t0)
    upper.append(limits[:, 1] - t0)
    names["torque"] = (row, row + model.na)

    # box: joint accelerations only
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    for name in model.index.revolute_joints:
        i = model.index.joint_velocity_index[name]
        lb[i], ub[i] = model.joint(name).acceleration_limits

    return QpProblem(H=H, g=g, A_eq=A_eq, b_eq=b_eq, A_in=np.vstack(blocks), lb_in=np.concatenate(lower),
                     ub_in=np.concatenate(upper), lb=lb, ub=ub, names=names)


def _diagnose_infeasibility(problem: QpProblem, config: WbcConfig):
    """Relax inequality blocks one after another until the QP becomes feasible; the last relaxed block is blamed."""
    relaxed = replace(problem, lb_in=problem.lb_in.copy(), ub_in=problem.ub_in.copy())
    solver = QpSolver(config.tolerance, config.max_iterations)
    for block in ("torque", "normal_force_cap", "friction_cone"):
        if block not in problem.names:
            continue
        start, stop = problem.names[block]
        relaxed.lb_in[start:stop] = -np.inf
        relaxed.ub_in[start:stop] = np.inf
        if solver.solve_qp(relaxed).status != INFEASIBLE:
            return block
    relaxed.lb[:] = -np.inf
    relaxed.ub[:] = np.inf
    if solver.solve_qp(relaxed).status != INFEASIBLE:
        return "joint_acceleration"
    return "floating_base_dynamics"


# --- TORQUES AND COMMANDS ---
def recover_torques(model: RobotModel, state: RobotState, qdd, F, projected: ProjectedDynamics) -> np.ndarray:
    """
    tau = S_bar^T (A q_ddot + N_int^T (b + g) - (J_c N_int)^T F), joint rows only.
    `projected` must carry the bias and, when F is not empty, the contact map.
    """
    qdd = np.asarray(qdd, dtype=float)
    F = np.asarray(F, dtype=float).reshape(-1)
    if qdd.shape != (model.nv,):
        raise DimensionMismatch(f"q_ddot has shape {qdd.shape}, expected ({model.nv},)")
    if projected.bias is None:
        raise DimensionMismatch("Projected dynamics carry no bias term")
    S_bar = projected.actuation_inverse
    if S_bar is None:
        S_bar = truncated_actuation_inverse(projected, model.selection_matrix())

    r = projected.A @ qdd + projected.bias
    if F.size:
        if projected.contact_map is None or projected.contact_map.shape[1] != F.size:
            raise DimensionMismatch(f"Contact map does not match {F.size} wrench components")
        r = r - projected.contact_map @ F
    return S_bar.T @ r[6:]


def integrate_joint_command(q_des, v_des, qdd_joints, dt, clamps: CommandClamps | None = None, q_meas=None,
                            v_meas=None, velocity_time_constant=None, position_time_constant=None):
    """Velocity first, then position, each clamped, then leaked toward the measured joint state."""
    if dt <= 0.0:
        raise ValidationError("Integration step must be positive", field="dt")
    v = np.asarray(v_des, dtype=float) + np.asarray(qdd_joints, dtype=float) * dt
    if clamps is not None:
        v = np.clip(v, -clamps.velocity, clamps.velocity)
    q = np.asarray(q_des, dtype=float) + v * dt
    if clamps is not None:
        q = np.clip(q, clamps.position_lower, clamps.position_upper)

    if v_meas is not None and velocity_time_constant:
        v = v + (np.asarray(v_meas, dtype=float) - v) * min(1.0, dt / velocity_time_constant)
    if q_meas is not None and position_time_constant:
        q = q + (np.asarray(q_meas, dtype=float) - q) * min(1.0, dt / position_time_constant)
    return q, v


def solve_wbc(model: RobotModel, state: RobotState, tasks, contacts, config: WbcConfig,
              dynamics: RigidBodyDynamics | None = None, solver: QpSolver | None = None, command=None,
              clamps: CommandClamps | None = None, ics: InternalConstraintSet | None = None) -> WbcOutput:
    """
    One control tick: dynamics -> assemble -> solve -> recover -> integrate.
    `command` is the previous (q_des, v_des); the measured joint state is used when absent.
    """
    dynamics = dynamics or RigidBodyDynamics(model)
    solver = solver or QpSolver(config.tolerance, config.max_iterations)
    ics = ics or build_internal_jacobian(model)
    cache = dynamics.compute(state)
    projected = project_dynamics(model, cache, contacts, dynamics, ics)

    terms = {}
    problem = assemble_wbc_qp(model, state, tasks, contacts, projected, config, dynamics, cache, ics, terms)
    solution = solver.solve_qp(problem, warm_start=solver.active_set)

    if solution.status == INFEASIBLE:
        block = _diagnose_infeasibility(problem, config)
        logger.error(f"Whole-body QP infeasible at t={state.time:.3f}s, blocked by '{block}'")
        raise SolverInfeasible(f"Whole-body QP infeasible ({block} constraints)", block=block,
                               diagnostics={"certificate": solution.certificate, "time": state.time,
                                            "iterations": solution.iterations})
    if solution.status != OPTIMAL:
        logger.warning(f"Whole-body QP returned '{solution.status}' after {solution.iterations} iterations "
                       f"(KKT residual {solution.kkt_residual:.2e})")

    nv = model.nv
    qdd = solution.x[:nv]
    F = solution.x[nv:]
    tau = recover_torques(model, state, qdd, F, projected)

    q_prev, v_prev = command if command is not None else (state.joint_positions, state.joint_velocities)
    clamps = clamps or CommandClamps.from_model(model, config.position_margin, config.velocity_clamp)
    q_des, v_des = integrate_joint_command(q_prev, v_prev, qdd[6:], config.dt, clamps, state.joint_positions,
                                           state.joint_velocities, config.velocity_time_constant,
                                           config.position_time_constant)

    logger.trace(f"WBC t={state.time:.3f}s: {solution.iterations} iterations, |qdd|={np.linalg.norm(qdd):.3e}")
    return WbcOutput(qdd=qdd, F=F, tau=tau, q_des=q_des, v_des=v_des, status=solution.status,
                     iterations=solution.iterations, kkt_residual=solution.kkt_residual,
                     objective=solution.objective, tasks=terms,
                     diagnostics={"active_set": solution.active_set, "problem": problem,
                                  "com": cache.com, "com_velocity": cache.com_velocity})


class WholeBodyController:
    """One instance per robot. Keeps the joint commands and the QP warm start between ticks."""

    def __init__(self, model: RobotModel, tasks, contacts, config: WbcConfig | None = None,
                 dynamics: RigidBodyDynamics | None = None):
        self.model = model
        self.tasks = list(tasks)
        self.contacts = list(contacts)
        self.config = config or WbcConfig()
        self.dynamics = dynamics or RigidBodyDynamics(model)
        self.ics = build_internal_jacobian(model)
        self.solver = QpSolver(self.config.tolerance, self.config.max_iterations)
        self.clamps = CommandClamps.from_model(model, self.config.position_margin, self.config.velocity_clamp)
        self.q_des = None
        self.v_des = None

        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ValidationError("Task names must be unique", field="tasks")
        for c in self.contacts:
            if c.frame not in model.index.frames:
                raise MissingContactFrame(f"Contact frame '{c.frame}' is not defined on model '{model.name}'",
                                          frame=c.frame)
        logger.info(f"Whole-body controller ready: {len(self.tasks)} tasks, {len(self.contacts)} contacts, "
                    f"{self.ics.k} internal constraints")

    def task(self, name: str) -> TaskSpec:
        for task in self.tasks:
            if task.name == name:
                return task
        raise ValidationError(f"Unknown task '{name}'", field="tasks")

    def reset(self, state: RobotState):
        """Latch commands to the measured joints and every unset reference to its measured value."""
        self.q_des = state.joint_positions.copy()
        self.v_des = state.joint_velocities.copy()
        self.solver.active_set = None
        cache = self.dynamics.compute(state)
        ground = 0.0
        if self.contacts:
            ground = float(np.mean([self.dynamics.cached_frame_pose(cache, c.frame)[1][2] for c in self.contacts]))
        for task in self.tasks:
            if task.kind in (FRAME_ORIENTATION, FRAME_POSE) and task.orientation is None:
                task.orientation = self.dynamics.cached_frame_pose(cache, task.frame)[0].copy()
            if task.kind in (FRAME_POSITION, FRAME_POSE) and task.position is None:
                p = self.dynamics.cached_frame_pose(cache, task.frame)[1]
                task.position = p[task.rows].copy() if task.kind == FRAME_POSITION else p.copy()
            if task.kind in (COM, ICP) and task.position is None:
                task.position = cache.com[task.rows].copy()
            if task.kind == JOINT and task.position is None:
                task.position = evaluate_task(task, self.model, self.dynamics, cache, ground).measured.copy()
        logger.debug(f"Controller reset at t={state.time:.3f}s")

    def set_reference(self, name: str, position=None, velocity=None, acceleration=None, orientation=None):
        task = self.task(name)
        if position is not None:
            task.position = np.array(position, dtype=float)
        if orientation is not None:
            R = np.array(orientation, dtype=float)
            task.orientation = rpy_to_matrix(R) if R.shape == (3,) else R
        if velocity is not None:
            task.velocity = np.array(velocity, dtype=float)
        if acceleration is not None:
            task.acceleration = np.array(acceleration, dtype=float)

    def update(self, state: RobotState) -> WbcOutput:
        if self.q_des is None:
            self.reset(state)
        out = solve_wbc(self.model, state, self.tasks, self.contacts, self.config, self.dynamics, self.solver,
                        (self.q_des, self.v_des), self.clamps, self.ics)
        self.q_des, self.v_des = out.q_des, out.v_des
        return out


# --- CONFIG FILES ---
def _section(doc, key, kind=dict):
    value = doc.get(key, kind())
    if not isinstance(value, kind):
        raise ParseError(f"'{key}' must be a {'mapping' if kind is dict else 'list'}", field=key)
    return value


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ParseError("Entry must be a mapping", field=where)
    try:
        return cls(**raw)
    except TypeError as e:
        raise ParseError(f"Invalid entry: {e}", field=where) from e


def load_controller_config(path):
    """Parse a controller YAML file into (tasks, contacts, WbcConfig)."""
    path = resolve_data_file(path, "controller")
    if not path.exists():
        raise ParseError(f"Controller file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ParseError(f"Malformed controller file: {e}", line=mark.line + 1 if mark else None) from e
    if not isinstance(doc, dict):
        raise ParseError("Controller document must be a mapping")

    regularization = _section(doc, "regularization")
    solver = _section(doc, "solver")
    clamps = _section(doc, "clamps")
    leak = _section(doc, "leak")
    try:
        config = WbcConfig(
            lambda_q=float(regularization.get("joint_acceleration", 1e-4)),
            lambda_f=float(regularization.get("reaction_force", 1e-6)),
            tolerance=float(solver.get("tolerance", 1e-8)),
            max_iterations=int(solver.get("max_iterations", 200)),
            dt=float(doc.get("dt", 0.002)),
            velocity_clamp=None if clamps.get("velocity") is None else float(clamps["velocity"]),
            position_margin=float(clamps.get("position_margin", 0.0)),
            velocity_time_constant=leak.get("velocity_time_constant", 0.1),
            position_time_constant=leak.get("position_time_constant", 0.5),
        )
    except (TypeError, ValueError) as e:
        raise ParseError(f"Invalid controller setting: {e}") from e

    tasks = [_build(TaskSpec, raw, f"tasks[{i}]") for i, raw in enumerate(_section(doc, "tasks", list))]
    contacts = [_build(ContactSpec, raw, f"contacts[{i}]") for i, raw in enumerate(_section(doc, "contacts", list))]
    logger.info(f"Controller config {path.name}: {len(tasks)} tasks, {len(contacts)} contacts")
    return tasks, contacts, config
