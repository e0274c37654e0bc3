"""
src/rcwbc/services/ik_service.py
Whole-body inverse kinematics for floating-base models.
Features:
- Damped least squares on stacked frame pose targets (full pose or selected position axes).
- Steps confined to the rolling-pair constraint subspace, so returned states stay consistent.
- Joint limits enforced on the actuated side of every pair.
"""
from dataclasses import dataclass

import numpy as np
from loguru import logger
from scipy.linalg import solve

from rcwbc.errors import IkDidNotConverge
from rcwbc.services.dynamics_service import RigidBodyDynamics
from rcwbc.types import RobotModel, RobotState
from rcwbc.utils.spatial import so3_log

AXES = "xyz"
MAX_POSITION_STEP = 0.05
MAX_ROTATION_STEP = 0.2


@dataclass
class FrameTarget:
    """Desired world pose of a frame; None leaves that part free. `axes` restricts the position rows."""
    frame: str
    position: np.ndarray | None = None
    orientation: np.ndarray | None = None
    axes: str = AXES

    def __post_init__(self):
        if self.position is not None:
            self.position = np.asarray(self.position, dtype=float).reshape(len(self.axes))
        if self.orientation is not None:
            self.orientation = np.asarray(self.orientation, dtype=float).reshape(3, 3)


@dataclass
class IkSolution:
    state: RobotState
    iterations: int
    residual: float


def constrained_velocity_basis(model: RobotModel) -> np.ndarray:
    """
    nv x (nv - k) basis B of {v : J_int v = 0}: identity on every free coordinate,
    the passive joint of each pair follows its partner through the radius ratio.
    """
    index = model.index.joint_velocity_index
    passive = {index[p.passive_joint]: p for p in model.rolling_pairs}
    free = [i for i in range(model.nv) if i not in passive]
    B = np.zeros((model.nv, len(free)))
    column = {i: c for c, i in enumerate(free)}
    for i in free:
        B[i, column[i]] = 1.0
    for i, pair in passive.items():
        partner = column[index[pair.actuated_joint]]
        B[i, partner] = pair.radius_ratio if pair.passive_joint == pair.proximal_joint else 1.0 / pair.radius_ratio
    return B


def _enforce_pairs(model: RobotModel, q):
    index = model.index.joint_position_index
    for pair in model.rolling_pairs:
        if pair.passive_joint == pair.proximal_joint:
            q[index[pair.proximal_joint]] = pair.radius_ratio * q[index[pair.distal_joint]]
        else:
            q[index[pair.distal_joint]] = q[index[pair.proximal_joint]] / pair.radius_ratio
    return q


def _clip_to_limits(model: RobotModel, q):
    passive = {p.passive_joint for p in model.rolling_pairs}
    for name in model.index.revolute_joints:
        if name in passive:
            continue
        i = model.index.joint_position_index[name]
        lo, hi = model.joint(name).position_limits
        q[i] = min(max(q[i], lo), hi)
    return _enforce_pairs(model, q)


def _errors(dynamics, state, targets):
    """Stacked [rotation error; position error] and matching Jacobian rows."""
    errors, rows = [], []
    kinematics = dynamics.frame_kinematics(state, {t.frame for t in targets})
    for target in targets:
        R, p, J = kinematics[target.frame]
        if target.orientation is not None:
            errors.append(so3_log(target.orientation @ R.T))
            rows.append(J[:3])
        if target.position is not None:
            sel = [AXES.index(a) for a in target.axes]
            errors.append(target.position - p[sel])
            rows.append(J[3:][sel])
    return np.concatenate(errors), np.vstack(rows)


def _clamp_error(error, targets):
    """Limit the Cartesian step per iteration so far targets are approached gradually."""
    out = error.copy()
    row = 0
    for target in targets:
        for size, limit, present in ((3, MAX_ROTATION_STEP, target.orientation is not None),
                                     (len(target.axes), MAX_POSITION_STEP, target.position is not None)):
            if not present:
                continue
            norm = np.linalg.norm(out[row:row + size])
            if norm > limit:
                out[row:row + size] *= limit / norm
            row += size
    return out


def solve_ik(model: RobotModel, targets, seed: RobotState, tol: float = 1e-6, max_iterations: int = 200,
             dynamics: RigidBodyDynamics | None = None, stall_iterations: int = 25) -> IkSolution:
    """
    Damped least squares: dz = (J_B^T J_B + lambda I)^-1 J_B^T e with J_B = J B, q <- q (+) B dz.
    lambda = 1e-3 |e| + 1e-9. Converged when max |e| < tol.
    """
    targets = list(targets)
    dynamics = dynamics or RigidBodyDynamics(model)
    B = constrained_velocity_basis(model)
    state = RobotState(_enforce_pairs(model, seed.q.copy()), np.zeros(model.nv), seed.time)

    error, J = _errors(dynamics, state, targets)
    residual = float(np.abs(error).max(initial=0.0))
    best = (residual, state.copy())
    since_best = 0

    for iteration in range(max_iterations + 1):
        if residual < tol:
            logger.trace(f"IK converged in {iteration} iterations, residual {residual:.2e}")
            return IkSolution(state, iteration, residual)
        if iteration == max_iterations or since_best >= stall_iterations:
            break

        J_B = J @ B
        damping = 1e-3 * float(np.linalg.norm(error)) + 1e-9
        step = solve(J_B.T @ J_B + damping * np.eye(J_B.shape[1]), J_B.T @ _clamp_error(error, targets),
                     assume_a="pos")
        q = dynamics.integrate_configuration(state.q, B @ step, 1.0)
        state = RobotState(_clip_to_limits(model, q), state.v, state.time)

        error, J = _errors(dynamics, state, targets)
        residual = float(np.abs(error).max(initial=0.0))
        if residual < best[0]:
            best = (residual, state.copy())
            since_best = 0
        else:
            since_best += 1

    logger.debug(f"IK failed: best residual {best[0]:.3e} after {iteration} iterations")
    raise IkDidNotConverge(f"Inverse kinematics did not converge (best residual {best[0]:.3e})",
                           residual=best[0], iterations=iteration)
