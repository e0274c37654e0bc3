"""
src/rcwbc/services/constraint_service.py
Internal constraints of rolling-contact joint pairs.
Features:
- Constant internal Jacobian J_int (one row per pair, base columns zero).
- Dynamically consistent pseudo-inverse and null-space projector N_int.
- Projected dynamics, internal force recovery and the actuation validity check.
"""
from dataclasses import dataclass

import numpy as np
from loguru import logger
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lstsq, pinv

from rcwbc.errors import DimensionMismatch, NonPositiveDefinite
from rcwbc.services.dynamics_service import RigidBodyDynamics
from rcwbc.types import RobotModel, RobotState

PINV_RTOL = 1e-8
VALIDITY_TOLERANCE = 1e-6


@dataclass(frozen=True)
class InternalConstraintSet:
    J_int: np.ndarray
    proximal_indices: tuple
    distal_indices: tuple
    ratios: tuple

    @property
    def k(self):
        return self.J_int.shape[0]


@dataclass
class ProjectedDynamics:
    """Per-state quantities of the constrained dynamics. Single-owner scratch."""
    N_int: np.ndarray
    Jbar_int: np.ndarray
    A: np.ndarray
    A_inv: np.ndarray
    bias: np.ndarray | None = None
    actuation_map: np.ndarray | None = None
    contact_map: np.ndarray | None = None
    actuation_inverse: np.ndarray | None = None


@dataclass(frozen=True)
class ActuationCheck:
    valid: bool
    defect: float


def build_internal_jacobian(model: RobotModel) -> InternalConstraintSet:
    """Row p: +1 at the proximal velocity index, -r_distal/r_proximal at the distal one."""
    nv = model.nv
    J = np.zeros((len(model.rolling_pairs), nv))
    proximal, distal, ratios = [], [], []
    for row, pair in enumerate(model.rolling_pairs):
        i_p = model.index.joint_velocity_index[pair.proximal_joint]
        i_d = model.index.joint_velocity_index[pair.distal_joint]
        J[row, i_p] = 1.0
        J[row, i_d] = -pair.radius_ratio
        proximal.append(i_p)
        distal.append(i_d)
        ratios.append(pair.radius_ratio)

    assert np.count_nonzero(J) == 2 * J.shape[0]
    assert not J[:, :6].any()
    J.setflags(write=False)
    return InternalConstraintSet(J, tuple(proximal), tuple(distal), tuple(ratios))


def internal_jacobian_dot(ics: InternalConstraintSet) -> np.ndarray:
    """J_int does not depend on q, so its time derivative is identically zero."""
    return np.zeros_like(ics.J_int)


def actuation_selection(model: RobotModel) -> np.ndarray:
    return model.selection_matrix()


def constraint_residual(model: RobotModel, state: RobotState) -> np.ndarray:
    """q_proximal - ratio * q_distal per pair, in radians."""
    out = np.zeros(len(model.rolling_pairs))
    for p, pair in enumerate(model.rolling_pairs):
        q_p = state.q[model.index.joint_position_index[pair.proximal_joint]]
        q_d = state.q[model.index.joint_position_index[pair.distal_joint]]
        out[p] = q_p - pair.radius_ratio * q_d
    return out


def factor_mass_matrix(A: np.ndarray):
    try:
        return cho_factor(A, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as e:
        raise NonPositiveDefinite(f"Mass matrix factorization failed: {e}") from e


def dyn_consistent_pseudoinverse(J: np.ndarray, A: np.ndarray, factor=None) -> np.ndarray:
    """A^-1 J^T (J A^-1 J^T)^+ with a relative singular value cutoff of 1e-8."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    nv = A.shape[0]
    if J.shape[1] != nv:
        raise DimensionMismatch(f"J has {J.shape[1]} columns, A is {nv}x{nv}")
    if J.shape[0] == 0:
        return np.zeros((nv, 0))
    factor = factor_mass_matrix(A) if factor is None else factor
    A_inv_JT = cho_solve(factor, J.T)
    Lambda_inv = J @ A_inv_JT
    return A_inv_JT @ pinv(0.5 * (Lambda_inv + Lambda_inv.T), atol=0.0, rtol=PINV_RTOL)


def nullspace_projector(ics: InternalConstraintSet, A: np.ndarray, bg=None, S_a=None, J_c=None) -> ProjectedDynamics:
    """
    N_int = I - Jbar_int J_int and the projected terms of the constrained equations of motion.
    The J_int^T (J_int A J_int^T)^+ J_int_dot v term is absent because J_int is constant.
    """
    nv = A.shape[0]
    factor = factor_mass_matrix(A)
    A_inv = cho_solve(factor, np.eye(nv))
    Jbar = dyn_consistent_pseudoinverse(ics.J_int, A, factor)
    N = np.eye(nv) - Jbar @ ics.J_int

    projected = ProjectedDynamics(N_int=N, Jbar_int=Jbar, A=A, A_inv=A_inv)
    if bg is not None:
        projected.bias = N.T @ np.asarray(bg, dtype=float)
    if S_a is not None:
        projected.actuation_map = (S_a @ N).T
        projected.actuation_inverse = truncated_actuation_inverse(projected, S_a)
    if J_c is not None:
        projected.contact_map = (J_c @ N).T
    return projected


def truncated_actuation_inverse(projected: ProjectedDynamics, S_a: np.ndarray) -> np.ndarray:
    """
    Dynamically consistent inverse of S_a N_int with the floating-base columns removed,
    weighted by the joint block of A^-1. Returns S_bar (n_joints x n_actuated).
    """
    P = S_a[:, 6:] @ projected.N_int[6:, 6:]
    M = projected.A_inv[6:, 6:]
    PMPt = P @ M @ P.T
    return M @ P.T @ pinv(0.5 * (PMPt + PMPt.T), atol=0.0, rtol=PINV_RTOL)


def solve_internal_forces(model: RobotModel, state: RobotState, tau, F_r, qdd, contact_frames=(),
                          dynamics=None, cache=None) -> np.ndarray:
    """
    F_int such that A q_ddot + b + g = S_a^T tau + J_c^T F_r + J_int^T F_int.
    Least squares when the torques are not exactly consistent.
    """
    ics = build_internal_jacobian(model)
    if ics.k == 0:
        return np.zeros(0)

    tau = np.asarray(tau, dtype=float)
    F_r = np.asarray(F_r, dtype=float)
    qdd = np.asarray(qdd, dtype=float)
    if tau.shape != (model.na,) or qdd.shape != (model.nv,) or F_r.shape != (6 * len(contact_frames),):
        raise DimensionMismatch(f"Got tau{tau.shape}, F_r{F_r.shape}, q_ddot{qdd.shape} for na={model.na}, "
                                f"nv={model.nv}, {len(contact_frames)} contacts")

    dynamics = dynamics or RigidBodyDynamics(model)
    cache = cache or dynamics.compute(state)
    residual = cache.A @ qdd + cache.bg - model.selection_matrix().T @ tau
    for i, frame in enumerate(contact_frames):
        residual -= dynamics.cached_jacobian(cache, frame).T @ F_r[6 * i:6 * i + 6]

    factor = factor_mass_matrix(cache.A)
    J = ics.J_int
    Lambda_inv = J @ cho_solve(factor, J.T)
    F_int = pinv(Lambda_inv, atol=0.0, rtol=PINV_RTOL) @ J @ cho_solve(factor, residual)

    leftover = residual - J.T @ F_int
    if np.abs(leftover).max() > 1e-6 * max(1.0, np.abs(residual).max()):
        # torques did not come from the projected dynamics; fall back to the best fit
        F_int = lstsq(J.T, residual)[0]
        logger.debug(f"Internal forces by least squares, leftover {np.abs(residual - J.T @ F_int).max():.3e}")
    return F_int


def check_actuation_validity(model: RobotModel, state: RobotState, J_int=None, dynamics=None) -> ActuationCheck:
    """
    S_bar P = N_trc, with P = S_a N_int and N_trc = N_int, both without floating-base columns.
    J_int may be overridden to check constraint sets that are not built from the model.
    """

    dynamics = dynamics or RigidBodyDynamics(model)
    A = dynamics.mass_matrix(state)
    if J_int is None:
        ics = build_internal_jacobian(model)
    else:
        J_int = np.atleast_2d(np.asarray(J_int, dtype=float))
        ics = InternalConstraintSet(J_int, (), (), ())
    S_a = model.selection_matrix()

    projected = nullspace_projector(ics, A)
    S_bar = truncated_actuation_inverse(projected, S_a)
    P = S_a[:, 6:] @ projected.N_int[6:, 6:]
    defect = float(np.linalg.norm(S_bar @ P - projected.N_int[6:, 6:]))
    return ActuationCheck(defect < VALIDITY_TOLERANCE, defect)
