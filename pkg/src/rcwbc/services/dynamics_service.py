"""
src/rcwbc/services/dynamics_service.py
Floating-base rigid-body dynamics over the spatial-algebra tree.
Features:
- Forward kinematics of every link and contact frame.
- World-aligned frame Jacobians [angular; linear] and J_dot * v.
- Mass matrix by composite rigid bodies, bias and inverse dynamics by recursive Newton-Euler.
- Centre of mass, CoM Jacobian and centroidal rotational inertia.
- Manifold integration of the configuration (base through the SE(3) exponential).
"""
from dataclasses import dataclass, field

import numpy as np
from loguru import logger

from rcwbc.errors import DimensionMismatch, NonUnitQuaternion, UnknownFrame
from rcwbc.types import RobotModel, RobotState
from rcwbc.utils.spatial import (
    crf, crm, matrix_to_quat, plux, point_inertia, quat_to_matrix, rotation_about_axis, se3_exp_body, skew,
)

DEFAULT_GRAVITY = (0.0, 0.0, -9.81)
QUATERNION_TOLERANCE = 1e-6


@dataclass(frozen=True)
class CentroidalInertia:
    I_G: np.ndarray
    com: np.ndarray
    total_mass: float


@dataclass
class DynamicsCache:
    """Everything a control tick needs at one state. Single-owner scratch."""
    state: RobotState
    rotations: list
    positions: list
    velocities: list
    A: np.ndarray
    b: np.ndarray
    g: np.ndarray
    com: np.ndarray
    com_velocity: np.ndarray
    jacobians: dict = field(default_factory=dict, repr=False)
    jdot_v: dict = field(default_factory=dict, repr=False)

    @property
    def bg(self):
        return self.b + self.g


class RigidBodyDynamics:
    """
    Dynamics of one RobotModel. Holds no state between calls except the model tables,
    so one instance may be shared across threads working on different states.
    """

    def __init__(self, model: RobotModel, gravity=DEFAULT_GRAVITY):
        self.model = model
        self.index = model.index
        self.bodies = self.index.bodies
        self.gravity = np.asarray(gravity, dtype=float)
        self.inertias = [model.links[body.link].spatial_inertia for body in self.bodies]
        self.masses = np.array([model.links[body.link].mass for body in self.bodies])
        self.coms = [model.links[body.link].com for body in self.bodies]
        self.total_mass = float(self.masses.sum())
        self.origins = []
        for body in self.bodies:
            joint = model.joint(body.joint) if body.parent >= 0 else None
            self.origins.append(None if joint is None else
                                (joint.origin_rotation, np.asarray(joint.origin_xyz, dtype=float)))

        # ancestor chain of every body, root first
        self.chains = []
        for i, body in enumerate(self.bodies):
            chain = [i]
            while self.bodies[chain[-1]].parent >= 0:
                chain.append(self.bodies[chain[-1]].parent)
            self.chains.append(tuple(reversed(chain)))

    # --- INPUT CHECKS ---
    def _check_state(self, state: RobotState):
        if state.q.shape != (self.model.nq,) or state.v.shape != (self.model.nv,):
            raise DimensionMismatch(f"State has shapes q{state.q.shape}, v{state.v.shape}; "
                                    f"model expects q({self.model.nq},), v({self.model.nv},)")
        norm = float(np.linalg.norm(state.base_quaternion))
        if abs(norm - 1.0) > QUATERNION_TOLERANCE:
            raise NonUnitQuaternion(f"Base quaternion norm is {norm:.9f}", norm=norm)

    def _frame(self, frame: str):
        try:
            return self.index.frames[frame]
        except KeyError:
            raise UnknownFrame(f"Unknown frame '{frame}'", frame=frame) from None

    def _joint_angle(self, state, body):
        return state.q[body.dofs.start + 1]

    # --- KINEMATICS ---
    def _placements(self, state):
        """World rotation (body -> world) and origin of every body, plus parent -> child Plucker transforms."""
        rotations, positions, x_up = [], [], []
        for i, body in enumerate(self.bodies):
            if body.parent < 0:
                R = quat_to_matrix(state.base_quaternion)
                p = state.base_position.copy()
                X = plux(R.T, p)
            else:
                origin_R, origin_p = self.origins[i]
                R_joint = rotation_about_axis(body.axis, self._joint_angle(state, body))
                R_par, p_par = rotations[body.parent], positions[body.parent]
                R = R_par @ origin_R @ R_joint
                p = p_par + R_par @ origin_p
                X = plux(R_joint.T, np.zeros(3)) @ body.tree_transform
            rotations.append(R)
            positions.append(p)
            x_up.append(X)
        return rotations, positions, x_up

    def _motion_subspace(self, body):
        if body.parent < 0:
            return np.eye(6)
        return np.concatenate([body.axis, np.zeros(3)]).reshape(6, 1)

    def _velocities(self, state, x_up):
        vel = []
        for i, body in enumerate(self.bodies):
            vJ = self._motion_subspace(body) @ state.v[body.dofs]
            vel.append(vJ if body.parent < 0 else x_up[i] @ vel[body.parent] + vJ)
        return vel

    def forward_kinematics(self, state: RobotState) -> dict:
        """Name -> (R, p) world pose of every link and contact frame."""
        self._check_state(state)
        rotations, positions, _ = self._placements(state)
        poses = {}
        for name, (body, R_off, offset) in self.index.frames.items():
            poses[name] = (rotations[body] @ R_off, positions[body] + rotations[body] @ offset)
        return poses

    def frame_pose(self, state: RobotState, frame: str):
        body, R_off, offset = self._frame(frame)
        self._check_state(state)
        rotations, positions, _ = self._placements(state)
        return rotations[body] @ R_off, positions[body] + rotations[body] @ offset

    def _point_jacobian(self, rotations, positions, body, point):
        J = np.zeros((6, self.model.nv))
        for j in self.chains[body]:
            b = self.bodies[j]
            if b.parent < 0:
                R = rotations[j]
                J[0:3, 0:3] = R
                J[3:6, 0:3] = -skew(point - positions[j]) @ R
                J[3:6, 3:6] = R
            else:
                z = rotations[j] @ b.axis
                col = b.dofs.start
                J[0:3, col] = z
                J[3:6, col] = np.cross(z, point - positions[j])
        return J

    def frame_jacobian(self, state: RobotState, frame: str) -> np.ndarray:
        """6 x nv map from v to the frame's world-aligned [angular; linear] velocity."""
        body, _, offset = self._frame(frame)
        self._check_state(state)
        rotations, positions, _ = self._placements(state)
        point = positions[body] + rotations[body] @ offset
        return self._point_jacobian(rotations, positions, body, point)

    def frame_kinematics(self, state: RobotState, frames) -> dict:
        """Name -> (R, p, J) for several frames off a single forward-kinematics pass."""
        self._check_state(state)
        rotations, positions, _ = self._placements(state)
        out = {}
        for frame in frames:
            body, R_off, offset = self._frame(frame)
            R = rotations[body]
            point = positions[body] + R @ offset
            out[frame] = (R @ R_off, point, self._point_jacobian(rotations, positions, body, point))
        return out

    def _bias_accelerations(self, state, x_up, velocities):
        """Spatial accelerations with zero q_ddot and no gravity, in body coordinates."""
        acc = []
        for i, body in enumerate(self.bodies):
            if body.parent < 0:
                acc.append(np.zeros(6))
                continue
            vJ = self._motion_subspace(body) @ state.v[body.dofs]
            acc.append(x_up[i] @ acc[body.parent] + crm(velocities[i]) @ vJ)
        return acc

    @staticmethod
    def _classical_point_acceleration(a_sp, v_sp, offset):
        omega, omega_dot = v_sp[:3], a_sp[:3]
        v_point = v_sp[3:] + np.cross(omega, offset)
        a_point = a_sp[3:] + np.cross(omega_dot, offset) + np.cross(omega, v_point)
        return omega_dot, a_point

    def jacobian_dot_times_v(self, state: RobotState, frame: str) -> np.ndarray:
        """Frame acceleration at q_ddot = 0, world-aligned [angular; linear]."""
        body, _, offset = self._frame(frame)
        self._check_state(state)
        rotations, _, x_up = self._placements(state)
        velocities = self._velocities(state, x_up)
        acc = self._bias_accelerations(state, x_up, velocities)
        w_dot, a_lin = self._classical_point_acceleration(acc[body], velocities[body], offset)
        R = rotations[body]
        return np.concatenate([R @ w_dot, R @ a_lin])

    # --- DYNAMICS ---
    def _composite_inertia_matrix(self, x_up):
        nv = self.model.nv
        A = np.zeros((nv, nv))
        Ic = [I.copy() for I in self.inertias]
        for i in range(len(self.bodies) - 1, -1, -1):
            body = self.bodies[i]
            if body.parent >= 0:
                Ic[body.parent] += x_up[i].T @ Ic[i] @ x_up[i]
            S = self._motion_subspace(body)
            F = Ic[i] @ S
            A[body.dofs, body.dofs] = S.T @ F
            j = i
            while self.bodies[j].parent >= 0:
                F = x_up[j].T @ F
                j = self.bodies[j].parent
                parent = self.bodies[j]
                block = F.T @ self._motion_subspace(parent)
                A[body.dofs, parent.dofs] = block
                A[parent.dofs, body.dofs] = block.T
        return A

    def _rnea(self, state, qdd, x_up, gravity, external=None):
        """Generalized forces for (q, v, q_ddot) with the given gravity; external: body index -> body-frame wrench."""
        nv = self.model.nv
        a_grav = np.concatenate([np.zeros(3), -np.asarray(gravity, dtype=float)])
        vel, acc, forces = [], [], []
        for i, body in enumerate(self.bodies):
            S = self._motion_subspace(body)
            vJ = S @ state.v[body.dofs]
            aJ = S @ qdd[body.dofs]
            if body.parent < 0:
                v_i = vJ
                a_i = x_up[i] @ a_grav + aJ
            else:
                v_i = x_up[i] @ vel[body.parent] + vJ
                a_i = x_up[i] @ acc[body.parent] + aJ + crm(v_i) @ vJ
            f_i = self.inertias[i] @ a_i + crf(v_i) @ self.inertias[i] @ v_i
            if external and i in external:
                f_i = f_i - external[i]
            vel.append(v_i)
            acc.append(a_i)
            forces.append(f_i)

        tau = np.zeros(nv)
        for i in range(len(self.bodies) - 1, -1, -1):
            body = self.bodies[i]
            tau[body.dofs] = self._motion_subspace(body).T @ forces[i]
            if body.parent >= 0:
                forces[body.parent] = forces[body.parent] + x_up[i].T @ forces[i]
        return tau

    def mass_matrix(self, state: RobotState) -> np.ndarray:
        self._check_state(state)
        _, _, x_up = self._placements(state)
        return self._composite_inertia_matrix(x_up)

    def nonlinear_effects(self, state: RobotState, gravity=None) -> np.ndarray:
        """b + g: inverse dynamics at q_ddot = 0."""
        self._check_state(state)
        _, _, x_up = self._placements(state)
        gravity = self.gravity if gravity is None else gravity
        return self._rnea(state, np.zeros(self.model.nv), x_up, gravity)

    def gravity_vector(self, state: RobotState, gravity=None) -> np.ndarray:
        static = RobotState(state.q, np.zeros(self.model.nv), state.time)
        return self.nonlinear_effects(static, gravity)

    def coriolis_vector(self, state: RobotState) -> np.ndarray:
        return self.nonlinear_effects(state, np.zeros(3))

    def _external_body_wrenches(self, rotations, positions, external):
        """Frame name -> world [torque; force] at the frame origin, folded into body-frame wrenches."""
        out = {}
        for frame, wrench in (external or {}).items():
            body, _, offset = self._frame(frame)
            R, p = rotations[body], positions[body]
            wrench = np.asarray(wrench, dtype=float)
            torque_w, force_w = wrench[:3], wrench[3:]
            point = p + R @ offset
            # shift the torque to the body origin, then rotate into body coordinates
            torque_o = torque_w + np.cross(point - p, force_w)
            out[body] = out.get(body, np.zeros(6)) + np.concatenate([R.T @ torque_o, R.T @ force_w])
        return out

    def inverse_dynamics(self, state: RobotState, qdd, gravity=None, external=None) -> np.ndarray:
        """Full RNEA: A q_ddot + b + g - sum J^T F_ext for world wrenches applied at named frames."""
        self._check_state(state)
        qdd = np.asarray(qdd, dtype=float)
        if qdd.shape != (self.model.nv,):
            raise DimensionMismatch(f"q_ddot has shape {qdd.shape}, expected ({self.model.nv},)")
        rotations, positions, x_up = self._placements(state)
        gravity = self.gravity if gravity is None else gravity
        ext = self._external_body_wrenches(rotations, positions, external)
        return self._rnea(state, qdd, x_up, gravity, ext)

    # --- CENTRE OF MASS ---
    def _com(self, rotations, positions):
        points = [positions[i] + rotations[i] @ self.coms[i] for i in range(len(self.bodies))]
        com = sum(m * c for m, c in zip(self.masses, points)) / self.total_mass
        return com, points

    def com_jacobian(self, state: RobotState) -> np.ndarray:
        self._check_state(state)
        rotations, positions, _ = self._placements(state)
        _, points = self._com(rotations, positions)
        J = np.zeros((3, self.model.nv))
        for i, point in enumerate(points):
            J += self.masses[i] * self._point_jacobian(rotations, positions, i, point)[3:6]
        return J / self.total_mass

    def com_state(self, state: RobotState):
        self._check_state(state)
        rotations, positions, _ = self._placements(state)
        com, _ = self._com(rotations, positions)
        return com, self.com_jacobian(state) @ state.v

    def centroidal_inertia(self, state: RobotState) -> CentroidalInertia:
        self._check_state(state)
        rotations, positions, _ = self._placements(state)
        com, points = self._com(rotations, positions)
        I_G = np.zeros((3, 3))
        for i, R in enumerate(rotations):
            link = self.model.links[self.bodies[i].link]
            I_G += R @ link.inertia @ R.T + point_inertia(link.mass, points[i] - com)
        return CentroidalInertia(0.5 * (I_G + I_G.T), com, self.total_mass)

    # --- PER-TICK CACHE ---
    def compute(self, state: RobotState) -> DynamicsCache:
        self._check_state(state)
        rotations, positions, x_up = self._placements(state)
        velocities = self._velocities(state, x_up)
        A = self._composite_inertia_matrix(x_up)
        zero = np.zeros(self.model.nv)
        static = RobotState(state.q, zero)
        b = self._rnea(state, zero, x_up, np.zeros(3))
        g = self._rnea(static, zero, x_up, self.gravity)
        com, _ = self._com(rotations, positions)
        cache = DynamicsCache(state.copy(), rotations, positions, velocities, A, b, g, com, np.zeros(3))
        cache.com_velocity = self.cached_com_jacobian(cache) @ state.v
        return cache

    def cached_frame_pose(self, cache: DynamicsCache, frame: str):
        body, R_off, offset = self._frame(frame)
        R = cache.rotations[body]
        return R @ R_off, cache.positions[body] + R @ offset

    def cached_jacobian(self, cache: DynamicsCache, frame: str) -> np.ndarray:
        if frame not in cache.jacobians:
            body, _, offset = self._frame(frame)
            point = cache.positions[body] + cache.rotations[body] @ offset
            cache.jacobians[frame] = self._point_jacobian(cache.rotations, cache.positions, body, point)
        return cache.jacobians[frame]

    def cached_jacobian_dot_times_v(self, cache: DynamicsCache, frame: str) -> np.ndarray:
        if frame not in cache.jdot_v:
            body, _, offset = self._frame(frame)
            x_up = self._placements(cache.state)[2]
            acc = self._bias_accelerations(cache.state, x_up, cache.velocities)
            w_dot, a_lin = self._classical_point_acceleration(acc[body], cache.velocities[body], offset)
            R = cache.rotations[body]
            cache.jdot_v[frame] = np.concatenate([R @ w_dot, R @ a_lin])
        return cache.jdot_v[frame]

    def cached_com_jacobian(self, cache: DynamicsCache) -> np.ndarray:
        if "__com__" not in cache.jacobians:
            _, points = self._com(cache.rotations, cache.positions)
            J = np.zeros((3, self.model.nv))
            for i, point in enumerate(points):
                J += self.masses[i] * self._point_jacobian(cache.rotations, cache.positions, i, point)[3:6]
            cache.jacobians["__com__"] = J / self.total_mass
        return cache.jacobians["__com__"]

    def cached_com_bias(self, cache: DynamicsCache) -> np.ndarray:
        """J_com_dot * v, the CoM acceleration at q_ddot = 0."""
        if "__com__" not in cache.jdot_v:
            x_up = self._placements(cache.state)[2]
            acc = self._bias_accelerations(cache.state, x_up, cache.velocities)
            total = np.zeros(3)
            for i in range(len(self.bodies)):
                _, a_lin = self._classical_point_acceleration(acc[i], cache.velocities[i], self.coms[i])
                total += self.masses[i] * (cache.rotations[i] @ a_lin)
            cache.jdot_v["__com__"] = total / self.total_mass
        return cache.jdot_v["__com__"]

    # --- INTEGRATION ---
    def integrate_configuration(self, q, v, dt):
        """q (+) v dt on the configuration manifold; base twist taken in the body frame."""
        q = np.asarray(q, dtype=float)
        v = np.asarray(v, dtype=float)
        out = q.copy()
        R = quat_to_matrix(q[3:7])
        dR, dp = se3_exp_body(v[0:3], v[3:6], dt)
        out[0:3] = q[0:3] + R @ dp
        out[3:7] = matrix_to_quat(R @ dR)
        out[7:] = q[7:] + v[6:] * dt
        return out


def normalize_state(state: RobotState) -> RobotState:
    """Re-project the base quaternion onto the unit sphere (w >= 0)."""
    quat = state.q[3:7]
    norm = float(np.linalg.norm(quat))
    if norm < 1e-12:
        logger.warning("Degenerate base quaternion, resetting to identity")
        state.q[3:7] = (1.0, 0.0, 0.0, 0.0)
        return state
    quat = quat / norm
    state.q[3:7] = quat if quat[0] >= 0.0 else -quat
    return state
