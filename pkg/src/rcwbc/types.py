"""
src/rcwbc/types.py
Robot model and state records.
RobotModel is immutable once built; the kinematic index is derived on first use and assumes
the model passed validation (see services/model_service.py).
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from rcwbc.utils.spatial import plux, rpy_to_matrix, spatial_inertia

FLOATING_BASE = "floating_base"
REVOLUTE = "revolute"
HIP_SHEAVE = "hip_sheave"
KNEE_ROLLING = "knee_rolling"


def _frozen_array(values, shape=None):
    arr = np.array(values, dtype=float)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LinkSpec:
    name: str
    mass: float
    com: np.ndarray
    inertia: np.ndarray
    parent_joint: str

    def __post_init__(self):
        object.__setattr__(self, "com", _frozen_array(self.com, (3,)))
        object.__setattr__(self, "inertia", _frozen_array(self.inertia, (3, 3)))

    @cached_property
    def spatial_inertia(self):
        return spatial_inertia(self.mass, self.com, self.inertia)


@dataclass(frozen=True)
class JointSpec:
    name: str
    kind: str
    parent: str | None = None
    axis: tuple = (0.0, 0.0, 1.0)
    origin_xyz: tuple = (0.0, 0.0, 0.0)
    origin_rpy: tuple = (0.0, 0.0, 0.0)
    position_limits: tuple = (-np.pi, np.pi)
    velocity_limit: float = 10.0
    torque_limits: tuple = (-100.0, 100.0)
    acceleration_limits: tuple = (-1000.0, 1000.0)

    @cached_property
    def origin_rotation(self):
        return rpy_to_matrix(self.origin_rpy)

    @cached_property
    def tree_transform(self):
        """Parent link coordinates -> joint frame coordinates at zero angle."""
        return plux(self.origin_rotation.T, np.asarray(self.origin_xyz, dtype=float))


@dataclass(frozen=True)
class RollingContactPair:
    proximal_joint: str
    distal_joint: str
    r_proximal: float
    r_distal: float
    actuated_side: str = "distal"

    @property
    def radius_ratio(self):
        """r_distal / r_proximal; q_proximal = ratio * q_distal on the constraint manifold."""
        return self.r_distal / self.r_proximal

    @property
    def actuated_joint(self):
        return self.distal_joint if self.actuated_side == "distal" else self.proximal_joint

    @property
    def passive_joint(self):
        return self.proximal_joint if self.actuated_side == "distal" else self.distal_joint


@dataclass(frozen=True)
class TransmissionSpec:
    kind: str
    joint: str
    r_fix: float | None = None
    r_rot: float | None = None
    gear_stages: tuple = ()

    @property
    def ratio(self):
        """Joint-side rotation per unit of motor-side rotation is 1/ratio; torque is amplified by ratio."""
        if self.kind == HIP_SHEAVE:
            return self.r_fix / self.r_rot
        return float(np.prod(self.gear_stages))


@dataclass(frozen=True)
class ContactFrame:
    name: str
    link: str
    xyz: tuple = (0.0, 0.0, 0.0)
    rpy: tuple = (0.0, 0.0, 0.0)

    @cached_property
    def rotation(self):
        return rpy_to_matrix(self.rpy)


@dataclass(frozen=True)
class Body:
    """One node of the kinematic tree in topological order."""
    link: int
    joint: str
    parent: int
    dofs: slice
    tree_transform: np.ndarray
    axis: np.ndarray | None


@dataclass(frozen=True)
class ModelIndex:
    bodies: tuple
    link_body: dict
    joint_velocity_index: dict
    joint_position_index: dict
    revolute_joints: tuple
    actuated_joints: tuple
    frames: dict


@dataclass(frozen=True)
class RobotModel:
    name: str
    links: tuple
    joints: tuple
    rolling_pairs: tuple = ()
    transmissions: tuple = ()
    contact_frames: tuple = ()
    height: float = 1.0

    @property
    def nq(self):
        return 7 + sum(1 for j in self.joints if j.kind == REVOLUTE)

    @property
    def nv(self):
        return 6 + sum(1 for j in self.joints if j.kind == REVOLUTE)

    @property
    def na(self):
        return len(self.index.actuated_joints)

    @cached_property
    def total_mass(self):
        return float(sum(link.mass for link in self.links))

    def link(self, name):
        for link in self.links:
            if link.name == name:
                return link
        raise KeyError(name)

    def joint(self, name):
        for joint in self.joints:
            if joint.name == name:
                return joint
        raise KeyError(name)

    def transmission_for(self, joint_name):
        for spec in self.transmissions:
            if spec.joint == joint_name:
                return spec
        return None

    def pair_for(self, joint_name):
        for pair in self.rolling_pairs:
            if joint_name in (pair.proximal_joint, pair.distal_joint):
                return pair
        return None

    @cached_property
    def index(self) -> ModelIndex:
        link_pos = {link.name: i for i, link in enumerate(self.links)}
        child_of_joint = {link.parent_joint: i for i, link in enumerate(self.links)}
        revolute = tuple(j.name for j in self.joints if j.kind == REVOLUTE)
        v_index = {name: 6 + i for i, name in enumerate(revolute)}
        q_index = {name: 7 + i for i, name in enumerate(revolute)}

        base_joint = next(j for j in self.joints if j.kind == FLOATING_BASE)
        root = child_of_joint[base_joint.name]
        v_index[base_joint.name] = 0
        q_index[base_joint.name] = 0

        children = {}
        for joint in self.joints:
            if joint.kind == REVOLUTE:
                children.setdefault(joint.parent, []).append(joint)

        bodies = [Body(root, base_joint.name, -1, slice(0, 6), np.eye(6), None)]
        link_body = {self.links[root].name: 0}
        queue = [root]
        while queue:
            parent_link = queue.pop(0)
            for joint in children.get(self.links[parent_link].name, []):
                child = child_of_joint[joint.name]
                axis = np.asarray(joint.axis, dtype=float)
                bodies.append(Body(child, joint.name, link_body[self.links[parent_link].name],
                                   slice(v_index[joint.name], v_index[joint.name] + 1),
                                   joint.tree_transform, axis / np.linalg.norm(axis)))
                link_body[self.links[child].name] = len(bodies) - 1
                queue.append(child)

        passive = {pair.passive_joint for pair in self.rolling_pairs}
        actuated = tuple(name for name in revolute if name not in passive)

        frames = {link.name: (link_body[link.name], np.eye(3), np.zeros(3)) for link in self.links}
        for cf in self.contact_frames:
            frames[cf.name] = (link_body[cf.link], cf.rotation, np.asarray(cf.xyz, dtype=float))

        assert set(link_pos) == set(link_body), "unreachable links survived validation"
        return ModelIndex(tuple(bodies), link_body, v_index, q_index, revolute, actuated, frames)

    def selection_matrix(self):
        """S_a: na x nv actuator selection."""
        S = np.zeros((self.na, self.nv))
        for row, name in enumerate(self.index.actuated_joints):
            S[row, self.index.joint_velocity_index[name]] = 1.0
        return S


@dataclass
class RobotState:
    q: np.ndarray
    v: np.ndarray
    time: float = field(default=0.0, compare=False)

    def __post_init__(self):
        self.q = np.array(self.q, dtype=float)
        self.v = np.array(self.v, dtype=float)

    @property
    def base_position(self):
        return self.q[0:3]

    @property
    def base_quaternion(self):
        return self.q[3:7]

    @property
    def joint_positions(self):
        return self.q[7:]

    @property
    def joint_velocities(self):
        return self.v[6:]

    def copy(self):
        return RobotState(self.q.copy(), self.v.copy(), self.time)
