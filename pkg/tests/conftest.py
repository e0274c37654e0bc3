"""
tests/conftest.py
Shared fixtures: bundled models, seeded generators and tiny hand-built models.
"""
import numpy as np
import pytest
from loguru import logger

from rcwbc.services.model_service import load_model, model_from_dict

ROD_MASS = (2.0, 1.5)
ROD_LENGTH = (0.6, 0.5)


def rod_inertia(mass, length):
    I = mass * length**2 / 12.0
    return [[I, 0.0, 0.0], [0.0, I, 0.0], [0.0, 0.0, 1e-4]]


def revolute(name, parent, xyz=(0.0, 0.0, 0.0), axis=(0.0, 1.0, 0.0), limits=(-3.0, 3.0), torque=(-100.0, 100.0)):
    return {
        "name": name, "kind": "revolute", "parent": parent, "axis": list(axis),
        "origin": {"xyz": list(xyz), "rpy": [0.0, 0.0, 0.0]},
        "position_limits": list(limits), "velocity_limit": 20.0,
        "torque_limits": list(torque), "acceleration_limits": [-1000.0, 1000.0],
    }


def single_body_document(mass=3.0):
    return {
        "name": "single_body",
        "links": [{"name": "body", "mass": mass, "com": [0.0, 0.0, 0.0],
                   "inertia": [[0.3, 0.0, 0.0], [0.0, 0.4, 0.0], [0.0, 0.0, 0.5]], "parent_joint": "root"}],
        "joints": [{"name": "root", "kind": "floating_base"}],
    }


def double_pendulum_document():
    """Base block with two rods hanging along -z, both pitching about y."""
    (m1, m2), (l1, l2) = ROD_MASS, ROD_LENGTH
    return {
        "name": "double_pendulum",
        "links": [
            {"name": "base", "mass": 5.0, "com": [0.0, 0.0, 0.0],
             "inertia": [[0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1]], "parent_joint": "root"},
            {"name": "upper", "mass": m1, "com": [0.0, 0.0, -l1 / 2], "inertia": rod_inertia(m1, l1),
             "parent_joint": "shoulder"},
            {"name": "lower", "mass": m2, "com": [0.0, 0.0, -l2 / 2], "inertia": rod_inertia(m2, l2),
             "parent_joint": "elbow"},
        ],
        "joints": [
            {"name": "root", "kind": "floating_base"},
            revolute("shoulder", "base"),
            revolute("elbow", "upper", xyz=(0.0, 0.0, -l1)),
        ],
        "contact_frames": [{"name": "pivot", "link": "base", "xyz": [0.0, 0.0, 0.0]},
                           {"name": "tip", "link": "lower", "xyz": [0.0, 0.0, -l2]}],
    }


def rolling_arm_document(ratio=1.0):
    """Base block, one shoulder and a rolling-contact elbow pair."""
    return {
        "name": "rolling_arm",
        "links": [
            {"name": "base", "mass": 5.0, "com": [0.0, 0.0, 0.0],
             "inertia": [[0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1]], "parent_joint": "root"},
            {"name": "upper", "mass": 2.0, "com": [0.0, 0.0, -0.2], "inertia": rod_inertia(2.0, 0.4),
             "parent_joint": "shoulder"},
            {"name": "coupler", "mass": 0.2, "com": [0.0, 0.0, -0.02], "inertia": rod_inertia(0.2, 0.04),
             "parent_joint": "elbow_proximal"},
            {"name": "fore", "mass": 1.0, "com": [0.0, 0.0, -0.15], "inertia": rod_inertia(1.0, 0.3),
             "parent_joint": "elbow_distal"},
        ],
        "joints": [
            {"name": "root", "kind": "floating_base"},
            revolute("shoulder", "base"),
            revolute("elbow_proximal", "upper", xyz=(0.0, 0.0, -0.4)),
            revolute("elbow_distal", "coupler", xyz=(0.0, 0.0, -0.04)),
        ],
        "rolling_pairs": [{"proximal_joint": "elbow_proximal", "distal_joint": "elbow_distal",
                           "r_proximal": 0.02, "r_distal": 0.02 * ratio}],
        "contact_frames": [{"name": "hand", "link": "fore", "xyz": [0.0, 0.0, -0.3]}],
    }


@pytest.fixture(autouse=True)
def quiet_logs():
    logger.remove()
    yield


@pytest.fixture(scope="session")
def biped():
    return load_model("biped_rcj")


@pytest.fixture(scope="session")
def sagittal():
    return load_model("biped_rcj_sagittal")


@pytest.fixture(scope="session")
def collocated():
    return load_model("biped_rcj_collocated")


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture(scope="session")
def single_body():
    return model_from_dict(single_body_document())


@pytest.fixture(scope="session")
def pendulum():
    return model_from_dict(double_pendulum_document())


@pytest.fixture(scope="session")
def rolling_arm():
    return model_from_dict(rolling_arm_document())
