"""
src/rcwbc/services/actuation_service.py
Joint <-> motor maps for the hip sheave and the rolling-contact knee transmissions.
Torque ratios follow the kinematic ratios, so tau * omega is the same on both sides of every stage.
"""
import numpy as np
from loguru import logger

from rcwbc.errors import ValidationError
from rcwbc.types import HIP_SHEAVE, KNEE_ROLLING, RobotModel, RollingContactPair, TransmissionSpec


def _stage_product(spec: TransmissionSpec) -> float:
    if not spec.gear_stages or any(s <= 0.0 for s in spec.gear_stages):
        raise ValidationError(f"Knee transmission on '{spec.joint}' needs positive gear stages", field="gear_stages")
    return float(np.prod(spec.gear_stages))


def _icr_share(pair: RollingContactPair) -> float:
    """Fraction of the distal joint torque seen at the instantaneous centre of rotation."""
    return pair.r_proximal / (pair.r_proximal + pair.r_distal)


def hip_joint_to_motor(tau_joint, spec: TransmissionSpec):
    return tau_joint / (spec.r_fix / spec.r_rot)


def knee_joint_to_motor(tau_distal, pair: RollingContactPair, spec: TransmissionSpec):
    tau_icr = tau_distal * _icr_share(pair)
    return tau_icr / _stage_product(spec)


def motor_to_joint(tau_motor, spec: TransmissionSpec, pair: RollingContactPair | None = None):
    if spec.kind == HIP_SHEAVE:
        return tau_motor * (spec.r_fix / spec.r_rot)
    if pair is None:
        raise ValidationError(f"Knee transmission on '{spec.joint}' needs its rolling pair", field="joint")
    return tau_motor * _stage_product(spec) / _icr_share(pair)


def joint_velocity_to_motor(omega_joint, spec: TransmissionSpec, pair: RollingContactPair | None = None):
    """
    Motor speed for a joint speed. For the knee, omega_joint is the distal rate; the knee turns at
    omega_proximal + omega_distal and the ICR stage runs at the knee rate.
    """
    if spec.kind == HIP_SHEAVE:
        return omega_joint * (spec.r_fix / spec.r_rot)
    if pair is None:
        raise ValidationError(f"Knee transmission on '{spec.joint}' needs its rolling pair", field="joint")
    omega_knee = omega_joint / _icr_share(pair)
    return omega_knee * _stage_product(spec)


def joint_to_motor(tau_joint, spec: TransmissionSpec, pair: RollingContactPair | None = None):
    if spec.kind == HIP_SHEAVE:
        return hip_joint_to_motor(tau_joint, spec)
    if spec.kind == KNEE_ROLLING:
        if pair is None:
            raise ValidationError(f"Knee transmission on '{spec.joint}' needs its rolling pair", field="joint")
        return knee_joint_to_motor(tau_joint, pair, spec)
    raise ValidationError(f"Unknown transmission kind '{spec.kind}'", field="kind")


def map_joint_torques(model: RobotModel, tau) -> dict:
    """Actuated joint torques (model.index.actuated_joints order) -> motor torques; no transmission passes through."""
    tau = np.asarray(tau, dtype=float)
    out = {}
    for name, value in zip(model.index.actuated_joints, tau):
        spec = model.transmission_for(name)
        if spec is None:
            out[name] = float(value)
            continue
        out[name] = float(joint_to_motor(value, spec, model.pair_for(name)))
    logger.trace(f"Motor torques: {out}")
    return out
