"""
src/rcwbc/services/model_service.py
Robot model loading, validation and serialization.
Features:
- YAML model files with line-aware parse errors.
- One diagnostic per violated invariant (validate_model).
- Exact-float round trip (dump_model / load_model).
- Mass relocation between links (proximal vs. collocated variants).
"""
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml
from loguru import logger

from rcwbc.errors import ParseError, TopologyError, ValidationError
from rcwbc.services.dynamics_service import RigidBodyDynamics
from rcwbc.types import (
    FLOATING_BASE, HIP_SHEAVE, KNEE_ROLLING, REVOLUTE,
    ContactFrame, JointSpec, LinkSpec, RobotModel, RobotState, RollingContactPair, TransmissionSpec,
)
from rcwbc.utils.paths import resolve_data_file
from rcwbc.utils.spatial import point_inertia

TOP_LEVEL_KEYS = ("links", "joints", "rolling_pairs", "transmissions", "contact_frames")


@dataclass(frozen=True)
class Diagnostic:
    field: str
    message: str
    kind: str = "validation"

    def __str__(self):
        return f"{self.field}: {self.message}"


# --- PARSING ---
class _Document:
    """Parsed YAML plus a path -> line lookup for error messages."""

    def __init__(self, data, lines):
        self.data = data
        self.lines = lines

    def fail(self, path, message):
        line = self.lines.get(tuple(path))
        raise ParseError(message, line=line, field=_path_text(path))


def _path_text(path):
    text = ""
    for part in path:
        text += f"[{part}]" if isinstance(part, int) else (f".{part}" if text else str(part))
    return text


def _index_lines(node, path=(), out=None):
    out = {} if out is None else out
    if node is None:
        return out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            _index_lines(value_node, path + (key_node.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _index_lines(item, path + (i,), out)
    return out


def _read_document(text: str) -> _Document:
    try:
        data = yaml.safe_load(text)
        lines = _index_lines(yaml.compose(text))
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ParseError(f"Malformed model document: {getattr(e, 'problem', e)}",
                         line=mark.line + 1 if mark else None) from e
    if not isinstance(data, dict):
        raise ParseError("Model document must be a mapping", line=1)
    return _Document(data, lines)


def _get(doc, mapping, path, key, default=...):
    if not isinstance(mapping, dict):
        doc.fail(path, "expected a mapping")
    if key not in mapping:
        if default is ...:
            doc.fail(path + (key,), f"missing required field '{key}'")
        return default
    return mapping[key]


def _scalar(doc, value, path):
    if isinstance(value, bool):
        doc.fail(path, "expected a number")
    try:
        return float(value)
    except (TypeError, ValueError):
        doc.fail(path, f"expected a number, got {value!r}")


def _vector(doc, value, path, size):
    if not isinstance(value, (list, tuple)) or len(value) != size:
        doc.fail(path, f"expected a list of {size} numbers")
    return tuple(_scalar(doc, item, path + (i,)) for i, item in enumerate(value))


def _matrix3(doc, value, path):
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        doc.fail(path, "expected a 3x3 matrix")
    return tuple(_vector(doc, row, path + (i,), 3) for i, row in enumerate(value))


def _string(doc, value, path):
    if not isinstance(value, str) or not value:
        doc.fail(path, "expected a non-empty identifier")
    return value


def _parse_link(doc, raw, path):
    return LinkSpec(
        name=_string(doc, _get(doc, raw, path, "name"), path + ("name",)),
        mass=_scalar(doc, _get(doc, raw, path, "mass"), path + ("mass",)),
        com=_vector(doc, _get(doc, raw, path, "com"), path + ("com",), 3),
        inertia=_matrix3(doc, _get(doc, raw, path, "inertia"), path + ("inertia",)),
        parent_joint=_string(doc, _get(doc, raw, path, "parent_joint"), path + ("parent_joint",)),
    )


def _parse_joint(doc, raw, path):
    name = _string(doc, _get(doc, raw, path, "name"), path + ("name",))
    kind = _string(doc, _get(doc, raw, path, "kind"), path + ("kind",))
    if kind == FLOATING_BASE:
        return JointSpec(name=name, kind=kind, parent=raw.get("parent"))

    origin = _get(doc, raw, path, "origin", {})
    opath = path + ("origin",)
    return JointSpec(
        name=name,
        kind=kind,
        parent=_string(doc, _get(doc, raw, path, "parent"), path + ("parent",)),
        axis=_vector(doc, _get(doc, raw, path, "axis"), path + ("axis",), 3),
        origin_xyz=_vector(doc, _get(doc, origin, opath, "xyz", [0.0, 0.0, 0.0]), opath + ("xyz",), 3),
        origin_rpy=_vector(doc, _get(doc, origin, opath, "rpy", [0.0, 0.0, 0.0]), opath + ("rpy",), 3),
        position_limits=_vector(doc, _get(doc, raw, path, "position_limits"), path + ("position_limits",), 2),
        velocity_limit=_scalar(doc, _get(doc, raw, path, "velocity_limit"), path + ("velocity_limit",)),
        torque_limits=_vector(doc, _get(doc, raw, path, "torque_limits"), path + ("torque_limits",), 2),
        acceleration_limits=_vector(doc, _get(doc, raw, path, "acceleration_limits"),
                                    path + ("acceleration_limits",), 2),
    )


def _parse_pair(doc, raw, path):
    return RollingContactPair(
        proximal_joint=_string(doc, _get(doc, raw, path, "proximal_joint"), path + ("proximal_joint",)),
        distal_joint=_string(doc, _get(doc, raw, path, "distal_joint"), path + ("distal_joint",)),
        r_proximal=_scalar(doc, _get(doc, raw, path, "r_proximal"), path + ("r_proximal",)),
        r_distal=_scalar(doc, _get(doc, raw, path, "r_distal"), path + ("r_distal",)),
        actuated_side=_string(doc, _get(doc, raw, path, "actuated_side", "distal"), path + ("actuated_side",)),
    )


def _parse_transmission(doc, raw, path):
    kind = _string(doc, _get(doc, raw, path, "kind"), path + ("kind",))
    joint = _string(doc, _get(doc, raw, path, "joint"), path + ("joint",))
    if kind == HIP_SHEAVE:
        return TransmissionSpec(
            kind=kind, joint=joint,
            r_fix=_scalar(doc, _get(doc, raw, path, "r_fix"), path + ("r_fix",)),
            r_rot=_scalar(doc, _get(doc, raw, path, "r_rot"), path + ("r_rot",)),
        )
    stages = _get(doc, raw, path, "gear_stages", [])
    if not isinstance(stages, list):
        doc.fail(path + ("gear_stages",), "expected a list of ratios")
    return TransmissionSpec(
        kind=kind, joint=joint,
        gear_stages=tuple(_scalar(doc, s, path + ("gear_stages", i)) for i, s in enumerate(stages)),
    )


def _parse_contact(doc, raw, path):
    return ContactFrame(
        name=_string(doc, _get(doc, raw, path, "name"), path + ("name",)),
        link=_string(doc, _get(doc, raw, path, "link"), path + ("link",)),
        xyz=_vector(doc, _get(doc, raw, path, "xyz", [0.0, 0.0, 0.0]), path + ("xyz",), 3),
        rpy=_vector(doc, _get(doc, raw, path, "rpy", [0.0, 0.0, 0.0]), path + ("rpy",), 3),
    )


def _parse_model(doc: _Document, source: str) -> RobotModel:
    data = doc.data
    for key in ("links", "joints"):
        if key not in data:
            doc.fail((key,), f"missing top-level key '{key}'")
    sections = {}
    for key in TOP_LEVEL_KEYS:
        value = data.get(key) or []
        if not isinstance(value, list):
            doc.fail((key,), "expected a list")
        sections[key] = value

    parsers = {
        "links": _parse_link,
        "joints": _parse_joint,
        "rolling_pairs": _parse_pair,
        "transmissions": _parse_transmission,
        "contact_frames": _parse_contact,
    }
    parsed = {key: tuple(parsers[key](doc, raw, (key, i)) for i, raw in enumerate(sections[key]))
              for key in TOP_LEVEL_KEYS}

    name = data.get("name", Path(source).stem if source else "model")
    height = _scalar(doc, data.get("height", 1.0), ("height",))
    return RobotModel(name=str(name), height=height, **parsed)


# --- VALIDATION ---
def _check_inertia(link, out):
    field = f"links.{link.name}.inertia"
    I = link.inertia
    if not np.all(np.isfinite(I)):
        out.append(Diagnostic(field, "inertia has non-finite entries"))
        return
    scale = max(1.0, float(np.abs(I).max()))
    if np.abs(I - I.T).max() > 1e-9 * scale:
        out.append(Diagnostic(field, f"inertia of link '{link.name}' is not symmetric"))
        return
    eig = np.linalg.eigvalsh(0.5 * (I + I.T))
    if eig.min() <= 0.0:
        out.append(Diagnostic(field, f"inertia of link '{link.name}' is not positive definite "
                                     f"(smallest eigenvalue {eig.min():.3g})"))
        return
    a, b, c = eig
    if c > a + b + 1e-9 * scale:
        out.append(Diagnostic(field, f"principal moments of link '{link.name}' violate the triangle inequality"))


def _check_limits(joint, out):
    for label in ("position_limits", "torque_limits", "acceleration_limits"):
        lo, hi = getattr(joint, label)
        if not lo < hi:
            out.append(Diagnostic(f"joints.{joint.name}.{label}",
                                  f"lower limit {lo} is not below upper limit {hi}"))
    if not joint.velocity_limit > 0.0:
        out.append(Diagnostic(f"joints.{joint.name}.velocity_limit", "velocity limit must be positive"))


def _check_topology(model, out):
    link_names = [link.name for link in model.links]
    joint_by_name = {j.name: j for j in model.joints}

    children = {}
    for link in model.links:
        if link.parent_joint not in joint_by_name:
            out.append(Diagnostic(f"links.{link.name}.parent_joint",
                                  f"parent joint '{link.parent_joint}' does not exist", "topology"))
            continue
        children.setdefault(link.parent_joint, []).append(link.name)

    for joint in model.joints:
        kids = children.get(joint.name, [])
        if len(kids) != 1:
            out.append(Diagnostic(f"joints.{joint.name}", f"joint must carry exactly one child link, found {len(kids)}",
                                  "topology"))
        if joint.kind == REVOLUTE and joint.parent not in link_names:
            out.append(Diagnostic(f"joints.{joint.name}.parent", f"parent link '{joint.parent}' does not exist",
                                  "topology"))

    base = next(j for j in model.joints if j.kind == FLOATING_BASE)
    if base.parent is not None:
        out.append(Diagnostic(f"joints.{base.name}.parent", "the floating base joint must be the root", "topology"))
    roots = children.get(base.name, [])
    if not roots:
        return

    # walk down from the root; anything not reached is an orphan or sits on a cycle
    reached = {roots[0]}
    frontier = [roots[0]]
    while frontier:
        current = frontier.pop()
        for joint in model.joints:
            if joint.kind == REVOLUTE and joint.parent == current:
                for child in children.get(joint.name, []):
                    if child not in reached:
                        reached.add(child)
                        frontier.append(child)
    for name in link_names:
        if name not in reached:
            out.append(Diagnostic(f"links.{name}", f"link '{name}' is not reachable from the floating base "
                                                   "(orphan or cycle)", "topology"))


def _check_pairs(model, out):
    joint_by_name = {j.name: j for j in model.joints}
    revolute = [j.name for j in model.joints if j.kind == REVOLUTE]
    child_link = {link.parent_joint: link.name for link in model.links}

    for i, pair in enumerate(model.rolling_pairs):
        field = f"rolling_pairs[{i}]"
        if not (pair.r_proximal > 0.0 and pair.r_distal > 0.0):
            out.append(Diagnostic(field, "rolling radii must be strictly positive"))
        if pair.actuated_side not in ("proximal", "distal"):
            out.append(Diagnostic(f"{field}.actuated_side", f"unknown side '{pair.actuated_side}'"))
        prox = joint_by_name.get(pair.proximal_joint)
        dist = joint_by_name.get(pair.distal_joint)
        if prox is None or dist is None or prox.kind != REVOLUTE or dist.kind != REVOLUTE:
            out.append(Diagnostic(field, "both joints of a rolling pair must exist and be revolute"))
            continue
        consecutive = (revolute.index(dist.name) == revolute.index(prox.name) + 1
                       and dist.parent == child_link.get(prox.name))
        if not consecutive:
            out.append(Diagnostic(field, f"'{prox.name}' and '{dist.name}' are not consecutive joints on one chain"))
            continue
        axis_p = np.asarray(prox.axis) / np.linalg.norm(prox.axis)
        axis_d = dist.origin_rotation @ (np.asarray(dist.axis) / np.linalg.norm(dist.axis))
        if np.linalg.norm(np.cross(axis_p, axis_d)) > 1e-9:
            out.append(Diagnostic(field, f"axes of '{prox.name}' and '{dist.name}' are not parallel"))


def _check_transmissions(model, out):
    joint_names = {j.name for j in model.joints if j.kind == REVOLUTE}
    for i, spec in enumerate(model.transmissions):
        field = f"transmissions[{i}]"
        if spec.joint not in joint_names:
            out.append(Diagnostic(f"{field}.joint", f"unknown joint '{spec.joint}'"))
        if spec.kind == HIP_SHEAVE:
            if not (spec.r_fix and spec.r_fix > 0.0 and spec.r_rot and spec.r_rot > 0.0):
                out.append(Diagnostic(field, "sheave radii must be strictly positive"))
        elif spec.kind == KNEE_ROLLING:
            if not spec.gear_stages or any(s <= 0.0 for s in spec.gear_stages):
                out.append(Diagnostic(f"{field}.gear_stages", "gear stages must be a non-empty list of positive ratios"))
            if model.pair_for(spec.joint) is None:
                out.append(Diagnostic(f"{field}.joint", f"'{spec.joint}' is not part of a rolling pair"))
        else:
            out.append(Diagnostic(f"{field}.kind", f"unknown transmission kind '{spec.kind}'"))


def validate_model(model: RobotModel) -> list:
    """
    One diagnostic per violated invariant; empty iff the model is valid.
    """
    out = []

    for kind_field, names in (("links", [l.name for l in model.links]), ("joints", [j.name for j in model.joints])):
        dupes = sorted({n for n in names if names.count(n) > 1})
        for name in dupes:
            out.append(Diagnostic(f"{kind_field}.{name}", "duplicate name"))

    for link in model.links:
        if not (np.isfinite(link.mass) and link.mass > 0.0):
            out.append(Diagnostic(f"links.{link.name}.mass", f"mass of link '{link.name}' must be positive"))
        if not np.all(np.isfinite(link.com)):
            out.append(Diagnostic(f"links.{link.name}.com", "com has non-finite entries"))
        _check_inertia(link, out)

    for joint in model.joints:
        if joint.kind not in (FLOATING_BASE, REVOLUTE):
            out.append(Diagnostic(f"joints.{joint.name}.kind", f"unknown joint kind '{joint.kind}'"))
        elif joint.kind == REVOLUTE:
            if abs(np.linalg.norm(joint.axis) - 1.0) > 1e-9:
                out.append(Diagnostic(f"joints.{joint.name}.axis", "axis must have unit norm"))
            _check_limits(joint, out)

    n_base = sum(1 for j in model.joints if j.kind == FLOATING_BASE)
    if n_base != 1:
        out.append(Diagnostic("joints", f"expected exactly one floating_base joint, found {n_base}"))
    else:
        _check_topology(model, out)

    _check_pairs(model, out)
    _check_transmissions(model, out)

    frame_names = {link.name for link in model.links}
    for cf in model.contact_frames:
        if cf.link not in frame_names:
            out.append(Diagnostic(f"contact_frames.{cf.name}.link", f"unknown link '{cf.link}'"))
        if cf.name in frame_names:
            out.append(Diagnostic(f"contact_frames.{cf.name}", "frame name clashes with another frame"))
        frame_names.add(cf.name)

    if not model.height > 0.0:
        out.append(Diagnostic("height", "model height must be positive"))
    return out


def _raise_first(diagnostics):
    topo = [d for d in diagnostics if d.kind == "topology"]
    first = topo[0] if topo else diagnostics[0]
    error = TopologyError if topo else ValidationError
    raise error(str(first), field=first.field)


# --- LOADING ---
def model_from_dict(document: dict, source: str = "<dict>") -> RobotModel:
    doc = _Document(document, {})
    if not isinstance(document, dict):
        raise ParseError("Model document must be a mapping")
    return _finish(_parse_model(doc, source))


def _finish(model: RobotModel) -> RobotModel:
    diagnostics = validate_model(model)
    if diagnostics:
        for d in diagnostics:
            logger.debug(f"Model diagnostic: {d}")
        _raise_first(diagnostics)
    _ = model.index
    return model


def load_model(path) -> RobotModel:
    path = resolve_data_file(path, "model")
    if not path.exists():
        raise ParseError(f"Model file not found: {path}")
    logger.info(f"Loading robot model from {path}")
    doc = _read_document(path.read_text(encoding="utf-8"))
    model = _finish(_parse_model(doc, str(path)))
    logger.info(f"Model '{model.name}' loaded: nq={model.nq}, nv={model.nv}, "
                f"{len(model.rolling_pairs)} rolling pairs, mass {model.total_mass:.2f} kg")
    return model


# --- SERIALIZATION ---
def model_to_dict(model: RobotModel) -> dict:
    def floats(values):
        return [float(v) for v in values]

    joints = []
    for j in model.joints:
        if j.kind == FLOATING_BASE:
            joints.append({"name": j.name, "kind": j.kind})
            continue
        joints.append({
            "name": j.name, "kind": j.kind, "parent": j.parent, "axis": floats(j.axis),
            "origin": {"xyz": floats(j.origin_xyz), "rpy": floats(j.origin_rpy)},
            "position_limits": floats(j.position_limits), "velocity_limit": float(j.velocity_limit),
            "torque_limits": floats(j.torque_limits), "acceleration_limits": floats(j.acceleration_limits),
        })

    transmissions = []
    for t in model.transmissions:
        entry = {"kind": t.kind, "joint": t.joint}
        if t.kind == HIP_SHEAVE:
            entry.update(r_fix=float(t.r_fix), r_rot=float(t.r_rot))
        else:
            entry["gear_stages"] = floats(t.gear_stages)
        transmissions.append(entry)

    return {
        "name": model.name,
        "height": float(model.height),
        "links": [{"name": l.name, "mass": float(l.mass), "com": floats(l.com),
                   "inertia": [floats(row) for row in l.inertia], "parent_joint": l.parent_joint}
                  for l in model.links],
        "joints": joints,
        "rolling_pairs": [{"proximal_joint": p.proximal_joint, "distal_joint": p.distal_joint,
                           "r_proximal": float(p.r_proximal), "r_distal": float(p.r_distal),
                           "actuated_side": p.actuated_side} for p in model.rolling_pairs],
        "transmissions": transmissions,
        "contact_frames": [{"name": c.name, "link": c.link, "xyz": floats(c.xyz), "rpy": floats(c.rpy)}
                           for c in model.contact_frames],
    }


def dump_model(model: RobotModel, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(model_to_dict(model), f, sort_keys=False)
    logger.success(f"Model '{model.name}' written to {path}")


# --- STATES ---
def neutral_state(model: RobotModel) -> RobotState:
    q = np.zeros(model.nq)
    q[3] = 1.0
    return RobotState(q, np.zeros(model.nv))


def random_state(model: RobotModel, rng: np.random.Generator, velocity_scale: float = 1.0) -> RobotState:
    """Uniform joint angles inside the limits (rolling pairs consistent), random base pose and velocities."""
    state = neutral_state(model)
    passive = {p.passive_joint for p in model.rolling_pairs}
    angles = {}
    for name in model.index.revolute_joints:
        if name in passive:
            continue
        lo, hi = model.joint(name).position_limits
        angles[name] = rng.uniform(max(lo, -np.pi), min(hi, np.pi))
    for name, value in consistent_joint_positions(model, angles).items():
        state.q[model.index.joint_position_index[name]] = value

    quat = rng.normal(size=4)
    quat /= np.linalg.norm(quat)
    state.q[0:3] = rng.uniform(-0.5, 0.5, 3)
    state.q[3:7] = quat if quat[0] >= 0.0 else -quat

    v = rng.normal(scale=velocity_scale, size=model.nv)
    for pair in model.rolling_pairs:
        i_p = model.index.joint_velocity_index[pair.proximal_joint]
        i_d = model.index.joint_velocity_index[pair.distal_joint]
        if pair.passive_joint == pair.proximal_joint:
            v[i_p] = pair.radius_ratio * v[i_d]
        else:
            v[i_d] = v[i_p] / pair.radius_ratio
    state.v = v
    return state


def consistent_joint_positions(model: RobotModel, joint_positions: dict) -> dict:
    """Fill in the missing side of each rolling pair so that q_proximal = ratio * q_distal."""
    out = dict(joint_positions)
    for pair in model.rolling_pairs:
        if pair.distal_joint in out and pair.proximal_joint not in out:
            out[pair.proximal_joint] = pair.radius_ratio * out[pair.distal_joint]
        elif pair.proximal_joint in out and pair.distal_joint not in out:
            out[pair.distal_joint] = out[pair.proximal_joint] / pair.radius_ratio
    return out


def standing_state(model: RobotModel, joint_positions: dict, ground_frames, base_xy=(0.0, 0.0)) -> RobotState:
    """Joint angles by name, rolling pairs made consistent, base lifted until the ground frames touch z = 0."""
    state = neutral_state(model)
    for name, value in consistent_joint_positions(model, joint_positions).items():
        state.q[model.index.joint_position_index[name]] = float(value)
    state.q[0:2] = base_xy

    dynamics = RigidBodyDynamics(model)
    heights = [dynamics.frame_pose(state, frame)[1][2] for frame in ground_frames]
    state.q[2] = -min(heights)
    return state


# --- DESIGN VARIANTS ---
def relocate_mass(model: RobotModel, source_link: str, target_link: str, mass: float, target_point) -> RobotModel:
    """
    Move `mass` kg out of `source_link` (scaled uniformly, com unchanged) and add it as a point
    mass at `target_point` (target link coordinates).
    """
    if mass == 0.0:
        return model
    source = model.link(source_link)
    target = model.link(target_link)
    remaining = source.mass - mass
    if remaining <= 0.0:
        raise ValidationError(f"Cannot move {mass} kg out of '{source_link}' ({source.mass} kg)",
                              field=f"links.{source_link}.mass")

    new_source = replace(source, mass=remaining, inertia=source.inertia * (remaining / source.mass))

    p = np.asarray(target_point, dtype=float)
    m_total = target.mass + mass
    com = (target.mass * target.com + mass * p) / m_total
    inertia = (target.inertia + point_inertia(target.mass, target.com - com) + point_inertia(mass, p - com))
    new_target = replace(target, mass=m_total, com=com, inertia=inertia)

    links = tuple(new_source if l.name == source_link else new_target if l.name == target_link else l
                  for l in model.links)
    logger.debug(f"Moved {mass} kg from '{source_link}' to '{target_link}'")
    return _finish(replace(model, links=links))
