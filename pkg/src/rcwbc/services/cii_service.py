"""
src/rcwbc/services/cii_service.py
Centroidal Inertia Isotropy (CII) and the one-step configuration sweep.
Features:
- CII(q, q0) = det(I_G(q)^-1 I_G(q0) - 1).
- Swing-foot trajectories over a forward/lateral step grid, solved by whole-body IK.
- Sweeps fan out over grid points on a thread pool; results are ordered by (grid, sample).
- Paired report of the CII range for two models (proximal vs. collocated actuation).
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml
from loguru import logger

from rcwbc.errors import IkDidNotConverge, ParseError, SingularInertia, ValidationError
from rcwbc.services.dynamics_service import RigidBodyDynamics
from rcwbc.services.ik_service import FrameTarget, solve_ik
from rcwbc.services.model_service import standing_state
from rcwbc.types import RobotModel, RobotState
from rcwbc.utils.paths import resolve_data_file

REFERENCE_HEIGHT = 1.35
SINGULAR_CONDITION = 1e12

# upright, knees bent by 90 degrees, feet flat
NOMINAL_JOINTS = {
    "l_hip_pitch": -np.pi / 4, "l_knee_distal": np.pi / 4, "l_ankle_pitch": -np.pi / 4,
    "r_hip_pitch": -np.pi / 4, "r_knee_distal": np.pi / 4, "r_ankle_pitch": -np.pi / 4,
}


@dataclass
class CiiSweepConfig:
    forward_range: tuple = (0.1, 0.2)
    lateral_range: tuple = (-0.1, 0.1)
    forward_points: int = 10
    lateral_points: int = 10
    swing_height: float = 0.05
    samples: int = 30
    ik_tolerance: float = 1e-6
    ik_max_iterations: int = 200
    swing_foot: str = "l_sole"
    stance_foot: str = "r_sole"
    base_frame: str = "torso"
    nominal_joints: dict = field(default_factory=lambda: dict(NOMINAL_JOINTS))
    reference_height: float = REFERENCE_HEIGHT

    def __post_init__(self):
        self.forward_range = tuple(float(v) for v in self.forward_range)
        self.lateral_range = tuple(float(v) for v in self.lateral_range)
        for name, (lo, hi) in (("forward_range", self.forward_range), ("lateral_range", self.lateral_range)):
            if lo > hi:
                raise ValidationError(f"{name} must be ordered, got {lo} > {hi}", field=name)
        if self.samples < 2:
            raise ValidationError("A swing trajectory needs at least 2 samples", field="samples")
        if self.forward_points < 1 or self.lateral_points < 1:
            raise ValidationError("The step grid needs at least one point per axis", field="grid")
        if self.swing_height < 0.0 or self.ik_tolerance <= 0.0:
            raise ValidationError("Swing height must be non-negative and the IK tolerance positive", field="ik")

    def grid(self, scale: float = 1.0):
        """Step targets (forward, lateral) in meters, forward-major order."""
        forward = np.linspace(*self.forward_range, self.forward_points) * scale
        lateral = np.linspace(*self.lateral_range, self.lateral_points) * scale
        return [(float(f), float(l)) for f in forward for l in lateral]


@dataclass(frozen=True)
class SweepSample:
    grid_index: int
    sample_index: int
    step: tuple
    state: RobotState


@dataclass(frozen=True)
class CiiSample:
    grid_index: int
    sample_index: int
    forward: float
    lateral: float
    value: float


@dataclass
class CiiSweepResult:
    model_name: str
    samples: list
    skipped: int = 0
    requested: int = 0

    @property
    def values(self):
        return np.array([s.value for s in self.samples])

    @property
    def minimum(self):
        return float(self.values.min()) if self.samples else float("nan")

    @property
    def maximum(self):
        return float(self.values.max()) if self.samples else float("nan")

    @property
    def range(self):
        return self.maximum - self.minimum

    @property
    def abs_minimum(self):
        return float(np.abs(self.values).min()) if self.samples else float("nan")

    @property
    def abs_maximum(self):
        return float(np.abs(self.values).max()) if self.samples else float("nan")

    @property
    def abs_range(self):
        return self.abs_maximum - self.abs_minimum

    @property
    def failure_rate(self):
        return self.skipped / self.requested if self.requested else 0.0

    def summary(self) -> dict:
        return {
            "model": self.model_name, "configurations": len(self.samples), "skipped": self.skipped,
            "min": self.minimum, "max": self.maximum, "range": self.range,
            "abs_min": self.abs_minimum, "abs_max": self.abs_maximum, "abs_range": self.abs_range,
        }


@dataclass
class CiiReport:
    proximal: CiiSweepResult
    collocated: CiiSweepResult | None = None

    @property
    def range_change(self):
        """(range_b - range_a) / range_b in percent, b being the collocated model."""
        if self.collocated is None:
            return None
        if self.collocated.range == 0.0:
            return 0.0
        return 100.0 * (self.collocated.range - self.proximal.range) / self.collocated.range

    def summary(self) -> dict:
        out = {"proximal": self.proximal.summary()}
        if self.collocated is not None:
            out["collocated"] = self.collocated.summary()
            out["range_change_percent"] = self.range_change
        return out


# --- METRIC ---
def cii_value(model: RobotModel, q, q0, dynamics: RigidBodyDynamics | None = None) -> float:
    dynamics = dynamics or RigidBodyDynamics(model)
    zero = np.zeros(model.nv)
    I_q = dynamics.centroidal_inertia(RobotState(q, zero)).I_G
    I_0 = dynamics.centroidal_inertia(RobotState(q0, zero)).I_G
    condition = float(np.linalg.cond(I_q))
    if not np.isfinite(condition) or condition > SINGULAR_CONDITION:
        raise SingularInertia(f"Centroidal inertia is singular (condition {condition:.3e})", condition=condition)
    return float(np.linalg.det(np.linalg.solve(I_q, I_0) - np.eye(3)))


# --- SWEEP ---
def nominal_state(model: RobotModel, config: CiiSweepConfig) -> RobotState:
    return standing_state(model, config.nominal_joints, [config.stance_foot, config.swing_foot])


def swing_trajectory(start, step, swing_height, samples):
    """Straight line from start to start + step with a triangular lift peaking at mid-stride."""
    start = np.asarray(start, dtype=float)
    t = np.linspace(0.0, 1.0, samples)
    points = start + np.outer(t, [step[0], step[1], 0.0])
    points[:, 2] += swing_height * (1.0 - np.abs(2.0 * t - 1.0))
    return points


def _sweep_grid_point(model, config, dynamics, nominal, grid_index, step, scale):
    R_stance, p_stance = dynamics.frame_pose(nominal, config.stance_foot)
    R_swing, p_swing = dynamics.frame_pose(nominal, config.swing_foot)
    R_base, _ = dynamics.frame_pose(nominal, config.base_frame)
    path = swing_trajectory(p_swing, step, config.swing_height * scale, config.samples)

    seed = nominal
    out, skipped = [], 0
    for sample_index, point in enumerate(path):
        midpoint = 0.5 * (p_stance[:2] + point[:2])
        targets = [
            FrameTarget(config.stance_foot, p_stance, R_stance),
            FrameTarget(config.swing_foot, point, R_swing),
            FrameTarget(config.base_frame, midpoint, R_base, axes="xy"),
        ]
        try:
            solution = solve_ik(model, targets, seed, config.ik_tolerance, config.ik_max_iterations, dynamics)
        except IkDidNotConverge as e:
            skipped += 1
            logger.debug(f"Grid point {grid_index} sample {sample_index}: {e}")
            continue
        seed = solution.state
        out.append(SweepSample(grid_index, sample_index, step, solution.state))
    return out, skipped


def _run_sweep(model, config, workers, dynamics=None):
    dynamics = dynamics or RigidBodyDynamics(model)
    nominal = nominal_state(model, config)
    scale = model.height / config.reference_height
    grid = config.grid(scale)
    logger.info(f"Sweeping {len(grid)} step targets x {config.samples} samples on '{model.name}' "
                f"(scale {scale:.3f}, {workers} workers)")

    def job(item):
        grid_index, step = item
        return _sweep_grid_point(model, config, dynamics, nominal, grid_index, step, scale)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, enumerate(grid)))
    else:
        results = [job(item) for item in enumerate(grid)]

    samples = sorted((s for chunk, _ in results for s in chunk), key=lambda s: (s.grid_index, s.sample_index))
    skipped = sum(n for _, n in results)
    if skipped:
        logger.warning(f"{skipped} of {len(grid) * config.samples} sweep samples skipped (IK did not converge)")
    return nominal, samples, skipped, len(grid) * config.samples


def sample_step_configurations(model: RobotModel, config: CiiSweepConfig, workers: int = 1) -> list:
    """Every solved sweep state as a SweepSample, ordered by (grid, sample)."""
    _, samples, _, _ = _run_sweep(model, config, workers)
    return samples


def cii_sweep(model: RobotModel, config: CiiSweepConfig, workers: int = 1) -> CiiSweepResult:
    dynamics = RigidBodyDynamics(model)
    nominal, samples, skipped, requested = _run_sweep(model, config, workers, dynamics)
    values = [CiiSample(s.grid_index, s.sample_index, s.step[0], s.step[1],
                        cii_value(model, s.state.q, nominal.q, dynamics)) for s in samples]
    result = CiiSweepResult(model.name, values, skipped, requested)
    if values:
        logger.info(f"CII on '{model.name}': range {result.range:.3e} over {len(values)} configurations")
    return result


def cii_report(model_a: RobotModel, model_b: RobotModel | None, config: CiiSweepConfig,
               workers: int = 1) -> CiiReport:
    if model_b is not None and (model_a.index.revolute_joints != model_b.index.revolute_joints):
        raise ValidationError(f"Models '{model_a.name}' and '{model_b.name}' do not share a topology",
                              field="joints")
    report = CiiReport(cii_sweep(model_a, config, workers))
    if model_b is not None:
        report.collocated = cii_sweep(model_b, config, workers)
        logger.info(f"CII range change '{model_a.name}' vs '{model_b.name}': {report.range_change:.1f}%")
    return report


def load_sweep_config(path) -> CiiSweepConfig:
    path = resolve_data_file(path, "sweep")
    if not path.exists():
        raise ParseError(f"Sweep file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ParseError(f"Malformed sweep file: {e}", line=mark.line + 1 if mark else None) from e
    if not isinstance(doc, dict):
        raise ParseError("Sweep document must be a mapping")

    grid = doc.get("grid", {}) or {}
    ik = doc.get("ik", {}) or {}
    kwargs = {
        "forward_range": doc.get("forward_range", (0.1, 0.2)),
        "lateral_range": doc.get("lateral_range", (-0.1, 0.1)),
        "forward_points": grid.get("forward", 10),
        "lateral_points": grid.get("lateral", 10),
        "swing_height": doc.get("swing_height", 0.05),
        "samples": doc.get("samples", 30),
        "ik_tolerance": ik.get("tolerance", 1e-6),
        "ik_max_iterations": ik.get("max_iterations", 200),
    }
    for key in ("swing_foot", "stance_foot", "base_frame", "reference_height"):
        if key in doc:
            kwargs[key] = doc[key]
    if "nominal_joints" in doc:
        kwargs["nominal_joints"] = {str(k): float(v) for k, v in doc["nominal_joints"].items()}
    try:
        config = CiiSweepConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ParseError(f"Invalid sweep setting: {e}") from e
    logger.info(f"Sweep config {path.name}: {config.forward_points}x{config.lateral_points} grid, "
                f"{config.samples} samples")
    return config
