"""
src/rcwbc/main.py
Entry Point.
Features:
- Subcommands: check (actuation validity sweep), simulate (closed-loop scenario), cii (inertia isotropy sweep).
- Bundled models, scenarios and sweeps are addressable by bare name.
- Stable exit codes: 0 ok, 1 validation, 2 parse, 3 solver, 4 inverse kinematics.
- Global Error Handling (uncaught exceptions are logged as CRITICAL).
"""
import argparse
import sys

import numpy as np
from loguru import logger

from rcwbc.config import configure_logging, load_settings
from rcwbc.errors import IkDidNotConverge, RcwbcError, SolverError
from rcwbc.services.cii_service import cii_report, load_sweep_config
from rcwbc.services.constraint_service import build_internal_jacobian, check_actuation_validity, nullspace_projector
from rcwbc.services.dynamics_service import RigidBodyDynamics
from rcwbc.services.model_service import load_model, random_state
from rcwbc.services.report_service import ReportService
from rcwbc.services.simulation_service import load_scenario, run_scenario

CHECK_CONFIGURATIONS = 100
CHECK_TOLERANCE = 1e-9
MAX_IK_FAILURE_RATE = 0.5


# --- GLOBAL EXCEPTION HANDLER ---
def global_exception_handler(exc_type, exc_value, exc_traceback):
    """
    Catches any unhandled error so the run ends with a log entry instead of a bare traceback.
    """
    if issubclass(exc_type, KeyboardInterrupt):
        sys.__excepthook__(exc_type, exc_value, exc_traceback)
        return

    logger.opt(exception=(exc_type, exc_value, exc_traceback)).critical("Uncaught exception")
    sys.exit(1)


# Register the hook
sys.excepthook = global_exception_handler


# --- COMMANDS ---
def execute_check(args) -> int:
    model = load_model(args.model)
    dynamics = RigidBodyDynamics(model)
    ics = build_internal_jacobian(model)
    rng = np.random.default_rng(args.seed)

    print(f"{'#':>4}  {'validity defect':>16}  {'|J_int N_int|':>14}  {'|N^2 - N|':>12}  result")
    failures = 0
    for i in range(CHECK_CONFIGURATIONS):
        state = random_state(model, rng)
        check = check_actuation_validity(model, state, dynamics=dynamics)
        projected = nullspace_projector(ics, dynamics.mass_matrix(state))
        N = projected.N_int
        annihilation = float(np.linalg.norm(ics.J_int @ N))
        idempotence = float(np.linalg.norm(N @ N - N))
        passed = check.valid and annihilation < CHECK_TOLERANCE and idempotence < CHECK_TOLERANCE
        failures += not passed
        print(f"{i:>4}  {check.defect:>16.3e}  {annihilation:>14.3e}  {idempotence:>12.3e}  "
              f"{'pass' if passed else 'FAIL'}")

    print(f"{CHECK_CONFIGURATIONS - failures}/{CHECK_CONFIGURATIONS} configurations pass on '{model.name}'")
    if failures:
        logger.error(f"Actuation validity failed at {failures} configurations")
        return 1
    return 0


def execute_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    log = run_scenario(scenario, log_every=args.log_every, duration=args.duration, seed=args.seed)
    ReportService(args.output).write_trajectory(log)

    summary = log.summary()
    print(f"{'phase':<12}  {'CoM RMS [m]':>12}  {'height RMS [m]':>14}  {'RPY max [deg]':>13}  {'|J_int v| max':>13}")
    for name, phase in summary["phases"].items():
        print(f"{name:<12}  {phase['com_rms_error']:>12.4e}  {phase['base_height_rms_error']:>14.4e}  "
              f"{phase['base_rpy_max_error_deg']:>13.4f}  {phase['max_internal_velocity']:>13.3e}")

    if log.failure:
        print(f"Stopped at t={log.failure['time']:.3f}s: {log.failure['message']}")
        return SolverError.exit_code
    return 0


def execute_cii(args) -> int:
    model_a = load_model(args.model)
    model_b = load_model(args.second_model) if args.second_model else None
    config = load_sweep_config(args.sweep)
    report = cii_report(model_a, model_b, config, workers=args.workers)
    ReportService(args.output).write_cii(report)

    for result in (report.proximal, report.collocated):
        if result is None:
            continue
        print(f"{result.model_name}: {len(result.samples)} configurations, {result.skipped} skipped, "
              f"CII range {result.range:.4e} (|CII| range {result.abs_range:.4e})")
        if result.failure_rate > MAX_IK_FAILURE_RATE:
            error = IkDidNotConverge(f"IK failed on {100.0 * result.failure_rate:.0f}% of the sweep samples "
                                     f"for '{result.model_name}'")
            print(error)
            logger.error(str(error))
            return error.exit_code
    if report.collocated is not None:
        print(f"Range change: {report.range_change:.1f}%")
    return 0


# --- PARSER ---
def build_parser(settings=None) -> argparse.ArgumentParser:
    workers = settings.workers if settings is not None else 1
    parser = argparse.ArgumentParser(prog="rcwbc", description="Rolling-contact whole-body control toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    check = sub.add_parser("check", help="Actuation validity over random configurations")
    check.add_argument("model", help="Model file or bundled model name")
    check.add_argument("--seed", type=int, default=0)
    check.set_defaults(handler=execute_check)

    simulate = sub.add_parser("simulate", help="Run a closed-loop scenario")
    simulate.add_argument("scenario", help="Scenario file or bundled scenario name")
    simulate.add_argument("-o", "--output", default="out", help="Output directory (created when missing)")
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--log-every", type=int, default=1, help="Log every n-th control tick")
    simulate.add_argument("--duration", type=float, default=None, help="Override the scenario length [s]")
    simulate.set_defaults(handler=execute_simulate)

    cii = sub.add_parser("cii", help="Centroidal inertia isotropy sweep")
    cii.add_argument("model", help="Model file or bundled model name")
    cii.add_argument("second_model", nargs="?", default=None, help="Second model for the paired comparison")
    cii.add_argument("--sweep", default="step_grid", help="Sweep file or bundled sweep name")
    cii.add_argument("-o", "--output", default="out")
    cii.add_argument("--workers", type=int, default=workers)
    cii.set_defaults(handler=execute_cii)
    return parser


def main(argv=None) -> int:
    settings = load_settings()
    configure_logging(settings)
    args = build_parser(settings).parse_args(argv)
    logger.info(f"Starting rcwbc {args.command}...")

    try:
        return args.handler(args)
    except RcwbcError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
