"""
src/rcwbc/services/report_service.py
Writes simulation and CII artifacts.
Features:
- Trajectory log as a flat CSV table (one row per logged control tick).
- Per-phase simulation summary and CII report as YAML.
- Per-configuration CII table as CSV.
- Output directories are created on demand.
"""
import csv
from pathlib import Path

import yaml
from loguru import logger

from rcwbc.services.cii_service import CiiReport
from rcwbc.services.simulation_service import TrajectoryLog

LOG_FILE = "log.csv"
SUMMARY_FILE = "summary.yaml"
CII_TABLE = "cii.csv"
CII_REPORT = "cii_report.yaml"


class ReportService:
    def __init__(self, output_dir):
        self.output_dir = Path(output_dir)

    def _prepare(self, name) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        return self.output_dir / name

    def _write_yaml(self, name, document) -> Path:
        path = self._prepare(name)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(document, f, sort_keys=False)
        return path

    # --- SIMULATION ---
    def write_trajectory(self, log: TrajectoryLog):
        """log.csv plus summary.yaml; also used for truncated runs, the failure goes into the summary."""
        try:
            path = self._prepare(LOG_FILE)
            with open(path, "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(log.columns())
                for row in log.rows():
                    writer.writerow(row)
            summary = self._write_yaml(SUMMARY_FILE, log.summary())
        except OSError as e:
            logger.error(f"Writing trajectory report failed: {e}")
            raise
        logger.success(f"Trajectory log ({len(log)} rows) written to {path}")
        return path, summary

    # --- CII ---
    def write_cii(self, report: CiiReport):
        try:
            path = self._prepare(CII_TABLE)
            with open(path, "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["model", "grid_index", "sample_index", "forward", "lateral", "cii"])
                for result in (report.proximal, report.collocated):
                    if result is None:
                        continue
                    for s in result.samples:
                        writer.writerow([result.model_name, s.grid_index, s.sample_index, s.forward, s.lateral,
                                         repr(s.value)])
            summary = self._write_yaml(CII_REPORT, report.summary())
        except OSError as e:
            logger.error(f"Writing CII report failed: {e}")
            raise
        logger.success(f"CII table written to {path}")
        return path, summary
