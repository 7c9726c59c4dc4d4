"""
reports.py - JSON summaries and gnuplot-friendly CSV series.

File naming under the output directory:
    <name>[-<variant>]-seed<seed>.json       summary
    <name>[-<variant>]-seed<seed>.csv        per-second samples
    <name>-seed<seed>-sweep.csv              one row per sweep point
    <name>[-<variant>]-seed<seed>-security.csv   fork-delta series
"""

import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from metrics import MetricsReport

logger = logging.getLogger(__name__)

SAMPLE_COLUMNS = ("t", "committed", "throughput", "latency_mean", "total_blocks", "main_blocks", "delta")
SECURITY_COLUMNS = ("t", "total_blocks", "main_blocks", "delta", "ratio")
SWEEP_COLUMNS = ("variant", "nodes", "clients", "throughput", "latency_p50", "latency_p95", "latency_p99",
                 "latency_max", "committed", "stalled", "view_changes", "delta")


class ReportError(Exception):
    """Raised when a report file cannot be written or read."""
    pass


def canonical_json(data: Dict[str, Any]) -> str:
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def report_digest(report: MetricsReport) -> str:
    """SHA-256 over the canonical summary; replays compare this."""
    return hashlib.sha256(canonical_json(report.to_dict()).encode("utf-8")).hexdigest()


def report_stem(name: str, seed: int, variant: Optional[str] = None) -> str:
    base = f"{name}-{variant}" if variant else name
    return f"{base}-seed{seed}"


def artifact_path(out_dir: Path, name: str, seed: int, variant: Optional[str], suffix: str) -> Path:
    return Path(out_dir) / f"{report_stem(name, seed, variant)}{suffix}"


def _write_csv(path: Path, columns: Sequence[str], rows) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            writer.writerows(rows)
    except OSError as e:
        raise ReportError(f"Failed to write {path}: {e}")


def write_summary(report: MetricsReport, out_dir: Path) -> Path:
    path = artifact_path(out_dir, report.name, report.seed, report.variant, ".json")
    try:
        path.write_text(canonical_json(report.to_dict()), encoding="utf-8")
    except OSError as e:
        raise ReportError(f"Failed to write {path}: {e}")
    logger.debug(f"Summary written to {path}")
    return path


def write_samples(report: MetricsReport, out_dir: Path) -> Path:
    path = artifact_path(out_dir, report.name, report.seed, report.variant, ".csv")
    _write_csv(path, SAMPLE_COLUMNS, ([getattr(s, c) for c in SAMPLE_COLUMNS] for s in report.samples))
    return path


def write_security(report: MetricsReport, out_dir: Path) -> Path:
    path = artifact_path(out_dir, report.name, report.seed, report.variant, "-security.csv")
    rows = (
        [s.t, s.total_blocks, s.main_blocks, s.delta,
         round(1.0 if s.total_blocks == 0 else s.main_blocks / s.total_blocks, 6)]
        for s in report.samples
    )
    _write_csv(path, SECURITY_COLUMNS, rows)
    return path


def sweep_row(report: MetricsReport) -> list:
    lat = report.latency
    return [report.variant or "", report.nodes, report.clients, report.throughput, lat.p50, lat.p95, lat.p99,
            lat.max, report.committed, int(report.stall.stalled), report.view_changes, report.security.delta]


def write_sweep(reports: Sequence[MetricsReport], out_dir: Path, name: str, seed: int) -> Path:
    path = Path(out_dir) / f"{report_stem(name, seed)}-sweep.csv"
    _write_csv(path, SWEEP_COLUMNS, (sweep_row(r) for r in reports))
    return path


def write_run(report: MetricsReport, out_dir: Path, security: bool = False) -> Dict[str, Path]:
    """Write every file of one run; returns them by kind."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {"summary": write_summary(report, out_dir), "samples": write_samples(report, out_dir)}
    if security:
        written["security"] = write_security(report, out_dir)
    return written


def read_summary(path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ReportError(f"Failed to read {path}: {e}")
