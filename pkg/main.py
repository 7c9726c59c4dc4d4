"""
main.py - Command-line entry point for chainbench.

Subcommands: run, sweep, security, replay, recipes. Exit codes are listed in
constants.py (0 ok, 1 assertion failed, 2 config error, 3 runtime error,
4 replay mismatch).
"""

import argparse
import logging
import sys
from typing import Dict, List, Optional, Sequence, Tuple

import strings
from benchmark_driver import THROUGHPUT_ORDER, run_many, security_run, sweep
from constants import APP_NAME, APP_VERSION, EXIT_ASSERTION_FAILED, EXIT_CONFIG_ERROR, EXIT_OK, EXIT_REPLAY_MISMATCH
from exceptions import exception_handler
from experiment_config import (
    ConfigError,
    ExperimentConfig,
    Variant,
    apply_overrides,
    build_plan,
    expand_plans,
    list_recipes,
    load_config,
    output_dir,
    plan_from_trace_header,
    with_variant,
)
from logging_config import configure_logging
from metrics import MetricsReport
from reports import report_digest, write_run, write_sweep
from utils import read_json_lines, resolve_output_dir

logger = logging.getLogger(__name__)


def parse_range(value: str) -> List[int]:
    """Accept "2,4,8" or "start:stop[:step]" (stop inclusive)."""
    try:
        if ":" in value:
            parts = [int(p) for p in value.split(":")]
            if len(parts) not in (2, 3):
                raise ValueError
            start, stop = parts[0], parts[1]
            step = parts[2] if len(parts) == 3 else 1
            if step < 1:
                raise ValueError
            return list(range(start, stop + 1, step))
        return [int(p) for p in value.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(strings.ERROR_BAD_RANGE.format(value))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=APP_NAME, description=strings.APP_DESCRIPTION)
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {APP_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Config file path or bundled recipe name")
    common.add_argument("--seed", type=int, action="append", help="Seed (repeatable); default from config")
    common.add_argument("--out", help="Output directory (CHAINBENCH_OUT_DIR overrides)")
    common.add_argument("--jobs", type=int, default=1, help="Worker processes for independent runs")
    common.add_argument("--assert", dest="assert_checks", action="store_true",
                        help="Fail (exit 1) when an enabled assertion or expectation is breached")
    common.add_argument("--trace", action="store_true", help="Write the event trace for replay")
    common.add_argument("--variant", action="append", help="Only run the named variant(s)")
    common.add_argument("--verbose", "-v", action="store_true", help="Echo progress to stderr")

    sub.add_parser("run", parents=[common], help="Run an experiment")
    sweep_parser = sub.add_parser("sweep", parents=[common], help="Scalability sweep")
    sweep_parser.add_argument("--dimension", choices=("nodes", "clients", "both"))
    sweep_parser.add_argument("--range", dest="values", help="Values: a,b,c or start:stop[:step]")
    sub.add_parser("security", parents=[common], help="Partition run with fork-delta series and verdict")

    replay = sub.add_parser("replay", help="Re-execute a trace and compare hashes")
    replay.add_argument("trace_path")
    replay.add_argument("--verbose", "-v", action="store_true")

    recipes = sub.add_parser("recipes", help="List bundled recipes")
    recipes.add_argument("--verbose", "-v", action="store_true")
    return parser


# Helpers

def _load(args) -> ExperimentConfig:
    config = load_config(args.config)
    if args.trace:
        config = apply_overrides(config, {"output.trace": True})
    if args.variant:
        unknown = [name for name in args.variant if name not in {v.name for v in config.variants}]
        if unknown:
            raise ConfigError(f"variants: unknown variant(s) {unknown}")
        selected = [v for v in config.variants if v.name in args.variant]
        config = config.model_copy(update={"variants": selected})
    return config


def _seeds(args, config: ExperimentConfig) -> List[int]:
    return args.seed if args.seed else list(config.run.seeds)


def _print_run(report: MetricsReport) -> None:
    label = f"{report.name}-{report.variant}" if report.variant else report.name
    print(strings.STATUS_RUN_DONE.format(label, report.seed, report.committed, report.throughput,
                                         report.latency.p50, report.security.delta))
    if report.stall.stalled:
        print(strings.STATUS_STALLED.format(label, report.seed, report.stall.last_commit_s))


def evaluate(config: ExperimentConfig, results: Sequence[Tuple[Optional[Variant], MetricsReport]]) -> List[str]:
    """
    Collect every breached assertion and variant expectation.

    Assertions listed in the config are checked; a config listing none checks
    every invariant the reports carry.
    """
    enabled = set(config.assertions)
    failures = []
    for variant, report in results:
        for check, passed in sorted(report.checks.items()):
            if (not enabled or check in enabled) and not passed:
                failures.append(strings.ASSERTION_FAILED.format(check, report.name, report.seed))
        if variant is not None:
            for key, expected, observed in variant.expect.failures(report):
                failures.append(strings.EXPECTATION_FAILED.format(
                    key, expected, f"{report.name}-{variant.name}", report.seed, observed))
    if THROUGHPUT_ORDER in enabled:
        by_seed: Dict[int, List[MetricsReport]] = {}
        for _, report in results:
            by_seed.setdefault(report.seed, []).append(report)
        for seed, reports in sorted(by_seed.items()):
            rates = [r.throughput for r in reports]
            if any(a < b for a, b in zip(rates, rates[1:])):
                failures.append(strings.ASSERTION_FAILED.format(THROUGHPUT_ORDER, config.name, seed))
    return failures


def _finish(args, failures: List[str]) -> int:
    for failure in failures:
        logger.warning(failure)
        print(failure, file=sys.stderr)
    if args.assert_checks and failures:
        return EXIT_ASSERTION_FAILED
    return EXIT_OK


# Commands

def cmd_run(args, security: bool = False) -> int:
    config = _load(args)
    out = resolve_output_dir(output_dir(config, args.out))
    expanded = expand_plans(config, _seeds(args, config), out)
    if security:
        reports = run_many([plan for _, plan in expanded], args.jobs, runner=security_run)
    else:
        reports = run_many([plan for _, plan in expanded], args.jobs)
    results = []
    for (variant, _), report in zip(expanded, reports):
        write_run(report, out, security=security)
        _print_run(report)
        if security:
            share = report.analytics.get("partition", {}).get("fork_share", 0.0)
            verdict = strings.VERDICT_FORK_EXPOSED if report.fork_exposed else strings.VERDICT_FORK_FREE
            label = f"{report.name}-{report.variant}" if report.variant else report.name
            print(strings.STATUS_SECURITY_VERDICT.format(label, report.seed, verdict,
                                                         report.security.delta, share))
        results.append((variant, report))
    print(strings.STATUS_WRITTEN.format(out))
    return _finish(args, evaluate(config, results))


def cmd_security(args) -> int:
    return cmd_run(args, security=True)


def cmd_sweep(args) -> int:
    config = _load(args)
    dimension = args.dimension or (config.sweep.dimension if config.sweep else None)
    values = parse_range(args.values) if args.values else (config.sweep.values if config.sweep else None)
    if not dimension or not values:
        raise ConfigError(strings.ERROR_NO_SWEEP.format(config.name))
    out = resolve_output_dir(output_dir(config, args.out))
    variants: List[Optional[Variant]] = list(config.variants) or [None]
    failures = []
    for variant in variants:
        resolved = with_variant(config, variant)
        name = f"{config.name}-{variant.name}" if variant else config.name
        resolved = resolved.model_copy(update={"name": name})
        for seed in _seeds(args, config):
            reports = sweep(build_plan(resolved, seed), dimension, values, args.jobs)
            for report in reports:
                write_run(report, out)
                _print_run(report)
            write_sweep(reports, out, name, seed)
            failures += evaluate(resolved, [(None, r) for r in reports])
    print(strings.STATUS_WRITTEN.format(out))
    return _finish(args, failures)


def cmd_replay(args) -> int:
    records = list(read_json_lines(args.trace_path))
    header = next((r for r in records if r.get("type") == "header"), None)
    footer = next((r for r in records if r.get("type") == "footer"), None)
    if header is None:
        raise ConfigError(strings.ERROR_TRACE_HEADER.format(args.trace_path))
    plan = plan_from_trace_header(header)
    report = run_many([plan])[0]
    digest = report_digest(report)
    mismatches = []
    if footer is None or footer.get("trace_hash") != report.trace_hash:
        mismatches.append("trace hash")
    if footer is None or footer.get("report_hash") != digest:
        mismatches.append("report hash")
    if mismatches:
        print(strings.ERROR_REPLAY_MISMATCH.format(", ".join(mismatches)), file=sys.stderr)
        return EXIT_REPLAY_MISMATCH
    print(strings.STATUS_REPLAY_OK.format(report.trace_hash, digest))
    return EXIT_OK


def cmd_recipes(args) -> int:
    for name, description in list_recipes():
        print(f"{name:20s} {description}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "security": cmd_security,
    "replay": cmd_replay,
    "recipes": cmd_recipes,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors, matching the config error code
        return e.code if isinstance(e.code, int) else EXIT_CONFIG_ERROR

    configure_logging(verbose=getattr(args, "verbose", False))
    exception_handler.install_global_handler()
    logger.info(f"{APP_NAME} {APP_VERSION}: {args.command}")
    try:
        return COMMANDS[args.command](args)
    except Exception as e:
        return exception_handler.handle_error(e, context=args.command)


if __name__ == "__main__":
    sys.exit(main())
