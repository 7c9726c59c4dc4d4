"""
strings.py - Centralized user-facing strings for chainbench.
"""

# General
APP_TITLE = "chainbench"
APP_DESCRIPTION = "Deterministic blockchain benchmarking on a simulated cluster"

# Error Messages
ERROR_CONFIG = "Configuration error: {0}"  # {0} = field path and message
ERROR_RUNTIME = "Simulation failed: {0}"  # {0} = error message
ERROR_REPORT = "Report error: {0}"  # {0} = error message
ERROR_UNEXPECTED = "Unexpected error: {0}. See the log file for details."  # {0} = error message
ERROR_REPLAY_MISMATCH = "Replay mismatch: {0}"  # {0} = which hash differs
ERROR_TRACE_HEADER = "Trace file {0} has no header record"  # {0} = path
ERROR_NO_SWEEP = "Config {0} has no sweep section and no --dimension/--range given"  # {0} = name
ERROR_BAD_RANGE = "Invalid --range {0}: expected a,b,c or start:stop[:step]"  # {0} = value

# Status Messages
STATUS_RUN_DONE = "{0} seed {1}: {2} committed, {3} tx/s, p50 {4}s, delta {5}"
STATUS_WRITTEN = "Reports written to {0}"  # {0} = directory
STATUS_SECURITY_VERDICT = "{0} seed {1}: {2} (delta {3}, share {4})"
STATUS_REPLAY_OK = "Replay matches: trace {0}, report {1}"
STATUS_STALLED = "{0} seed {1}: liveness stall, last commit at {2}s"

# Verdicts
VERDICT_FORK_EXPOSED = "fork-exposed"
VERDICT_FORK_FREE = "fork-free"

# Assertion Messages
ASSERTION_FAILED = "Assertion {0} failed for {1} seed {2}"  # {0} = check, {1} = run, {2} = seed
EXPECTATION_FAILED = "Expected {0}={1} for {2} seed {3}, got {4}"
ASSERTION_SUMMARY = "{0} of {1} checks passed"
