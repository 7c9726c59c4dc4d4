"""
experiment_config.py - Experiment config schema, recipe lookup and plan building.

Configs are JSON documents with one section per module. Every model forbids
unknown keys; times are seconds of simulated time and become ticks in the plan.
"""

import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from packaging.specifiers import SpecifierSet
from packaging.version import InvalidVersion, Version
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from benchmark_driver import RunPlan, Topology
from constants import (
    CONFIG_SCHEMA_VERSION,
    DEFAULT_ACCOUNTS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_CHECKPOINT_INTERVAL,
    DEFAULT_CONFIRMATION_DEPTH,
    DEFAULT_DELAY_BASE_TICKS,
    DEFAULT_DELAY_JITTER_TICKS,
    DEFAULT_NUM_BUCKETS,
    DEFAULT_QUEUE_CAPACITY,
    DEFAULT_VIEW_CHANGE_BACKOFF_CAP,
    DEFAULT_ZIPF_THETA,
    RECIPES_DIR,
    SUPPORTED_SCHEMA_SPECIFIER,
)
from consensus import POA, POS, POW, SEQUENCER, ConsensusConfig, pos_difficulty, pow_difficulty
from netsim import DelayModel, FaultSchedule, PartitionSpec
from utils import resource_path, to_ticks
from workloads import WorkloadSpec

logger = logging.getLogger(__name__)

RECIPE_SUFFIX = ".json"


class ConfigError(Exception):
    """Raised for unreadable or invalid experiment configs; the message names the field path."""
    pass


class StrictModel(BaseModel):
    model_config = {"extra": "forbid"}


class TopologySection(StrictModel):
    nodes: int = Field(default=4, ge=1)
    authorities: Optional[List[int]] = None
    exec_ticks_per_step: float = Field(default=0.0, ge=0.0)
    admission_rate: Optional[float] = Field(default=None, gt=0.0)
    num_buckets: int = Field(default=DEFAULT_NUM_BUCKETS, ge=1)
    signature_scheme: Literal["keyed-hash", "ed25519"] = "keyed-hash"


class ConsensusSection(StrictModel):
    engine: Literal["pow", "pos", "poa", "pbft", "sequencer"] = "pbft"
    block_interval_s: float = Field(default=10.0, gt=0.0, description="Network-wide PoW/PoS target interval")
    difficulty_t: Optional[int] = Field(default=None, gt=0)
    batch_size: int = Field(default=DEFAULT_BATCH_SIZE, ge=1)
    batch_timeout_s: float = Field(default=0.1, gt=0.0)
    step_duration_s: float = Field(default=1.0, gt=0.0)
    view_change_timeout_s: float = Field(default=2.0, gt=0.0)
    view_change_backoff_cap: int = Field(default=DEFAULT_VIEW_CHANGE_BACKOFF_CAP, ge=1)
    checkpoint_interval: int = Field(default=DEFAULT_CHECKPOINT_INTERVAL, ge=1)
    confirmation_depth: int = Field(default=DEFAULT_CONFIRMATION_DEPTH, ge=0)
    stake_function: Literal["nxt", "constant"] = "nxt"
    stakes: List[int] = Field(default_factory=list)
    byzantine: Dict[int, Literal["equivocate", "withhold", "fork", "rogue"]] = Field(default_factory=dict)


class DelaySection(StrictModel):
    kind: Literal["uniform", "normal"] = "uniform"
    base_ticks: int = Field(default=DEFAULT_DELAY_BASE_TICKS, ge=0)
    jitter_ticks: int = Field(default=DEFAULT_DELAY_JITTER_TICKS, ge=0)
    mean_ticks: float = Field(default=3.0, ge=0.0)
    std_ticks: float = Field(default=1.0, ge=0.0)


class NetworkSection(StrictModel):
    channel: Literal["shared", "segregated"] = "shared"
    queue_capacity: Optional[int] = Field(default=DEFAULT_QUEUE_CAPACITY, ge=1)
    service_rate: Optional[float] = Field(default=None, gt=0.0, description="Messages per tick")
    delay: DelaySection = Field(default_factory=DelaySection)


class NodeEvent(StrictModel):
    node: int = Field(ge=0)
    at_s: float = Field(ge=0.0)


class PartitionSection(StrictModel):
    side_a: List[int]
    side_b: Optional[List[int]] = None
    start_s: float = Field(ge=0.0)
    duration_s: float = Field(ge=0.0)


class FaultsSection(StrictModel):
    crashes: List[NodeEvent] = Field(default_factory=list)
    restarts: List[NodeEvent] = Field(default_factory=list)
    partitions: List[PartitionSection] = Field(default_factory=list)
    corruption_rate: float = Field(default=0.0, ge=0.0, le=1.0)


class WorkloadSection(StrictModel):
    kind: Literal["ycsb", "smallbank", "donothing", "ioheavy", "cpuheavy", "analytics", "doubler"] = "ycsb"
    clients: int = Field(default=1, ge=0)
    threads_per_client: int = Field(default=1, ge=1)
    ops: int = Field(default=0, ge=0)
    read_ratio: float = Field(default=0.5, ge=0.0, le=1.0)
    key_distribution: Literal["uniform", "zipfian"] = "zipfian"
    zipf_theta: float = Field(default=DEFAULT_ZIPF_THETA, gt=0.0)
    record_count: int = Field(default=1000, ge=1)
    request_rate: Optional[float] = Field(default=None, gt=0.0, description="ops/s per client; null saturates")
    blocking: bool = False
    request_timeout_s: float = Field(default=30.0, gt=0.0)
    smallbank_mix: Literal["transfers", "full"] = "transfers"
    overdraft_ratio: float = Field(default=0.0, ge=0.0, le=1.0)
    accounts: int = Field(default=DEFAULT_ACCOUNTS, ge=2)
    ioheavy_ops: int = Field(default=100, ge=1)
    cpuheavy_size: int = Field(default=1000, ge=1)
    preload_blocks: int = Field(default=0, ge=0)
    preload_txns_per_block: float = Field(default=3.0, ge=0.0)
    analytics_probes: int = Field(default=0, ge=0)


class RunSection(StrictModel):
    duration_s: float = Field(default=60.0, gt=0.0)
    stall_horizon_s: float = Field(default=30.0, gt=0.0)
    sample_interval_s: float = Field(default=1.0, gt=0.0)
    seeds: List[int] = Field(default_factory=lambda: [0])


class OutputSection(StrictModel):
    dir: Optional[str] = None
    trace: bool = False
    chain: bool = False
    receipts: bool = False
    state: bool = False


class SweepSection(StrictModel):
    dimension: Literal["nodes", "clients", "both"]
    values: List[int] = Field(min_length=1)

    @field_validator("values")
    @classmethod
    def _positive(cls, values):
        if any(v < 1 for v in values):
            raise ValueError("sweep values must be positive")
        return values


class Expectation(StrictModel):
    stalled: Optional[bool] = None
    halted_after_faults: Optional[bool] = None
    rate_reduced: Optional[bool] = None
    fork_exposed: Optional[bool] = None
    min_committed: Optional[int] = None

    def failures(self, report) -> List[Tuple[str, Any, Any]]:
        """Return (name, expected, observed) for every unmet expectation."""
        observed = {
            "stalled": report.stall.stalled,
            "halted_after_faults": report.fault.halted_after_faults,
            "rate_reduced": report.fault.rate_reduced,
            "fork_exposed": report.fork_exposed,
        }
        failed = [(key, getattr(self, key), value) for key, value in observed.items()
                  if getattr(self, key) is not None and getattr(self, key) != value]
        if self.min_committed is not None and report.committed < self.min_committed:
            failed.append(("min_committed", self.min_committed, report.committed))
        return failed


class Variant(StrictModel):
    name: str = Field(min_length=1)
    overrides: Dict[str, Any] = Field(default_factory=dict)
    expect: Expectation = Field(default_factory=Expectation)


class ExperimentConfig(StrictModel):
    schema_version: str = CONFIG_SCHEMA_VERSION
    name: str = Field(min_length=1)
    description: str = ""
    topology: TopologySection = Field(default_factory=TopologySection)
    consensus: ConsensusSection = Field(default_factory=ConsensusSection)
    network: NetworkSection = Field(default_factory=NetworkSection)
    faults: FaultsSection = Field(default_factory=FaultsSection)
    workload: WorkloadSection = Field(default_factory=WorkloadSection)
    run: RunSection = Field(default_factory=RunSection)
    output: OutputSection = Field(default_factory=OutputSection)
    assertions: List[Literal["conservation", "finalized_fork_free", "replica_agreement",
                             "analytics_oracle", "throughput_order"]] = Field(default_factory=list)
    sweep: Optional[SweepSection] = None
    variants: List[Variant] = Field(default_factory=list)

    @field_validator("schema_version")
    @classmethod
    def _supported_schema(cls, value: str) -> str:
        try:
            version = Version(value)
        except InvalidVersion:
            raise ValueError(f"not a version: {value!r}")
        if version not in SpecifierSet(SUPPORTED_SCHEMA_SPECIFIER):
            raise ValueError(f"schema {value} is outside the supported range {SUPPORTED_SCHEMA_SPECIFIER}")
        return value

    @model_validator(mode="after")
    def _node_references(self):
        n = self.topology.nodes
        referenced = list(self.topology.authorities or [])
        referenced += [e.node for e in self.faults.crashes + self.faults.restarts]
        referenced += list(self.consensus.byzantine)
        for p in self.faults.partitions:
            referenced += p.side_a + (p.side_b or [])
        bad = sorted({node for node in referenced if node >= n or node < 0})
        if bad:
            raise ValueError(f"nodes {bad} are outside 0..{n - 1}")
        names = [v.name for v in self.variants]
        if len(names) != len(set(names)):
            raise ValueError("variant names must be unique")
        return self

    def variant(self, name: str) -> Variant:
        for v in self.variants:
            if v.name == name:
                return v
        raise ConfigError(f"variants: no variant named {name!r}")


# Loading

def _format_validation_error(error: ValidationError) -> str:
    lines = []
    for issue in error.errors():
        path = ".".join(str(part) for part in issue["loc"]) or "<root>"
        lines.append(f"{path}: {issue['msg']}")
    return "; ".join(lines)


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    """
    Validate a config document.

    Raises:
        ConfigError: Listing every offending field path
    """
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a JSON object")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e))


def recipes_dir() -> Path:
    return Path(resource_path(RECIPES_DIR))


def list_recipes() -> List[Tuple[str, str]]:
    """Return (name, description) of every bundled recipe, sorted by name."""
    result = []
    for path in sorted(recipes_dir().glob(f"*{RECIPE_SUFFIX}")):
        try:
            with open(path, "r", encoding="utf-8") as f:
                description = json.load(f).get("description", "")
        except (OSError, json.JSONDecodeError) as e:
            logger.warning(f"Skipping unreadable recipe {path}: {e}")
            continue
        result.append((path.stem, description))
    return result


def resolve_config_path(path_or_name: str) -> Path:
    path = Path(path_or_name)
    if path.is_file():
        return path
    recipe = recipes_dir() / f"{path_or_name}{RECIPE_SUFFIX}"
    if recipe.is_file():
        return recipe
    raise ConfigError(f"config: no such file or bundled recipe: {path_or_name}")


def load_config(path_or_name: str) -> ExperimentConfig:
    """Load a config file, or a bundled recipe by name."""
    path = resolve_config_path(path_or_name)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}")
    except OSError as e:
        raise ConfigError(f"{path}: {e}")
    logger.info(f"Loaded experiment config {path}")
    return parse_config(data)


def apply_overrides(config: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    """
    Return a new config with dotted-key overrides applied (e.g. "network.channel").

    Raises:
        ConfigError: Unknown section or invalid value
    """
    data = config.model_dump(mode="json")
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        target = data
        for part in parts[:-1]:
            child = target.get(part) if isinstance(target, dict) else None
            if not isinstance(child, dict):
                raise ConfigError(f"{dotted}: unknown section {part!r}")
            target = child
        target[parts[-1]] = copy.deepcopy(value)
    return parse_config(data)


def with_variant(config: ExperimentConfig, variant: Optional[Variant]) -> ExperimentConfig:
    if variant is None:
        return config
    resolved = apply_overrides(config, variant.overrides)
    return resolved.model_copy(update={"variants": []})


# Plan building

def build_consensus(config: ExperimentConfig) -> ConsensusConfig:
    section = config.consensus
    n = config.topology.nodes
    interval = to_ticks(section.block_interval_s)
    authorities = tuple(config.topology.authorities) if config.topology.authorities else tuple(range(n))
    stakes = tuple(section.stakes)
    difficulty = section.difficulty_t
    if difficulty is None:
        if section.engine == POW:
            difficulty = pow_difficulty(interval, n)
        elif section.engine == POS:
            difficulty = pos_difficulty(interval, stakes or (1,) * n, section.stake_function)
        else:
            difficulty = pow_difficulty(interval, 1)
    if section.engine in (POA, SEQUENCER) and not authorities:
        raise ConfigError("topology.authorities: at least one authority is required")
    return ConsensusConfig(
        engine=section.engine,
        n_nodes=n,
        difficulty_t=difficulty,
        batch_size=section.batch_size,
        batch_timeout=to_ticks(section.batch_timeout_s),
        step_duration=to_ticks(section.step_duration_s),
        view_change_timeout=to_ticks(section.view_change_timeout_s),
        view_change_backoff_cap=section.view_change_backoff_cap,
        checkpoint_interval=section.checkpoint_interval,
        confirmation_depth=section.confirmation_depth,
        authorities=authorities,
        stake_function=section.stake_function,
        stakes=stakes,
        byzantine=tuple(sorted(section.byzantine.items())),
    )


def build_faults(config: ExperimentConfig) -> FaultSchedule:
    section = config.faults
    delay = config.network.delay
    everyone = set(range(config.topology.nodes))
    partitions = []
    for p in section.partitions:
        side_a = frozenset(p.side_a)
        side_b = frozenset(p.side_b) if p.side_b is not None else frozenset(everyone - side_a)
        partitions.append(PartitionSpec(side_a, side_b, to_ticks(p.start_s), to_ticks(p.duration_s)))
    return FaultSchedule(
        crashes=[(e.node, to_ticks(e.at_s)) for e in section.crashes],
        restarts=[(e.node, to_ticks(e.at_s)) for e in section.restarts],
        partitions=partitions,
        delay=DelayModel(delay.kind, delay.base_ticks, delay.jitter_ticks, delay.mean_ticks, delay.std_ticks),
        corruption_rate=section.corruption_rate,
    )


def build_workload(config: ExperimentConfig) -> WorkloadSpec:
    w = config.workload
    fields = w.model_dump(exclude={"request_timeout_s"})
    return WorkloadSpec(request_timeout=to_ticks(w.request_timeout_s), **fields)


def build_topology(config: ExperimentConfig) -> Topology:
    return Topology(
        nodes=config.topology.nodes,
        channel=config.network.channel,
        queue_capacity=config.network.queue_capacity,
        service_rate=config.network.service_rate,
        exec_ticks_per_step=config.topology.exec_ticks_per_step,
        admission_rate=config.topology.admission_rate,
        num_buckets=config.topology.num_buckets,
        signature_scheme=config.topology.signature_scheme,
    )


def build_plan(config: ExperimentConfig, seed: int, variant: Optional[str] = None,
               out_dir: Optional[Path] = None) -> RunPlan:
    """
    Resolve a config (already carrying any variant overrides) into a RunPlan.

    Trace and dump files are only requested when out_dir is given.
    """
    trace_path = None
    artifacts: Dict[str, str] = {}
    if out_dir is not None:
        stem = f"{config.name}-{variant}" if variant else config.name
        base = Path(out_dir) / f"{stem}-seed{seed}"
        if config.output.trace:
            trace_path = f"{base}-trace.jsonl"
        for kind in ("chain", "receipts", "state"):
            if getattr(config.output, kind):
                artifacts[kind] = f"{base}-{kind}.jsonl"
    return RunPlan(
        workload=build_workload(config),
        topology=build_topology(config),
        consensus=build_consensus(config),
        faults=build_faults(config),
        seed=seed,
        name=config.name,
        variant=variant,
        duration=to_ticks(config.run.duration_s),
        stall_horizon=to_ticks(config.run.stall_horizon_s),
        sample_interval=to_ticks(config.run.sample_interval_s),
        trace_path=trace_path,
        trace_header={"config": config.model_dump(mode="json")},
        artifacts=artifacts,
    )


def expand_plans(config: ExperimentConfig, seeds: List[int],
                 out_dir: Optional[Path] = None) -> List[Tuple[Optional[Variant], RunPlan]]:
    """One plan per (variant, seed); a config without variants yields the base run per seed."""
    variants: List[Optional[Variant]] = list(config.variants) or [None]
    plans = []
    for variant in variants:
        resolved = with_variant(config, variant)
        for seed in seeds:
            plans.append((variant, build_plan(resolved, seed, variant.name if variant else None, out_dir)))
    return plans


def plan_from_trace_header(header: Dict[str, Any]) -> RunPlan:
    """Rebuild the plan recorded in a trace header (no files are written on replay)."""
    try:
        config = parse_config(header["config"])
        seed = int(header["seed"])
    except KeyError as e:
        raise ConfigError(f"trace header: missing {e.args[0]!r}")
    return build_plan(config, seed, header.get("variant"))


def output_dir(config: ExperimentConfig, cli_out: Optional[str] = None) -> Optional[str]:
    """CLI --out wins over the config; utils.resolve_output_dir applies CHAINBENCH_OUT_DIR on top."""
    return cli_out or config.output.dir
