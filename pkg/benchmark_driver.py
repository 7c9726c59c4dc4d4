"""
benchmark_driver.py - Builds a simulated cluster, drives its clients and collects the report.

A RunPlan is everything one seeded run needs. run() executes it on a fresh
simpy clock; sweep() and run_many() fan plans out, optionally across worker
processes, each run staying single-threaded inside.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import simpy

from constants import APP_VERSION, DEFAULT_NUM_BUCKETS, DEFAULT_QUEUE_CAPACITY, TICKS_PER_SECOND
from consensus import POS, POW, ConsensusConfig, ConsensusError
from builtin_contracts import Smallbank
from contracts import COMMITTED, Receipt, write_receipts
from ledger import FINALIZED, Block, dump_chain
from metrics import MetricsCollector, MetricsReport
from netsim import SHARED, FaultSchedule, NetSimError, SimNetwork, TraceSink
from node import Node, NodeSettings
from signatures import KeyRegistry, KeyedHashScheme
from workloads import (
    ANALYTICS,
    MIX_TRANSFERS,
    SMALLBANK,
    WorkloadError,
    WorkloadSpec,
    account_name,
    build_genesis,
    build_preload,
    expected_smallbank_total,
    make_clients,
    workload_contract,
)
from utils import to_seconds

logger = logging.getLogger(__name__)

NODES = "nodes"
CLIENTS = "clients"
BOTH = "both"
SWEEP_DIMENSIONS = (NODES, CLIENTS, BOTH)

CONSERVATION = "conservation"
FINALIZED_FORK_FREE = "finalized_fork_free"
REPLICA_AGREEMENT = "replica_agreement"
ANALYTICS_ORACLE = "analytics_oracle"
THROUGHPUT_ORDER = "throughput_order"
ASSERTIONS = (CONSERVATION, FINALIZED_FORK_FREE, REPLICA_AGREEMENT, ANALYTICS_ORACLE, THROUGHPUT_ORDER)

# Seed stream ids; clients use 1000 + client id
NETWORK_STREAM = 0
PRELOAD_STREAM = 2
PROBE_STREAM = 3
NODE_STREAM_BASE = 100

HEAL_SETTLE_TICKS = 30 * TICKS_PER_SECOND


class BenchmarkError(Exception):
    """Raised when a run plan is inconsistent or the simulation fails."""
    pass


@dataclass(frozen=True)
class Topology:
    nodes: int = 4
    channel: str = SHARED
    queue_capacity: Optional[int] = DEFAULT_QUEUE_CAPACITY
    service_rate: Optional[float] = None
    exec_ticks_per_step: float = 0.0
    admission_rate: Optional[float] = None
    num_buckets: int = DEFAULT_NUM_BUCKETS
    signature_scheme: str = KeyedHashScheme.name


@dataclass(frozen=True)
class RunPlan:
    """One seeded run. Times are ticks."""
    workload: WorkloadSpec
    topology: Topology
    consensus: ConsensusConfig
    faults: FaultSchedule = field(default_factory=FaultSchedule)
    seed: int = 0
    name: str = "run"
    variant: Optional[str] = None
    duration: int = 60 * TICKS_PER_SECOND
    stall_horizon: int = 30 * TICKS_PER_SECOND
    sample_interval: int = TICKS_PER_SECOND
    trace_path: Optional[str] = None
    trace_header: Dict[str, Any] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        try:
            self.workload.validate()
            self.consensus.validate()
            self.faults.validate()
        except (WorkloadError, ConsensusError, NetSimError) as e:
            raise BenchmarkError(str(e)) from e
        if self.topology.nodes != self.consensus.n_nodes:
            raise BenchmarkError(
                f"Topology has {self.topology.nodes} nodes but consensus expects {self.consensus.n_nodes}")
        if self.duration <= 0 or self.sample_interval <= 0:
            raise BenchmarkError("duration and sample_interval must be positive")
        for node, _ in self.faults.crashes + self.faults.restarts:
            if not 0 <= node < self.topology.nodes:
                raise BenchmarkError(f"Fault targets unknown node {node}")


def _last_fault_time(faults: FaultSchedule) -> Optional[int]:
    times = [t for _, t in faults.crashes + faults.restarts]
    times += [p.start for p in faults.partitions] + [p.end for p in faults.partitions]
    return max(times) if times else None


class ConservationMonitor:
    """
    Checks the Smallbank money total on every honest node after each executed block.

    Each node's total is updated from the accounts its block wrote; a rollback
    makes that node's next block rescan every account.
    """

    def __init__(self, nodes: Sequence[Node], accounts: Sequence[str], contract: str):
        self.nodes = nodes
        self.accounts = list(accounts)
        self.contract = contract
        self.expected = expected_smallbank_total(self.accounts)
        self._balances: Dict[int, Dict[str, int]] = {}
        self._totals: Dict[int, int] = {}
        self.blocks_checked = 0
        # (node id, height, total) per failed check
        self.violations: List[Tuple[int, int, int]] = []

    @property
    def holds(self) -> bool:
        return not self.violations

    def balance_of(self, node: Node, acct: str) -> int:
        return node.runtime.query(self.contract, "balance", (acct,))

    def block_executed(self, node_id: int, block: Block, receipts: List[Receipt]) -> None:
        node = self.nodes[node_id]
        if not node.honest:
            return
        balances = self._balances.get(node_id)
        if balances is None:
            balances = {acct: self.balance_of(node, acct) for acct in self.accounts}
            self._balances[node_id] = balances
            self._totals[node_id] = sum(balances.values())
        else:
            touched = {Smallbank.account_of(key) for r in receipts for key in r.state_keys_written}
            for acct in touched & balances.keys():
                current = self.balance_of(node, acct)
                self._totals[node_id] += current - balances[acct]
                balances[acct] = current
        self.blocks_checked += 1
        total = self._totals[node_id]
        if total != self.expected:
            self.violations.append((node_id, block.height, total))
            logger.warning(f"Node {node_id} holds {total} across accounts after block {block.height}, "
                           f"expected {self.expected}")

    def state_rolled_back(self, node_id: int, height: int) -> None:
        self._balances.pop(node_id, None)


class Simulation:
    """The wired-up cluster of one plan; kept for post-run inspection."""

    def __init__(self, plan: RunPlan):
        plan.validate()
        self.plan = plan
        seed = plan.seed
        topology = plan.topology
        self.env = simpy.Environment()
        self.registry = KeyRegistry(topology.signature_scheme, seed)
        header = None
        if plan.trace_path:
            header = {"seed": seed, "name": plan.name, "variant": plan.variant, "version": APP_VERSION,
                      **plan.trace_header}
        self.trace = TraceSink(plan.trace_path, header)
        self.network = SimNetwork(self.env, topology.nodes, self.registry,
                                  np.random.default_rng([seed, NETWORK_STREAM]),
                                  channel=topology.channel,
                                  queue_capacity=topology.queue_capacity,
                                  service_rate=topology.service_rate,
                                  faults=plan.faults, trace=self.trace)
        self.genesis = build_genesis(topology.num_buckets, self.registry)
        self.collector = MetricsCollector(self.genesis, plan.duration, plan.stall_horizon,
                                          plan.faults.first_fault_time, _last_fault_time(plan.faults))
        settings = NodeSettings(plan.consensus, topology.exec_ticks_per_step, topology.admission_rate,
                                num_buckets=topology.num_buckets)
        self.nodes = [
            Node(i, settings, self.network, self.registry, self.genesis,
                 np.random.default_rng([seed, NODE_STREAM_BASE + i]), self.collector)
            for i in range(topology.nodes)
        ]
        self.monitor: Optional[ConservationMonitor] = None
        if plan.workload.kind == SMALLBANK and plan.workload.smallbank_mix == MIX_TRANSFERS:
            accounts = [account_name(i) for i in range(plan.workload.accounts)]
            self.monitor = ConservationMonitor(self.nodes, accounts, workload_contract(SMALLBANK))
            self.collector.execute_listeners.append(self.monitor.block_executed)
            self.collector.rollback_listeners.append(self.monitor.state_rolled_back)
        self.preloaded = 0
        if plan.workload.preload_blocks:
            blocks = build_preload(self.genesis, plan.workload, np.random.default_rng([seed, PRELOAD_STREAM]),
                                   self.registry, topology.num_buckets)
            for node in self.nodes:
                node.preload(blocks)
            self.preloaded = len(blocks)
        self.clients = make_clients(plan.workload, self.network, self.registry, seed, plan.duration,
                                    topology.nodes, self.collector.txn_submitted)
        self.collector.confirm_listeners.append(lambda c, txn: self.clients[c].confirmed(txn.txn_id))

    def _sample(self) -> None:
        self.collector.sample(self.network.now)
        if self.network.now + self.plan.sample_interval < self.plan.duration:
            self.network.schedule(self.plan.sample_interval, self._sample)

    def execute(self) -> None:
        plan = self.plan
        logger.info(f"Starting {plan.name} ({plan.variant or 'base'}) seed {plan.seed}: "
                    f"{plan.consensus.engine} N={plan.topology.nodes} clients={plan.workload.clients} "
                    f"for {to_seconds(plan.duration):.0f}s")
        for node in self.nodes:
            node.start()
        for client in self.clients:
            client.start()
        if plan.sample_interval < plan.duration:
            self.network.schedule(plan.sample_interval, self._sample)
        self.network.run_until(plan.duration)
        self.collector.sample(plan.duration)

    # Post-run inspection

    def honest_nodes(self, alive_only: bool = True) -> List[Node]:
        return [n for n in self.nodes if n.honest and (not alive_only or self.network.is_alive(n.id))]

    def replica_agreement(self) -> Tuple[bool, bool]:
        """
        Returns:
            (state roots agree for every block executed by several honest nodes,
             no two honest nodes finalized different blocks at one height)
        """
        roots: Dict[bytes, bytes] = {}
        roots_agree = True
        finalized: Dict[int, bytes] = {}
        safe = True
        for node in self.honest_nodes(alive_only=False):
            for height, block_hash in enumerate(node.chain.main_branch):
                root = node.store.root_history.get(height)
                if root is None:
                    continue
                if roots.setdefault(block_hash, root) != root:
                    roots_agree = False
            if node.chain.mode == FINALIZED:
                for height in range(1, node.chain.confirmed_upto + 1):
                    block_hash = node.chain.main_branch[height]
                    if finalized.setdefault(height, block_hash) != block_hash:
                        safe = False
        return roots_agree, safe

    def conservation(self) -> Optional[bool]:
        """Money total held after every executed block and at the end of the run (None if not Smallbank)."""
        monitor = self.monitor
        if monitor is None:
            return None
        logger.debug(f"Conservation checked after {monitor.blocks_checked} blocks, "
                     f"{len(monitor.violations)} failures")
        if not monitor.holds:
            return False
        for node in self.honest_nodes():
            total = sum(monitor.balance_of(node, acct) for acct in monitor.accounts)
            if total != monitor.expected:
                logger.warning(f"Node {node.id} holds {total} across accounts, expected {monitor.expected}")
                return False
        return True

    def analytics_oracle(self) -> Optional[Dict[str, Any]]:
        """Check Q1/Q2 against a brute-force scan of the executed main branch."""
        spec = self.plan.workload
        if not spec.analytics_probes or (spec.kind != ANALYTICS and not self.preloaded):
            return None
        nodes = self.honest_nodes()
        if not nodes:
            return None
        node = nodes[0]
        contract = workload_contract(ANALYTICS)
        transfers: List[Tuple[int, str, str, int]] = []
        for height in range(1, node.chain.height + 1):
            block = node.chain.block_at(height)
            for txn, receipt in zip(block.txns, node.receipts.get(height, [])):
                if txn.contract == contract and txn.method == "send_value" and receipt.status == COMMITTED:
                    src, dst, value = txn.args
                    transfers.append((height, src, dst, value))
        rng = np.random.default_rng([self.plan.seed, PROBE_STREAM])
        upper = node.chain.height + 1
        mismatches = 0
        for _ in range(spec.analytics_probes):
            i, j = sorted(rng.integers(1, upper + 1, size=2).tolist())
            acct = account_name(int(rng.integers(0, spec.accounts)))
            q1 = node.runtime.query(contract, "q1", (i, j))
            q2 = node.runtime.query(contract, "q2", (acct, i, j))
            oracle_q1 = sum(v for h, _, _, v in transfers if i <= h < j)
            oracle_q2 = max((v for h, s, d, v in transfers if i <= h < j and acct in (s, d)), default=0)
            if (q1, q2) != (oracle_q1, oracle_q2):
                mismatches += 1
                logger.warning(f"Analytics mismatch on [{i}, {j}) {acct}: got {(q1, q2)}, "
                               f"expected {(oracle_q1, oracle_q2)}")
        return {"probes": spec.analytics_probes, "mismatches": mismatches, "transfers": len(transfers),
                "height": node.chain.height}

    def write_artifacts(self) -> None:
        paths = self.plan.artifacts
        nodes = self.honest_nodes() or self.nodes
        node = nodes[0]
        if "chain" in paths:
            dump_chain(self.collector.observer, paths["chain"])
        if "receipts" in paths:
            receipts = [r for h in sorted(node.receipts) for r in node.receipts[h]]
            write_receipts(receipts, paths["receipts"], mode="w")
        if "state" in paths:
            node.store.dump_snapshot(paths["state"])

    def report(self) -> MetricsReport:
        plan = self.plan
        report = MetricsReport(
            name=plan.name,
            seed=plan.seed,
            engine=plan.consensus.engine,
            nodes=plan.topology.nodes,
            clients=plan.workload.clients,
            workload=plan.workload.kind,
            duration_s=to_seconds(plan.duration),
            variant=plan.variant,
        )
        self.collector.fill_report(report, plan.duration)
        report.network = self.network.stats()
        report.nodes_stats = [node.stats() for node in self.nodes]
        report.view_changes = sum(s.get("view_changes_started", 0) for s in report.nodes_stats)
        report.safety_violations = sum(s["safety_violations"] for s in report.nodes_stats)
        report.reverted_confirmations = sum(s["reverted_confirmations"] for s in report.nodes_stats)
        roots_agree, finalized_safe = self.replica_agreement()
        report.state_roots_agree = roots_agree
        report.trace_hash = self.trace.hexdigest
        report.checks[REPLICA_AGREEMENT] = roots_agree and finalized_safe
        if plan.consensus.mode == FINALIZED:
            report.checks[FINALIZED_FORK_FREE] = (
                finalized_safe
                and report.safety_violations == 0
                and all(s.delta == 0 for s in report.samples)
            )
        conserved = self.conservation()
        if conserved is not None:
            report.checks[CONSERVATION] = conserved
        analytics = self.analytics_oracle()
        if analytics is not None:
            report.analytics = analytics
            report.checks[ANALYTICS_ORACLE] = analytics["mismatches"] == 0
        if report.stall.stalled:
            logger.info(f"Liveness stall: last commit at {report.stall.last_commit_s}s")
        return report


def run(spec: WorkloadSpec, topology: Topology, consensus_config: ConsensusConfig,
        fault_schedule: Optional[FaultSchedule] = None, seed: int = 0, **options) -> MetricsReport:
    """
    Run one seeded experiment.

    Args:
        spec: Workload the clients send
        topology: Node count, queue model and execution cost
        consensus_config: Engine parameters
        fault_schedule: Crashes, restarts, partitions and delays
        seed: Seed of every random stream in the run
        **options: Remaining RunPlan fields (name, duration, stall_horizon, ...)

    Returns:
        MetricsReport: Deterministic for a fixed plan

    Raises:
        BenchmarkError: Inconsistent plan
    """
    plan = RunPlan(spec, topology, consensus_config, fault_schedule or FaultSchedule(), seed, **options)
    return run_plan(plan)


def run_plan(plan: RunPlan) -> MetricsReport:
    sim = Simulation(plan)
    sim.execute()
    report = sim.report()
    sim.write_artifacts()
    if plan.trace_path:
        # Deferred import keeps the report module free of simulation dependencies
        from reports import report_digest
        sim.trace.close({"trace_hash": report.trace_hash, "report_hash": report_digest(report)})
    logger.info(f"Finished {plan.name} seed {plan.seed}: {report.committed} committed, "
                f"{report.throughput} tx/s, delta {report.security.delta}")
    return report


def run_many(plans: Sequence[RunPlan], jobs: int = 1,
             runner: Callable[[RunPlan], MetricsReport] = run_plan) -> List[MetricsReport]:
    """Run independent plans, in order, on up to jobs worker processes."""
    if jobs <= 1 or len(plans) <= 1:
        return [runner(plan) for plan in plans]
    with ProcessPoolExecutor(max_workers=min(jobs, len(plans))) as executor:
        return list(executor.map(runner, plans))


def blocking_latency_mode(plan: RunPlan, on: bool) -> RunPlan:
    """Closed-loop clients (one outstanding transaction per thread) when on, open-loop otherwise."""
    return replace(plan, workload=replace(plan.workload, blocking=on))


def rescale_consensus(config: ConsensusConfig, nodes: int) -> ConsensusConfig:
    """Resize a consensus config to a new node count, keeping the network-wide block interval."""
    old = config.n_nodes
    authorities = config.authorities
    if authorities == tuple(range(old)):
        authorities = tuple(range(nodes))
    else:
        authorities = tuple(a for a in authorities if a < nodes)
    stakes = config.stakes
    difficulty = config.difficulty_t
    if stakes:
        stakes = tuple(stakes[i % len(stakes)] for i in range(nodes))
        if config.engine == POS:
            difficulty = difficulty * sum(config.stakes) // max(1, sum(stakes))
    if config.engine == POW:
        difficulty = difficulty * old // nodes
    byzantine = tuple((n, mode) for n, mode in config.byzantine if n < nodes)
    return replace(config, n_nodes=nodes, authorities=authorities, stakes=stakes,
                   difficulty_t=max(1, difficulty), byzantine=byzantine)


def resize_plan(plan: RunPlan, dimension: str, value: int) -> RunPlan:
    if dimension not in SWEEP_DIMENSIONS:
        raise BenchmarkError(f"Unknown sweep dimension: {dimension}")
    topology, consensus, workload = plan.topology, plan.consensus, plan.workload
    if dimension in (NODES, BOTH):
        topology = replace(topology, nodes=value)
        consensus = rescale_consensus(consensus, value)
    if dimension in (CLIENTS, BOTH):
        workload = replace(workload, clients=value)
    faults = plan.faults
    if dimension in (NODES, BOTH) and (faults.crashes or faults.restarts or faults.partitions):
        raise BenchmarkError("Node sweeps cannot carry node-specific faults")
    return replace(plan, topology=topology, consensus=consensus, workload=workload,
                   variant=f"{dimension}{value}")


def sweep(plan: RunPlan, dimension: str, values: Sequence[int], jobs: int = 1) -> List[MetricsReport]:
    """Scalability series: one report per value of the swept dimension, in input order."""
    plans = [resize_plan(plan, dimension, v) for v in values]
    return run_many(plans, jobs)


def security_run(plan: RunPlan) -> MetricsReport:
    """
    Run a partition experiment; the report's samples are the per-second fork-delta series.

    The partition summary records the forked-block share and whether delta kept
    growing later than HEAL_SETTLE_TICKS after the last heal.
    """
    if not plan.faults.partitions:
        raise BenchmarkError("security_run needs at least one partition")
    report = run_plan(plan)
    heal = max(p.end for p in plan.faults.partitions)
    settle_s = to_seconds(heal + HEAL_SETTLE_TICKS)
    at_heal = [s.delta for s in report.samples if s.t <= to_seconds(heal)]
    at_settle = [s.delta for s in report.samples if s.t <= settle_s]
    delta_at_heal = at_heal[-1] if at_heal else 0
    delta_settled = at_settle[-1] if at_settle else 0
    delta_end = report.security.delta
    report.analytics["partition"] = {
        "heal_s": to_seconds(heal),
        "delta_at_heal": delta_at_heal,
        "delta_settled": delta_settled,
        "delta_end": delta_end,
        "peak_delta": max((s.delta for s in report.samples), default=0),
        "fork_share": round(1.0 - report.security.ratio, 6),
        # One natural fork after the settle point is tolerated
        "growth_ceased": delta_end - delta_settled <= 1,
    }
    return report
