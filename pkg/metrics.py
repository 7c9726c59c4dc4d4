"""
metrics.py - Run-wide metric collection and the MetricsReport.

The collector listens to every node: confirmations at a client's bound node give
throughput and latency, first confirmations of a block at any node give the
commit timeline (stalls, fault windows), and blocks accepted by honest nodes
feed an omniscient observer chain for the fork delta.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from ledger import LONGEST_CHAIN, Block, ChainView, DuplicateBlock, LedgerError, Transaction, UnknownParent, fork_delta
from contracts import ABORTED, COMMITTED, REVERTED, Receipt
from node import NodeListener
from utils import to_seconds

logger = logging.getLogger(__name__)

ROUND_DIGITS = 6


def _r(value: float) -> float:
    return round(float(value), ROUND_DIGITS)


@dataclass
class LatencySummary:
    count: int = 0
    p50: float = 0.0
    p95: float = 0.0
    p99: float = 0.0
    max: float = 0.0
    mean: float = 0.0

    @classmethod
    def from_samples(cls, latencies_s: List[float]) -> "LatencySummary":
        if not latencies_s:
            return cls()
        values = np.asarray(latencies_s, dtype=float)
        p50, p95, p99 = np.percentile(values, [50, 95, 99])
        return cls(len(values), _r(p50), _r(p95), _r(p99), _r(values.max()), _r(values.mean()))


@dataclass
class SecuritySummary:
    total_blocks: int = 0
    main_blocks: int = 0
    delta: int = 0
    ratio: float = 1.0


@dataclass
class FaultSummary:
    first_fault_s: Optional[float] = None
    rate_before: float = 0.0
    rate_after: float = 0.0
    halted_after_faults: bool = False
    rate_reduced: bool = False


@dataclass
class StallSummary:
    stalled: bool = False
    horizon_s: float = 0.0
    last_commit_s: float = 0.0
    longest_gap_s: float = 0.0


@dataclass
class Sample:
    """One per-second row of the CSV report."""
    t: float
    committed: int
    throughput: float
    latency_mean: float
    total_blocks: int
    main_blocks: int
    delta: int


@dataclass
class MetricsReport:
    name: str
    seed: int
    engine: str
    nodes: int
    clients: int
    workload: str
    duration_s: float
    variant: Optional[str] = None
    submitted: int = 0
    confirmed: int = 0
    committed: int = 0
    reverted: int = 0
    aborted: int = 0
    throughput: float = 0.0
    latency: LatencySummary = field(default_factory=LatencySummary)
    security: SecuritySummary = field(default_factory=SecuritySummary)
    fault: FaultSummary = field(default_factory=FaultSummary)
    stall: StallSummary = field(default_factory=StallSummary)
    network: Dict[str, Any] = field(default_factory=dict)
    view_changes: int = 0
    safety_violations: int = 0
    reverted_confirmations: int = 0
    state_roots_agree: bool = True
    trace_hash: str = ""
    samples: List[Sample] = field(default_factory=list)
    checks: Dict[str, bool] = field(default_factory=dict)
    analytics: Dict[str, Any] = field(default_factory=dict)
    nodes_stats: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def fork_exposed(self) -> bool:
        return self.security.delta > 0

    def to_dict(self, with_samples: bool = False) -> Dict[str, Any]:
        data = asdict(self)
        if not with_samples:
            data.pop("samples")
        data["fork_exposed"] = self.fork_exposed
        return data


class MetricsCollector(NodeListener):
    """
    Args:
        genesis: Shared genesis block (root of the observer chain)
        duration: Run length in ticks
        stall_horizon: Ticks without a commit that count as a liveness stall
        first_fault: Tick of the first fault event, if any
        last_fault: Tick of the last fault event, if any
    """

    def __init__(self, genesis: Block, duration: int, stall_horizon: int,
                 first_fault: Optional[int] = None, last_fault: Optional[int] = None):
        self.observer = ChainView(genesis, mode=LONGEST_CHAIN)
        self.duration = duration
        self.stall_horizon = stall_horizon
        self.first_fault = first_fault
        self.last_fault = last_fault
        self.submitted = 0
        self.statuses: Dict[str, int] = {COMMITTED: 0, REVERTED: 0, ABORTED: 0}
        self.confirmations: List[tuple] = []
        self.commit_times: List[float] = []
        self._first_confirm: Dict[bytes, float] = {}
        self.safety_violations = 0
        self.samples: List[Sample] = []
        self._sampled_upto = 0
        self.confirm_listeners: List[Callable[[int, Transaction], None]] = []
        self.execute_listeners: List[Callable[[int, Block, List[Receipt]], None]] = []
        self.rollback_listeners: List[Callable[[int, int], None]] = []

    # NodeListener

    def block_seen(self, block: Block) -> None:
        try:
            self.observer.append(block, trusted=True)
        except (DuplicateBlock, UnknownParent):
            pass
        except LedgerError as e:
            logger.debug(f"Observer rejected block {block.height}: {e}")

    def block_confirmed(self, node_id: int, block: Block, t: float) -> None:
        if block.hash in self._first_confirm:
            return
        self._first_confirm[block.hash] = t
        self.commit_times.append(t)

    def txn_confirmed(self, node_id: int, client: int, txn: Transaction, receipt: Receipt, t: float) -> None:
        self.statuses[receipt.status] = self.statuses.get(receipt.status, 0) + 1
        self.confirmations.append((t, t - txn.submit_time, receipt.status))
        for listener in self.confirm_listeners:
            listener(client, txn)

    def safety_violation(self, node_id: int, error: Exception) -> None:
        self.safety_violations += 1

    def block_executed(self, node_id: int, block: Block, receipts: List[Receipt]) -> None:
        for listener in self.execute_listeners:
            listener(node_id, block, receipts)

    def state_rolled_back(self, node_id: int, height: int) -> None:
        for listener in self.rollback_listeners:
            listener(node_id, height)

    def txn_submitted(self, client: int, txn: Transaction) -> None:
        self.submitted += 1

    # Sampling

    def sample(self, now: float) -> Sample:
        """Record the one-second window ending at now."""
        start = now - 1000
        window = [(t, lat) for t, lat, status in self.confirmations[self._sampled_upto:]
                  if status == COMMITTED and start <= t < now]
        self._sampled_upto = len(self.confirmations)
        total, main, delta = fork_delta(self.observer)
        committed = self.statuses[COMMITTED]
        mean = _r(to_seconds(np.mean([lat for _, lat in window]))) if window else 0.0
        sample = Sample(_r(to_seconds(now)), committed, float(len(window)), mean, total, main, delta)
        self.samples.append(sample)
        return sample

    # Summaries

    def _committed_between(self, lo: float, hi: float) -> int:
        return sum(1 for t, _, status in self.confirmations if status == COMMITTED and lo <= t < hi)

    def fault_summary(self, end: float) -> FaultSummary:
        if self.first_fault is None:
            return FaultSummary()
        fault = self.first_fault
        grace = min(10_000, max(0.0, (end - fault) / 2))
        before_lo = fault / 2
        before = self._committed_between(before_lo, fault)
        after = self._committed_between(fault + grace, end)
        rate_before = before / max(1e-9, to_seconds(fault - before_lo))
        rate_after = after / max(1e-9, to_seconds(end - fault - grace))
        halted = not any(fault + grace <= t < end for t in self.commit_times)
        return FaultSummary(
            first_fault_s=_r(to_seconds(fault)),
            rate_before=_r(rate_before),
            rate_after=_r(rate_after),
            halted_after_faults=halted,
            rate_reduced=rate_after < rate_before,
        )

    def stall_summary(self, end: float) -> StallSummary:
        last_commit = max(self.commit_times) if self.commit_times else 0.0
        reference = max(last_commit, self.last_fault or 0)
        points = [0.0] + sorted(self.commit_times) + [end]
        longest = max(b - a for a, b in zip(points, points[1:]))
        return StallSummary(
            stalled=end - reference > self.stall_horizon,
            horizon_s=_r(to_seconds(self.stall_horizon)),
            last_commit_s=_r(to_seconds(last_commit)),
            longest_gap_s=_r(to_seconds(longest)),
        )

    def security_summary(self) -> SecuritySummary:
        total, main, delta = fork_delta(self.observer)
        return SecuritySummary(total, main, delta, _r(1.0 if total == 0 else main / total))

    def fill_report(self, report: MetricsReport, end: float) -> MetricsReport:
        duration_s = to_seconds(end)
        report.submitted = self.submitted
        report.confirmed = len(self.confirmations)
        report.committed = self.statuses[COMMITTED]
        report.reverted = self.statuses[REVERTED]
        report.aborted = self.statuses[ABORTED]
        report.throughput = _r(report.committed / duration_s) if duration_s > 0 else 0.0
        report.latency = LatencySummary.from_samples([to_seconds(lat) for _, lat, _ in self.confirmations])
        report.security = self.security_summary()
        report.fault = self.fault_summary(end)
        report.stall = self.stall_summary(end)
        report.safety_violations += self.safety_violations
        report.samples = list(self.samples)
        return report
