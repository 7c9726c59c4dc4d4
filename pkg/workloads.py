"""
workloads.py - Transaction generators and simulated clients.

Generators turn a WorkloadSpec into signed contract invocations; clients submit
them to their bound node either open-loop (exponential inter-arrival gaps at
request_rate) or closed-loop (each thread waits for confirmation, or a timeout,
before submitting again).
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from builtin_contracts import BUILTIN_CONTRACTS, Smallbank
from constants import DEFAULT_ACCOUNTS, DEFAULT_ZIPF_THETA, TICKS_PER_SECOND, YCSB_VALUE_SIZE
from contracts import SYSTEM_CONTRACT, ContractRuntime
from ledger import Block, Transaction, make_block, make_genesis
from netsim import SimNetwork, client_endpoint
from node import REQUEST, request_wire
from signatures import KeyRegistry, client_identity
from state_store import VersionedStateStore

logger = logging.getLogger(__name__)

YCSB = "ycsb"
SMALLBANK = "smallbank"
DONOTHING = "donothing"
IOHEAVY = "ioheavy"
CPUHEAVY = "cpuheavy"
ANALYTICS = "analytics"
DOUBLER = "doubler"
WORKLOAD_KINDS = (YCSB, SMALLBANK, DONOTHING, IOHEAVY, CPUHEAVY, ANALYTICS, DOUBLER)

UNIFORM = "uniform"
ZIPFIAN = "zipfian"

MIX_TRANSFERS = "transfers"
MIX_FULL = "full"

OPERATOR = "operator"
SATURATING_RATE = 1000.0
DRAW_BATCH = 1024

# Contract id each workload targets; every builtin kind is deployed under its own name
WORKLOAD_CONTRACT = {
    YCSB: "kvstore",
    SMALLBANK: "smallbank",
    DONOTHING: "donothing",
    IOHEAVY: "ioheavy",
    CPUHEAVY: "cpuheavy",
    ANALYTICS: "versionkv",
    DOUBLER: "doubler",
}


class WorkloadError(Exception):
    """Raised for an invalid workload specification."""
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    """
    What the clients send and how fast.

    request_rate is per client in ops/s; None means saturating. ops caps the
    submissions per client (0 means unlimited for the run's duration).
    """
    kind: str = YCSB
    clients: int = 1
    threads_per_client: int = 1
    ops: int = 0
    read_ratio: float = 0.5
    key_distribution: str = ZIPFIAN
    zipf_theta: float = DEFAULT_ZIPF_THETA
    record_count: int = 1000
    request_rate: Optional[float] = None
    blocking: bool = False
    request_timeout: int = 30 * TICKS_PER_SECOND
    smallbank_mix: str = MIX_TRANSFERS
    overdraft_ratio: float = 0.0
    accounts: int = DEFAULT_ACCOUNTS
    ioheavy_ops: int = 100
    cpuheavy_size: int = 1000
    preload_blocks: int = 0
    preload_txns_per_block: float = 3.0
    analytics_probes: int = 0

    def validate(self) -> None:
        if self.kind not in WORKLOAD_KINDS:
            raise WorkloadError(f"Unknown workload kind: {self.kind}")
        if not 0.0 <= self.read_ratio <= 1.0:
            raise WorkloadError(f"read_ratio must be in [0, 1], got {self.read_ratio}")
        if not 0.0 <= self.overdraft_ratio <= 1.0:
            raise WorkloadError(f"overdraft_ratio must be in [0, 1], got {self.overdraft_ratio}")
        if self.key_distribution not in (UNIFORM, ZIPFIAN):
            raise WorkloadError(f"Unknown key distribution: {self.key_distribution}")
        if self.smallbank_mix not in (MIX_TRANSFERS, MIX_FULL):
            raise WorkloadError(f"Unknown smallbank mix: {self.smallbank_mix}")
        if self.clients < 0 or self.threads_per_client < 1:
            raise WorkloadError("clients must be >= 0 and threads_per_client >= 1")
        if self.record_count < 1 or self.accounts < 2:
            raise WorkloadError("record_count must be >= 1 and accounts >= 2")
        if self.request_rate is not None and self.request_rate <= 0:
            raise WorkloadError("request_rate must be positive")

    @property
    def rate(self) -> float:
        return self.request_rate if self.request_rate is not None else SATURATING_RATE


class KeyChooser:
    """Draws record indexes uniformly or from a zipfian law over [0, n)."""

    def __init__(self, n: int, distribution: str, theta: float, rng: np.random.Generator):
        self.rng = rng
        self.n = n
        self._cdf = None
        if distribution == ZIPFIAN:
            weights = 1.0 / np.power(np.arange(1, n + 1, dtype=float), theta)
            self._cdf = np.cumsum(weights / weights.sum())
        self._pending: List[int] = []

    def next(self) -> int:
        if not self._pending:
            u = self.rng.random(DRAW_BATCH)
            if self._cdf is None:
                draws = np.minimum((u * self.n).astype(np.int64), self.n - 1)
            else:
                draws = np.minimum(np.searchsorted(self._cdf, u, side="right"), self.n - 1)
            self._pending = draws[::-1].tolist()
        return self._pending.pop()


def account_name(index: int) -> str:
    return f"acct{index}"


class TxnFactory:
    """Builds the unsigned invocation for one operation of a workload."""

    def __init__(self, spec: WorkloadSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.contract = WORKLOAD_CONTRACT[spec.kind]
        self.keys = KeyChooser(spec.record_count, spec.key_distribution, spec.zipf_theta, rng)
        self._builders: Dict[str, Callable[[], Tuple[str, tuple]]] = {
            YCSB: self._ycsb,
            SMALLBANK: self._smallbank,
            DONOTHING: lambda: ("invoke", ()),
            IOHEAVY: self._ioheavy,
            CPUHEAVY: lambda: ("sort", (spec.cpuheavy_size,)),
            ANALYTICS: self._analytics,
            DOUBLER: lambda: ("enter", (int(self.rng.integers(1, 100)),)),
        }

    def make(self, sender: str, now: int, nonce: int) -> Transaction:
        method, args = self._builders[self.spec.kind]()
        return Transaction(sender, self.contract, method, args, int(now), nonce)

    def _account_pair(self) -> Tuple[str, str]:
        src, dst = self.rng.choice(self.spec.accounts, size=2, replace=False).tolist()
        return account_name(src), account_name(dst)

    def _ycsb(self):
        key = f"user{self.keys.next()}"
        if self.rng.random() < self.spec.read_ratio:
            return "read", (key,)
        return "write", (key, self.rng.bytes(YCSB_VALUE_SIZE))

    def _smallbank(self):
        src, dst = self._account_pair()
        amount = int(self.rng.integers(1, 100))
        if self.spec.overdraft_ratio and self.rng.random() < self.spec.overdraft_ratio:
            # More than any balance can hold: reverts with InsufficientFunds
            return "send_payment", (src, dst, 10 ** 9)
        if self.spec.smallbank_mix == MIX_TRANSFERS:
            u = self.rng.random()
            if u < 0.6:
                return "send_payment", (src, dst, amount)
            if u < 0.85:
                return "get_balance", (src,)
            return "amalgamate", (src, dst)
        op = int(self.rng.integers(0, 6))
        if op == 0:
            return "send_payment", (src, dst, amount)
        if op == 1:
            return "amalgamate", (src, dst)
        if op == 2:
            return "get_balance", (src,)
        if op == 3:
            return "update_balance", (src, amount)
        if op == 4:
            return "update_saving", (src, amount)
        return "write_check", (src, amount)

    def _ioheavy(self):
        seed = int(self.rng.integers(0, 64))
        method = "write_batch" if self.rng.random() < 0.5 else "read_batch"
        return method, (self.spec.ioheavy_ops, seed)

    def _analytics(self):
        src, dst = self._account_pair()
        return "send_value", (src, dst, int(self.rng.integers(1, 1000)))


def deploy_transactions(registry: Optional[KeyRegistry] = None) -> List[Transaction]:
    """System transactions deploying every builtin contract kind under its own name."""
    txns = []
    for nonce, kind in enumerate(BUILTIN_CONTRACTS):
        txn = Transaction(OPERATOR, SYSTEM_CONTRACT, "deploy", (kind, kind), 0, nonce)
        txns.append(txn.signed(registry) if registry is not None else txn)
    return txns


def build_genesis(num_buckets: int, registry: Optional[KeyRegistry] = None) -> Block:
    return make_genesis(VersionedStateStore(num_buckets).state_root(), deploy_transactions(registry))


def build_preload(genesis: Block, spec: WorkloadSpec, rng: np.random.Generator, registry: KeyRegistry,
                  num_buckets: int) -> List[Block]:
    """
    Generate analytics history: preload_blocks blocks, each with a Poisson
    number of VersionKV transfers over spec.accounts accounts.

    Blocks are executed on a scratch store so every header carries the right
    pre-state root.
    """
    store = VersionedStateStore(num_buckets)
    runtime = ContractRuntime(store, BUILTIN_CONTRACTS)
    runtime.execute_block(genesis)
    factory = TxnFactory(replace(spec, kind=ANALYTICS), rng)
    counts = rng.poisson(spec.preload_txns_per_block, spec.preload_blocks).tolist()
    blocks = []
    parent = genesis
    nonce = 0
    for index, count in enumerate(counts):
        height = index + 1
        txns = []
        for _ in range(count):
            txns.append(factory.make(OPERATOR, height, nonce).signed(registry))
            nonce += 1
        block = make_block(height, parent.hash, 0, store.state_root(), txns, timestamp=height)
        runtime.execute_block(block)
        blocks.append(block)
        parent = block
    logger.info(f"Built {len(blocks)} preload blocks with {nonce} transfers")
    return blocks


class Client:
    """
    One simulated client bound to a node.

    Args:
        client_id: Client index
        node_id: Bound node (client_id mod N)
        spec: Workload specification
        network: Simulated network
        registry: Key registry (the client signs its transactions)
        rng: Client-owned generator
        end_time: Submission stops at this tick
        on_submit: Called with (client_id, txn) for every submission
    """

    def __init__(self, client_id: int, node_id: int, spec: WorkloadSpec, network: SimNetwork,
                 registry: KeyRegistry, rng: np.random.Generator, end_time: int,
                 on_submit: Optional[Callable[[int, Transaction], None]] = None):
        self.id = client_id
        self.node_id = node_id
        self.spec = spec
        self.network = network
        self.registry = registry
        self.rng = rng
        self.end_time = end_time
        self.on_submit = on_submit
        self.identity = client_identity(client_id)
        self.factory = TxnFactory(spec, rng)
        self.submitted = 0
        self.timeouts = 0
        self._gaps: List[float] = []
        self._outstanding: Dict[bytes, object] = {}

    def start(self) -> None:
        if self.spec.blocking:
            for _ in range(self.spec.threads_per_client):
                self._submit_closed()
        else:
            self._schedule_open()

    def _exhausted(self) -> bool:
        if self.spec.ops and self.submitted >= self.spec.ops:
            return True
        return self.network.now >= self.end_time

    def _submit(self) -> Transaction:
        txn = self.factory.make(self.identity, int(self.network.now), self.submitted).signed(self.registry)
        self.submitted += 1
        if self.on_submit is not None:
            self.on_submit(self.id, txn)
        self.network.send(client_endpoint(self.id), self.node_id, REQUEST, txn, request_wire(txn), consensus=False)
        return txn

    # Open loop

    def _next_gap(self) -> float:
        if not self._gaps:
            mean = TICKS_PER_SECOND / self.spec.rate
            self._gaps = self.rng.exponential(mean, DRAW_BATCH)[::-1].tolist()
        return self._gaps.pop()

    def _schedule_open(self) -> None:
        self.network.schedule(self._next_gap(), self._fire_open)

    def _fire_open(self) -> None:
        if self._exhausted():
            return
        self._submit()
        self._schedule_open()

    # Closed loop

    def _submit_closed(self) -> None:
        if self._exhausted():
            return
        txn = self._submit()
        self._outstanding[txn.txn_id] = self.network.schedule(
            self.spec.request_timeout, lambda t=txn.txn_id: self._timed_out(t))

    def _timed_out(self, txn_id: bytes) -> None:
        if self._outstanding.pop(txn_id, None) is None:
            return
        self.timeouts += 1
        self._submit_closed()

    def confirmed(self, txn_id: bytes) -> None:
        timer = self._outstanding.pop(txn_id, None)
        if timer is None:
            return
        timer.cancel()
        self._submit_closed()


def make_clients(spec: WorkloadSpec, network: SimNetwork, registry: KeyRegistry, seed: int,
                 end_time: int, n_nodes: int,
                 on_submit: Optional[Callable[[int, Transaction], None]] = None) -> List[Client]:
    """Client c is bound to node c mod N and draws from its own seeded stream."""
    return [
        Client(c, c % n_nodes, spec, network, registry, np.random.default_rng([seed, 1000 + c]),
               end_time, on_submit)
        for c in range(spec.clients)
    ]


def workload_contract(kind: str) -> str:
    try:
        return WORKLOAD_CONTRACT[kind]
    except KeyError:
        raise WorkloadError(f"Unknown workload kind: {kind}")


def expected_smallbank_total(accounts: Sequence[str]) -> int:
    return len(accounts) * (Smallbank.INITIAL_CHECKING + Smallbank.INITIAL_SAVINGS)
