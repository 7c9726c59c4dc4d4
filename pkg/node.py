"""
node.py - A simulated blockchain server.

A Node ties one replica's chain view, versioned state, contract runtime and
consensus engine to its network endpoint. It keeps the transaction pool,
executes main-branch blocks (rolling state back on reorganization), charges
execution time, and reports confirmations of the transactions its own clients
submitted.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from builtin_contracts import BUILTIN_CONTRACTS
from codec import encode, uint_bytes
from consensus import PBFT, POA, POS, POW, SEQUENCER, ConsensusConfig, PoaEngine, PosEngine, PowEngine, SequencerEngine
from constants import DEFAULT_NUM_BUCKETS, DEFAULT_STEP_BUDGET, TICKS_PER_SECOND
from contracts import ContractRuntime, Receipt
from ledger import (
    Block,
    ChainUpdate,
    ChainView,
    DuplicateBlock,
    InvalidBlock,
    InvalidCert,
    SafetyViolation,
    Transaction,
    UnknownParent,
    make_block,
    validate_body,
)
from netsim import Envelope, SimNetwork, Timer
from pbft import PbftEngine
from signatures import KeyRegistry
from state_store import VersionedStateStore

logger = logging.getLogger(__name__)

REQUEST = "request"
TXN = "txn"
BLOCK = "block"
GET_BLOCK = "get-block"
HEAD = "head"

ENGINE_CLASSES = {
    POW: PowEngine,
    POS: PosEngine,
    POA: PoaEngine,
    PBFT: PbftEngine,
    SEQUENCER: SequencerEngine,
}


class NodeError(Exception):
    """Raised for invalid node setup."""
    pass


def request_wire(txn: Transaction) -> bytes:
    return encode([txn.canonical_bytes(), txn.signature])


@dataclass(frozen=True)
class NodeSettings:
    consensus: ConsensusConfig
    exec_ticks_per_step: float = 0.0
    admission_rate: Optional[float] = None
    step_budget: int = DEFAULT_STEP_BUDGET
    num_buckets: int = DEFAULT_NUM_BUCKETS


class NodeListener:
    """Receives a node's observable events; the metrics collector implements it."""

    def block_seen(self, block: Block) -> None:
        pass

    def block_confirmed(self, node_id: int, block: Block, t: float) -> None:
        pass

    def txn_confirmed(self, node_id: int, client: int, txn: Transaction, receipt: Receipt, t: float) -> None:
        pass

    def safety_violation(self, node_id: int, error: Exception) -> None:
        pass

    def block_executed(self, node_id: int, block: Block, receipts: List[Receipt]) -> None:
        pass

    def state_rolled_back(self, node_id: int, height: int) -> None:
        pass


class TokenBucket:
    """Admission throttle: rate tokens per second, burst of one second's worth."""

    def __init__(self, rate_per_s: float, now: float = 0):
        self.rate = rate_per_s / TICKS_PER_SECOND
        self.capacity = max(1.0, rate_per_s)
        self.tokens = self.capacity
        self.stamp = now

    def take(self, now: float) -> bool:
        self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
        self.stamp = now
        if self.tokens < 1.0:
            return False
        self.tokens -= 1.0
        return True


class Node:
    """
    One blockchain server in the simulated cluster.

    Args:
        node_id: Endpoint id, 0..N-1
        settings: Consensus and execution parameters
        network: Shared simulated network
        registry: Key registry for all identities
        genesis: Genesis block carrying the deploy transactions
        rng: numpy Generator owned by this node (mining draws)
        listener: Metrics sink for seen blocks and confirmations
    """

    def __init__(self, node_id: int, settings: NodeSettings, network: SimNetwork, registry: KeyRegistry,
                 genesis: Block, rng: np.random.Generator, listener: Optional[NodeListener] = None):
        self.id = node_id
        self.settings = settings
        self.config = settings.consensus
        self.n_nodes = self.config.n_nodes
        self.network = network
        self.registry = registry
        self.rng = rng
        self.listener = listener or NodeListener()

        self.store = VersionedStateStore(settings.num_buckets)
        self.runtime = ContractRuntime(self.store, BUILTIN_CONTRACTS, settings.step_budget)
        self.chain = ChainView(genesis, mode=self.config.mode,
                               confirmation_depth=self.config.confirmation_depth,
                               cert_verifier=self._verify_cert)
        try:
            engine_cls = ENGINE_CLASSES[self.config.engine]
        except KeyError:
            raise NodeError(f"Unknown consensus engine: {self.config.engine}")
        self.engine = engine_cls(self, self.config)
        self.byzantine = self.engine.byzantine

        self.pool: "OrderedDict[bytes, Transaction]" = OrderedDict()
        self.included: Dict[bytes, int] = {}
        self.bound: Dict[bytes, int] = {}
        self._verified = set()
        self.receipts: Dict[int, List[Receipt]] = {}
        self.exec_done: Dict[int, float] = {}
        self.busy_until = 0.0
        self._confirmed_height = 0
        self._throttle = TokenBucket(settings.admission_rate) if settings.admission_rate else None

        self.throttled = 0
        self.invalid_blocks = 0
        self.invalid_txns = 0
        self.reorgs = 0
        self.reverted_confirmations = 0
        self.state_root_mismatches = 0
        self.safety_violations = 0

        self.receipts[0] = self.runtime.execute_block(genesis)
        self.exec_done[0] = 0.0

        network.register(node_id, self.handle)

    # Engine-facing API

    @property
    def now(self) -> float:
        return self.network.now

    @property
    def honest(self) -> bool:
        return self.byzantine is None

    def schedule(self, delay: float, callback: Callable[[], None]) -> Timer:
        return self.network.schedule(delay, callback, owner=self.id)

    def ready_at(self) -> float:
        """Earliest time the node is done executing and may propose."""
        return max(self.now, self.busy_until)

    def select_txns(self) -> Tuple[Transaction, ...]:
        batch = []
        for txn in self.pool.values():
            if len(batch) >= self.config.batch_size:
                break
            batch.append(txn)
        return tuple(batch)

    def build_block(self, timestamp: int, nonce: int = 0, txns: Optional[Sequence[Transaction]] = None) -> Block:
        tip = self.chain.tip
        if txns is None:
            txns = self.select_txns()
        return make_block(tip.height + 1, tip.hash, self.id, self.store.state_root(), txns, timestamp, nonce)

    def propose_block(self, block: Block, targets: Optional[Sequence[int]] = None) -> None:
        """Append an own block locally and broadcast it."""
        logger.debug(f"t={self.now:.0f} node {self.id} proposes block {block.height} with {len(block.txns)} txns")
        self._accept_block(block, self.id, trusted=True)
        self.send_block(block, targets)

    def send_block(self, block: Block, targets: Optional[Sequence[int]] = None) -> None:
        self.network.broadcast(self.id, BLOCK, block, block.canonical_bytes(), consensus=True, targets=targets)

    def commit_block(self, block: Block) -> None:
        """Append a block finalized by the engine."""
        self._accept_block(block, self.id, trusted=True)

    def announce_head(self) -> None:
        tip = self.chain.tip
        self.network.broadcast(self.id, HEAD, (tip.height, tip.hash),
                               encode([b"hd", uint_bytes(tip.height), tip.hash]), consensus=True)

    def verify_txns(self, txns: Sequence[Transaction]) -> bool:
        for txn in txns:
            if txn.txn_id in self._verified:
                continue
            if not txn.verify(self.registry):
                self.invalid_txns += 1
                return False
            self._verified.add(txn.txn_id)
        return True

    # Lifecycle

    def start(self) -> None:
        self.network.on_heal(lambda spec: self._on_heal())
        self.network.on_restart(self._on_restart)
        self.engine.start()

    def preload(self, blocks: Sequence[Block]) -> None:
        """Import trusted history: executed without charging time or confirming anything."""
        for block in blocks:
            update = self.chain.append(block, trusted=True)
            for attached in update.attached:
                self.listener.block_seen(attached)
            for h in update.added:
                self._execute(self.chain.blocks[h], charge=False)
        self._confirmed_height = self.chain.confirmed_upto
        self.engine.on_preload()

    def _on_heal(self) -> None:
        if self.network.is_alive(self.id):
            self.engine.on_heal()

    def _on_restart(self, node_id: int) -> None:
        if node_id != self.id:
            return
        self.busy_until = self.now
        self.engine.on_restart()

    # Inbound messages

    def handle(self, envelope: Envelope) -> None:
        if self.engine.on_message(envelope):
            return
        kind = envelope.kind
        if kind == REQUEST:
            self._on_request(envelope.payload, -envelope.src - 1)
        elif kind == TXN:
            if self._admit(envelope.payload):
                self.engine.on_pool_changed()
        elif kind == BLOCK:
            self._on_block(envelope.payload, envelope.src)
        elif kind == GET_BLOCK:
            block = self.chain.blocks.get(envelope.payload)
            if block is not None:
                self.send_block(block, targets=[envelope.src])
        elif kind == HEAD:
            height, head = envelope.payload
            if head not in self.chain.blocks and height >= self.chain.height:
                self._request_block(head, envelope.src)
        else:
            logger.debug(f"node {self.id} ignores message kind {kind}")

    def _on_request(self, txn: Transaction, client: int) -> None:
        if self._throttle is not None and not self._throttle.take(self.now):
            self.throttled += 1
            return
        if not self._admit(txn):
            return
        self.bound[txn.txn_id] = client
        self.network.broadcast(self.id, TXN, txn, request_wire(txn), consensus=False,
                               targets=self.engine.request_targets())
        self.engine.on_pool_changed()

    def _admit(self, txn: Transaction) -> bool:
        txn_id = txn.txn_id
        if txn_id in self.pool or txn_id in self.included:
            return False
        if not self.verify_txns((txn,)):
            return False
        self.pool[txn_id] = txn
        return True

    def _on_block(self, block: Block, src: int) -> None:
        try:
            validate_body(block, self.config.batch_size)
        except InvalidBlock as e:
            self.invalid_blocks += 1
            logger.debug(f"node {self.id} rejected block from {src}: {e}")
            return
        if not self.verify_txns(block.txns):
            self.invalid_blocks += 1
            return
        self._accept_block(block, src)

    def _request_block(self, block_hash: bytes, peer: int) -> None:
        self.network.send(self.id, peer, GET_BLOCK, block_hash, encode([b"gb", block_hash]), consensus=True)

    def _verify_cert(self, block: Block, view: ChainView) -> bool:
        return self.engine.verify_cert(block, view)

    # Chain and execution

    def _accept_block(self, block: Block, src: int, trusted: bool = False) -> None:
        try:
            update = self.chain.append(block, trusted=trusted)
        except DuplicateBlock:
            return
        except UnknownParent:
            if src != self.id:
                self._request_block(block.parent_hash, src)
            return
        except InvalidCert as e:
            self.invalid_blocks += 1
            logger.debug(f"node {self.id} rejected block {block.height}: {e}")
            return
        except SafetyViolation as e:
            self._safety_violation(e)
            return
        self._apply(update)
        for refused in update.conflicting:
            self._safety_violation(SafetyViolation(f"Buffered block {refused.hash.hex()[:12]} conflicts "
                                                   f"at height {refused.height}"))

    def _safety_violation(self, error: SafetyViolation) -> None:
        self.safety_violations += 1
        logger.error(f"node {self.id} safety violation: {error}")
        self.listener.safety_violation(self.id, error)

    def _apply(self, update: ChainUpdate) -> None:
        if self.honest:
            for block in update.attached:
                self.listener.block_seen(block)
        if not update.added and not update.removed:
            return
        returned: List[Transaction] = []
        if update.removed:
            self.reorgs += 1
            ancestor = update.ancestor_height
            logger.debug(f"t={self.now:.0f} node {self.id} reorg to height {ancestor}, "
                         f"{len(update.removed)} blocks removed")
            for block_hash in update.removed:
                for txn in self.chain.blocks[block_hash].txns:
                    self.included.pop(txn.txn_id, None)
                    returned.append(txn)
            self.store.rollback_to(ancestor)
            self.listener.state_rolled_back(self.id, ancestor)
            for height in [h for h in self.receipts if h > ancestor]:
                del self.receipts[height]
                self.exec_done.pop(height, None)
            if self._confirmed_height > ancestor:
                self.reverted_confirmations += self._confirmed_height - ancestor
                self._confirmed_height = ancestor
        for block_hash in update.added:
            self._execute(self.chain.blocks[block_hash])
        for txn in returned:
            if txn.txn_id not in self.included and txn.txn_id not in self.pool:
                self.pool[txn.txn_id] = txn
        self._check_confirmations()
        self.engine.on_head_changed(update)
        self.engine.on_pool_changed()

    def _execute(self, block: Block, charge: bool = True) -> None:
        if block.header.state_root != self.store.state_root():
            self.state_root_mismatches += 1
            logger.warning(f"node {self.id} block {block.height} state_root differs from local pre-state")
        receipts = self.runtime.execute_block(block)
        self.receipts[block.height] = receipts
        self.listener.block_executed(self.id, block, receipts)
        if charge:
            steps = sum(r.steps_used for r in receipts)
            start = max(self.now, self.busy_until)
            self.busy_until = start + steps * self.settings.exec_ticks_per_step
        self.exec_done[block.height] = max(self.now, self.busy_until) if charge else self.now
        for txn in block.txns:
            self.included[txn.txn_id] = block.height
            self.pool.pop(txn.txn_id, None)

    def _check_confirmations(self) -> None:
        upto = self.chain.confirmed_upto
        while self._confirmed_height < upto:
            height = self._confirmed_height + 1
            self._confirmed_height = height
            block = self.chain.block_at(height)
            done = self.exec_done.get(height, self.now)
            delay = max(0.0, done - self.now)
            self.schedule(delay, lambda b=block: self.listener.block_confirmed(self.id, b, self.now))
            receipts = self.receipts.get(height, [])
            for txn, receipt in zip(block.txns, receipts):
                client = self.bound.pop(txn.txn_id, None)
                if client is None:
                    continue
                self.schedule(delay, lambda c=client, t=txn, r=receipt:
                              self.listener.txn_confirmed(self.id, c, t, r, self.now))

    # Reporting

    def stats(self) -> Dict[str, int]:
        return {
            "height": self.chain.height,
            "pool": len(self.pool),
            "throttled": self.throttled,
            "invalid_blocks": self.invalid_blocks,
            "invalid_txns": self.invalid_txns,
            "reorgs": self.reorgs,
            "reverted_confirmations": self.reverted_confirmations,
            "state_root_mismatches": self.state_root_mismatches,
            "safety_violations": self.safety_violations,
            **self.engine.stats(),
        }
