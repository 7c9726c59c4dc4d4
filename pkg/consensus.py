"""
consensus.py - Consensus puzzles, stake functions and the longest-chain and
central-sequencer engines.

PBFT lives in pbft.py. Every engine is a single-threaded state machine driven by
its node's network events and timers; engines never share state.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from codec import ZERO_HASH, digest, digest_to_int
from constants import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_CHECKPOINT_INTERVAL,
    DEFAULT_CONFIRMATION_DEPTH,
    DEFAULT_VIEW_CHANGE_BACKOFF_CAP,
    HASH_SPACE,
)
from ledger import FINALIZED, LONGEST_CHAIN, Block, BlockHeader, ChainUpdate, ChainView, Seal, hash_header
from signatures import node_identity

logger = logging.getLogger(__name__)

POW = "pow"
POS = "pos"
POA = "poa"
PBFT = "pbft"
SEQUENCER = "sequencer"
ENGINES = (POW, POS, POA, PBFT, SEQUENCER)

STAKE_NXT = "nxt"
STAKE_CONSTANT = "constant"

NONCE_SPACE = 2 ** 63
NONCE_CHUNK = 256


class ConsensusError(Exception):
    """Base class for consensus errors."""
    pass


class UnknownMiner(ConsensusError):
    pass


class PuzzleError(ConsensusError):
    pass


@dataclass(frozen=True)
class ConsensusConfig:
    """
    Engine parameters in simulation units (ticks, blocks).

    f is derived from the node count as (N - 1) // 3.
    """
    engine: str = PBFT
    n_nodes: int = 4
    difficulty_t: int = HASH_SPACE
    batch_size: int = DEFAULT_BATCH_SIZE
    batch_timeout: int = 100
    step_duration: int = 1000
    view_change_timeout: int = 2000
    view_change_backoff_cap: int = DEFAULT_VIEW_CHANGE_BACKOFF_CAP
    checkpoint_interval: int = DEFAULT_CHECKPOINT_INTERVAL
    confirmation_depth: int = DEFAULT_CONFIRMATION_DEPTH
    authorities: Tuple[int, ...] = ()
    stake_function: str = STAKE_NXT
    stakes: Tuple[int, ...] = ()
    byzantine: Tuple[Tuple[int, str], ...] = ()

    @property
    def f(self) -> int:
        return (self.n_nodes - 1) // 3

    @property
    def mode(self) -> str:
        return FINALIZED if self.engine in (PBFT, SEQUENCER) else LONGEST_CHAIN

    def byzantine_mode(self, node_id: int) -> Optional[str]:
        return dict(self.byzantine).get(node_id)

    def validate(self) -> None:
        if self.engine not in ENGINES:
            raise ConsensusError(f"Unknown engine: {self.engine}")
        if self.batch_size < 1:
            raise ConsensusError("batch_size must be at least 1")
        if self.n_nodes < 1:
            raise ConsensusError("At least one node is required")
        if self.engine == PBFT and self.n_nodes < 3 * self.f + 1:
            raise ConsensusError("PBFT requires N >= 3f + 1")
        if self.difficulty_t <= 0:
            raise ConsensusError("difficulty_t must be positive")
        if self.engine in (POA, SEQUENCER) and not self.authorities:
            raise ConsensusError(f"{self.engine} requires at least one authority")
        if any(a < 0 or a >= self.n_nodes for a in self.authorities):
            raise ConsensusError("Authority outside the node range")
        if self.step_duration < 1:
            raise ConsensusError("step_duration must be at least one tick")


def pow_difficulty(interval_ticks: int, miners: int) -> int:
    """Threshold giving an expected network block interval of interval_ticks."""
    return max(1, HASH_SPACE // max(1, interval_ticks * miners))


def pos_difficulty(interval_ticks: int, stakes: Sequence[int], function: str = STAKE_NXT) -> int:
    total = max(1, sum(stakes))
    if function == STAKE_CONSTANT:
        return max(1, HASH_SPACE // (total * interval_ticks))
    # Minimum of N uniform forge ages averages max_age / (N + 1)
    mean_balance = max(1, total // max(1, len(stakes)))
    return max(1, HASH_SPACE // (mean_balance * interval_ticks * (len(stakes) + 1)))


# Puzzles

def nonce_bytes(nonce: int) -> bytes:
    return nonce.to_bytes(8, "big")


def puzzle_digest(header: BlockHeader) -> bytes:
    """H(b): the header digest with the nonce cleared."""
    return hash_header(replace(header, nonce=0))


def pos_puzzle_digest(header: BlockHeader) -> bytes:
    """PoS puzzle input: nonce, timestamp and txn_root cleared so the hit is fixed per parent."""
    return hash_header(replace(header, nonce=0, timestamp=0, txn_root=ZERO_HASH))


def puzzle_value(nonce: int, base: bytes) -> int:
    return digest_to_int(digest(nonce_bytes(nonce) + base))


class PuzzleSolution(NamedTuple):
    nonce: int
    tries: int


def solve_puzzle(base: bytes, threshold: int, rng: np.random.Generator) -> PuzzleSolution:
    """Draw candidate nonces from rng in fixed-size chunks until H(n || base) < threshold."""
    if threshold <= 0:
        raise PuzzleError("Threshold must be positive")
    tries = 0
    while True:
        for nonce in rng.integers(0, NONCE_SPACE, NONCE_CHUNK).tolist():
            tries += 1
            if puzzle_value(nonce, base) < threshold:
                return PuzzleSolution(nonce, tries)


def pow_search(header: BlockHeader, t: int, rng: np.random.Generator) -> PuzzleSolution:
    if t <= 0:
        raise PuzzleError("Difficulty threshold t must be positive")
    return solve_puzzle(puzzle_digest(header), t, rng)


def pow_solve(header: BlockHeader, t: int, rng: np.random.Generator) -> int:
    """
    Find a nonce n with H(n || H(b)) < t.

    Raises:
        PuzzleError: t <= 0
    """
    return pow_search(header, t, rng).nonce


def pow_verify(header: BlockHeader, t: int) -> bool:
    return puzzle_value(header.nonce, puzzle_digest(header)) < t


@dataclass
class StakeTable:
    balances: Dict[int, int]
    function: str = STAKE_NXT
    last_proposed: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if any(b < 0 for b in self.balances.values()):
            raise ConsensusError("Stake balances must be non-negative")

    def __contains__(self, miner: int) -> bool:
        return miner in self.balances

    def balance(self, miner: int) -> int:
        try:
            return self.balances[miner]
        except KeyError:
            raise UnknownMiner(f"Node {miner} has no stake entry")

    def stake_of(self, miner: int, age: int = 1) -> int:
        """s(M): the balance, times the tip age for the Nxt function."""
        bal = self.balance(miner)
        if self.function == STAKE_NXT:
            return bal * max(0, age)
        return bal

    def scaled(self, factor: int) -> "StakeTable":
        return StakeTable({m: b * factor for m, b in self.balances.items()}, self.function)

    def record_proposal(self, miner: int, height: int) -> None:
        self.last_proposed[miner] = height


def pos_hit(header: BlockHeader) -> int:
    return puzzle_value(header.nonce, pos_puzzle_digest(header))


def pos_check(header: BlockHeader, t: int, stake: StakeTable, miner: int, age: int = 1) -> bool:
    """
    True iff H(n || H(b)) < s(M) * t, the threshold saturating at 2^256.

    Raises:
        UnknownMiner: miner has no stake entry
    """
    threshold = min(stake.stake_of(miner, age) * t, HASH_SPACE)
    if threshold <= 0:
        return False
    return pos_hit(header) < threshold


def nxt_stake(miner: int, chain: ChainView, stake: StakeTable, now: int) -> int:
    """bal(M) times the age of the current tip, in ticks."""
    return stake.balance(miner) * max(0, int(now) - chain.tip.header.timestamp)


def poa_proposer(slot_time: int, authorities: Sequence[int], step_duration: int) -> int:
    return authorities[(int(slot_time) // step_duration) % len(authorities)]


def central_sequence(txns: Sequence, batch_size: int) -> List[Tuple]:
    """Total order in arrival order, cut into batches of at most batch_size."""
    ordered = list(txns)
    return [tuple(ordered[i:i + batch_size]) for i in range(0, len(ordered), batch_size)]


def with_nonce(block: Block, nonce: int) -> Block:
    return Block(header=replace(block.header, nonce=nonce), txns=block.txns, cert=block.cert)


def seal_block(block: Block, signer: int, registry) -> Block:
    signature = registry.sign(node_identity(signer), block.hash)
    return Block(header=block.header, txns=block.txns, cert=Seal(signer, signature))


def verify_seal(block: Block, expected_signer: int, registry) -> bool:
    cert = block.cert
    if not isinstance(cert, Seal) or cert.signer != expected_signer:
        return False
    if block.header.proposer != expected_signer:
        return False
    return registry.verify(node_identity(expected_signer), block.hash, cert.signature)


class ConsensusEngine:
    """Hooks a node calls into; subclasses override what they need."""

    name = ""

    def __init__(self, node, config: ConsensusConfig):
        self.node = node
        self.config = config
        self.byzantine = config.byzantine_mode(node.id)
        self._timer = None

    @property
    def mode(self) -> str:
        return self.config.mode

    def start(self) -> None:
        pass

    def stop(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None

    def on_message(self, envelope) -> bool:
        return False

    def on_head_changed(self, update: ChainUpdate) -> None:
        pass

    def on_pool_changed(self) -> None:
        pass

    def on_commit(self, block: Block) -> None:
        pass

    def on_preload(self) -> None:
        """Trusted history was appended before start()."""
        pass

    def on_heal(self) -> None:
        self.node.announce_head()

    def on_restart(self) -> None:
        # Timers armed before the crash never fire again
        self.stop()
        self.start()
        self.node.announce_head()

    def verify_cert(self, block: Block, view: ChainView) -> bool:
        return True

    def request_targets(self) -> Optional[List[int]]:
        """Nodes a client request is relayed to; None means every node."""
        return None

    def stats(self) -> Dict[str, int]:
        return {}

    def _halves(self) -> Tuple[List[int], List[int]]:
        nodes = list(range(self.config.n_nodes))
        middle = len(nodes) // 2
        return nodes[:middle], nodes[middle:]


class PowEngine(ConsensusEngine):
    """
    Time-modeled mining: one candidate per tick, so the wait is geometric with
    success probability t / 2^256; the nonce itself is then found with pow_solve.
    """

    name = POW

    @property
    def success_probability(self) -> float:
        return min(1.0, self.config.difficulty_t / HASH_SPACE)

    def start(self) -> None:
        self._restart()

    def on_head_changed(self, update: ChainUpdate) -> None:
        if update.added:
            self._restart()

    def _restart(self) -> None:
        self.stop()
        parent = self.node.chain.tip.hash
        wait = int(self.node.rng.geometric(self.success_probability))
        self._timer = self.node.schedule(wait, lambda: self._mined(parent))

    def _seal(self, timestamp: int) -> Block:
        block = self.node.build_block(timestamp=timestamp)
        return with_nonce(block, pow_solve(block.header, self.config.difficulty_t, self.node.rng))

    def _mined(self, parent_hash: bytes) -> None:
        self._timer = None
        if self.node.chain.tip.hash != parent_hash:
            self._restart()
            return
        now = int(self.node.now)
        block = self._seal(now)
        if self.byzantine == "fork":
            sibling = self._seal(now + 1)
            lower, upper = self._halves()
            logger.debug(f"node {self.node.id} forks height {block.height}")
            self.node.send_block(sibling, targets=upper)
            self.node.propose_block(block, targets=lower)
        else:
            self.node.propose_block(block)
        if self._timer is None:
            self._restart()

    def verify_cert(self, block: Block, view: ChainView) -> bool:
        return pow_verify(block.header, self.config.difficulty_t)


class PosEngine(ConsensusEngine):
    """
    Stake-weighted puzzle. With the Nxt function the hit is fixed once per parent
    and the forge time is the earliest tip age at which hit < bal * age * t.
    """

    name = POS

    def __init__(self, node, config: ConsensusConfig):
        super().__init__(node, config)
        stakes = config.stakes or tuple([1] * config.n_nodes)
        self.stake = StakeTable({i: s for i, s in enumerate(stakes)}, config.stake_function)

    def start(self) -> None:
        self._restart()

    def on_head_changed(self, update: ChainUpdate) -> None:
        for block in update.attached:
            self.stake.record_proposal(block.header.proposer, block.height)
        if update.added:
            self._restart()

    def _restart(self) -> None:
        self.stop()
        me = self.node.id
        if me not in self.stake or self.stake.balance(me) == 0:
            return
        tip = self.node.chain.tip
        bal = self.stake.balance(me)
        t = self.config.difficulty_t
        if self.stake.function == STAKE_NXT:
            nonce = int(self.node.rng.integers(0, NONCE_SPACE))
            template = self.node.build_block(timestamp=0, nonce=nonce).header
            age = pos_hit(template) // (bal * t) + 1
            delay = max(1, tip.header.timestamp + age - int(self.node.now))
        else:
            nonce = None
            delay = int(self.node.rng.geometric(min(1.0, bal * t / HASH_SPACE)))
        self._timer = self.node.schedule(delay, lambda: self._forge(tip.hash, nonce))

    def _forge(self, parent_hash: bytes, nonce: Optional[int]) -> None:
        self._timer = None
        if self.node.chain.tip.hash != parent_hash:
            self._restart()
            return
        block = self.node.build_block(timestamp=int(self.node.now), nonce=nonce or 0)
        if nonce is None:
            threshold = min(self.stake.balance(self.node.id) * self.config.difficulty_t, HASH_SPACE)
            block = with_nonce(block, solve_puzzle(pos_puzzle_digest(block.header), threshold, self.node.rng).nonce)
        self.node.propose_block(block)
        if self._timer is None:
            self._restart()

    def verify_cert(self, block: Block, view: ChainView) -> bool:
        parent = view.blocks.get(block.parent_hash)
        if parent is None or block.header.proposer not in self.stake:
            return False
        age = block.header.timestamp - parent.header.timestamp
        return pos_check(block.header, self.config.difficulty_t, self.stake, block.header.proposer, age)


class PoaEngine(ConsensusEngine):
    """Round-robin authorities; one (possibly empty) block per slot, sealed by the slot's proposer."""

    name = POA

    def start(self) -> None:
        self.stop()
        step = self.config.step_duration
        now = int(self.node.now)
        self._timer = self.node.schedule(step - now % step, self._slot)

    def _slot(self) -> None:
        step = self.config.step_duration
        slot_time = int(self.node.now)
        me = self.node.id
        scheduled = poa_proposer(slot_time, self.config.authorities, step)
        if scheduled == me or self.byzantine == "rogue":
            if self.node.chain.tip.header.timestamp < slot_time:
                block = self.node.build_block(timestamp=slot_time)
                self.node.propose_block(seal_block(block, me, self.node.registry))
        self._timer = self.node.schedule(step, self._slot)

    def verify_cert(self, block: Block, view: ChainView) -> bool:
        parent = view.blocks.get(block.parent_hash)
        if parent is None or parent.header.timestamp >= block.header.timestamp:
            return False
        expected = poa_proposer(block.header.timestamp, self.config.authorities, self.config.step_duration)
        return verify_seal(block, expected, self.node.registry)


class SequencerEngine(ConsensusEngine):
    """
    Single trusted orderer. Crash-tolerant ordering only: a corrupt sequencer
    (byzantine mode 'equivocate') can hand different blocks to different nodes.
    """

    name = SEQUENCER

    @property
    def sequencer(self) -> int:
        return self.config.authorities[0]

    def request_targets(self) -> Optional[List[int]]:
        return [self.sequencer]

    def start(self) -> None:
        self.on_pool_changed()

    def on_pool_changed(self) -> None:
        if self.node.id != self.sequencer or not self.node.pool:
            return
        if len(self.node.pool) >= self.config.batch_size:
            self.stop()
            self._timer = self.node.schedule(max(0, self.node.ready_at() - self.node.now), self._seal)
        elif self._timer is None:
            self._timer = self.node.schedule(self.config.batch_timeout, self._seal)

    def _seal(self) -> None:
        self._timer = None
        if not self.node.pool:
            return
        ready = self.node.ready_at()
        if ready > self.node.now:
            self._timer = self.node.schedule(ready - self.node.now, self._seal)
            return
        batch = central_sequence(self.node.select_txns(), self.config.batch_size)[0]
        now = int(self.node.now)
        block = seal_block(self.node.build_block(timestamp=now, txns=batch), self.node.id, self.node.registry)
        if self.byzantine == "equivocate" and len(batch) > 0:
            alt = self.node.build_block(timestamp=now + 1, txns=tuple(reversed(batch))[: max(1, len(batch) - 1)])
            alt = seal_block(alt, self.node.id, self.node.registry)
            lower, upper = self._halves()
            self.node.send_block(alt, targets=upper)
            self.node.propose_block(block, targets=lower)
        else:
            self.node.propose_block(block)
        self.on_pool_changed()

    def verify_cert(self, block: Block, view: ChainView) -> bool:
        return verify_seal(block, self.sequencer, self.node.registry)
