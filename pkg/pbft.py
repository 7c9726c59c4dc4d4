"""
pbft.py - PBFT replica state machine and its network engine.

PbftReplica is a pure state machine: step(msg, now) returns the messages to
send and the blocks committed by that step, with no clock or network of its
own. PbftEngine drives a replica from node events and owns the batch and
view-change timers.

Quorums are expressed in N and f = (N - 1) // 3 so that they also hold when N
is not exactly 3f + 1: a block is prepared with N - f - 1 matching prepares
from backups plus the pre-prepare, committed with N - f commit votes; view
changes and checkpoints need N - f messages. At N = 3f + 1 these are the
classic 2f and 2f + 1.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

from codec import ZERO_HASH, encode, uint_bytes
from consensus import PBFT, ConsensusConfig, ConsensusEngine
from ledger import Block, ChainView, CommitCert, InvalidBlock, validate_body
from signatures import KeyRegistry, node_identity

logger = logging.getLogger(__name__)

CLIENT_BATCH = "client-batch"
PRE_PREPARE = "pre-prepare"
PREPARE = "prepare"
COMMIT = "commit"
VIEW_CHANGE = "view-change"
NEW_VIEW = "new-view"
CHECKPOINT = "checkpoint"
BLOCK_REQUEST = "block-request"
BLOCK_RESPONSE = "block-response"

MAX_BLOCKS_PER_RESPONSE = 64
CATCHUP_RETRY_TICKS = 500


class PbftError(Exception):
    """Base class for PBFT errors."""
    pass


class InvalidSignature(PbftError):
    pass


class WrongView(PbftError):
    pass


@dataclass(frozen=True)
class ClientBatch:
    """Local input: a block proposal for the leader, optionally with an equivocating twin."""
    block: Block
    alt_block: Optional[Block] = None
    kind = CLIENT_BATCH


@dataclass(frozen=True)
class PrePrepare:
    view: int
    seq: int
    digest: bytes
    block: Block
    sender: int
    signature: bytes = b""
    kind = PRE_PREPARE

    def wire(self) -> bytes:
        return encode([b"pp", uint_bytes(self.view), uint_bytes(self.seq), self.digest,
                       uint_bytes(self.sender), self.block.canonical_bytes()])


@dataclass(frozen=True)
class Prepare:
    view: int
    seq: int
    digest: bytes
    sender: int
    signature: bytes = b""
    kind = PREPARE

    def wire(self) -> bytes:
        return encode([b"p", uint_bytes(self.view), uint_bytes(self.seq), self.digest, uint_bytes(self.sender)])


@dataclass(frozen=True)
class Commit:
    view: int
    seq: int
    digest: bytes
    sender: int
    signature: bytes = b""
    kind = COMMIT

    def wire(self) -> bytes:
        return encode([b"c", uint_bytes(self.view), uint_bytes(self.seq), self.digest, uint_bytes(self.sender)])


@dataclass(frozen=True)
class Checkpoint:
    seq: int
    block_hash: bytes
    state_root: bytes
    sender: int
    signature: bytes = b""
    kind = CHECKPOINT

    def wire(self) -> bytes:
        return encode([b"cp", uint_bytes(self.seq), self.block_hash, self.state_root, uint_bytes(self.sender)])


@dataclass(frozen=True)
class PreparedEntry:
    """A prepared certificate: the leader's signed pre-prepare and the backups' signed prepares."""
    view: int
    seq: int
    digest: bytes
    block: Block
    leader_signature: bytes = b""
    prepares: Tuple[Tuple[int, bytes], ...] = ()

    def wire(self) -> list:
        return [uint_bytes(self.view), uint_bytes(self.seq), self.digest, self.leader_signature,
                [[uint_bytes(sender), signature] for sender, signature in self.prepares]]


@dataclass(frozen=True)
class ViewChange:
    new_view: int
    stable_seq: int
    stable_hash: bytes
    prepared: Tuple[PreparedEntry, ...]
    sender: int
    signature: bytes = b""
    kind = VIEW_CHANGE

    def wire(self) -> bytes:
        return encode([b"vc", uint_bytes(self.new_view), uint_bytes(self.stable_seq), self.stable_hash,
                       [p.wire() for p in self.prepared],
                       uint_bytes(self.sender)])


@dataclass(frozen=True)
class NewView:
    view: int
    view_changes: Tuple[ViewChange, ...]
    pre_prepares: Tuple[PrePrepare, ...]
    sender: int
    signature: bytes = b""
    kind = NEW_VIEW

    def wire(self) -> bytes:
        return encode([b"nv", uint_bytes(self.view),
                       [vc.signature for vc in self.view_changes],
                       [[uint_bytes(pp.seq), pp.digest] for pp in self.pre_prepares],
                       uint_bytes(self.sender)])


@dataclass(frozen=True)
class BlockRequest:
    from_seq: int
    to_seq: int
    sender: int
    signature: bytes = b""
    kind = BLOCK_REQUEST

    def wire(self) -> bytes:
        return encode([b"br", uint_bytes(self.from_seq), uint_bytes(self.to_seq), uint_bytes(self.sender)])


@dataclass(frozen=True)
class BlockResponse:
    blocks: Tuple[Tuple[Block, CommitCert], ...]
    sender: int
    signature: bytes = b""
    kind = BLOCK_RESPONSE

    def wire(self) -> bytes:
        return encode([b"bs", [b.canonical_bytes() for b, _ in self.blocks], uint_bytes(self.sender)])


PBFT_KINDS = (PRE_PREPARE, PREPARE, COMMIT, VIEW_CHANGE, NEW_VIEW, CHECKPOINT, BLOCK_REQUEST, BLOCK_RESPONSE)


class Outbound(NamedTuple):
    msg: object
    targets: Optional[Tuple[int, ...]] = None


class StepResult(NamedTuple):
    outbound: List[Outbound]
    committed: List[Tuple[Block, CommitCert]]


@dataclass
class LogEntry:
    view: int
    seq: int
    pre_prepare: Optional[PrePrepare] = None
    prepares: Dict[bytes, Dict[int, bytes]] = field(default_factory=dict)
    commits: Dict[bytes, Dict[int, bytes]] = field(default_factory=dict)
    own_prepare: Optional[Prepare] = None
    own_commit: Optional[Commit] = None
    prepared: bool = False
    committed: bool = False

    @property
    def phase(self) -> str:
        if self.committed:
            return "committed"
        if self.prepared:
            return "prepared"
        return "pre-prepared" if self.pre_prepare is not None else "pending"


@dataclass(frozen=True)
class PbftState:
    view: int
    seq: int
    view_changing: bool
    phases: Dict[int, str]
    prepare_votes: Dict[int, int]
    commit_votes: Dict[int, int]
    checkpoint: Tuple[int, bytes]


def commit_quorum(n: int) -> int:
    return n - (n - 1) // 3


def verify_commit_cert(block: Block, cert: CommitCert, registry: KeyRegistry, n: int) -> bool:
    """Check that cert holds N - f valid commit votes for block."""
    if not isinstance(cert, CommitCert) or cert.seq != block.height:
        return False
    voters = set()
    for voter, signature in cert.votes:
        if voter in voters or not 0 <= voter < n:
            continue
        vote = Commit(cert.view, cert.seq, block.hash, voter)
        if registry.verify(node_identity(voter), vote.wire(), signature):
            voters.add(voter)
    return len(voters) >= commit_quorum(n)


def verify_prepared(entry: PreparedEntry, registry: KeyRegistry, n: int, before_view: int) -> bool:
    """
    Check a prepared certificate carried in a view-change to before_view: a
    pre-prepare signed by the leader of an earlier view plus N - f - 1 valid
    prepares from distinct backups.
    """
    if not isinstance(entry, PreparedEntry) or entry.view >= before_view:
        return False
    if entry.block.hash != entry.digest or entry.block.height != entry.seq:
        return False
    leader = entry.view % n
    pp = PrePrepare(entry.view, entry.seq, entry.digest, entry.block, leader)
    if not registry.verify(node_identity(leader), pp.wire(), entry.leader_signature):
        return False
    backups = set()
    for sender, signature in entry.prepares:
        if sender == leader or sender in backups or not 0 <= sender < n:
            continue
        prepare = Prepare(entry.view, entry.seq, entry.digest, sender)
        if registry.verify(node_identity(sender), prepare.wire(), signature):
            backups.add(sender)
    return len(backups) >= n - (n - 1) // 3 - 1


class PbftReplica:
    """
    One PBFT replica.

    Args:
        node_id: This replica's id
        n: Number of replicas
        registry: Keys for signing own messages and checking embedded ones
        genesis_hash: Digest of the shared genesis block (sequence 0)
        checkpoint_interval: Blocks between checkpoints
        verify_block: Extra proposal validation hook (body, parent, state root)
        on_commit: Called synchronously for every block as it commits
        state_root_of: State root after a committed sequence, for checkpoints
        byzantine: None, 'equivocate' (as leader) or 'withhold' (no votes)
        verify_signatures: Check each message signature in step(); off when the
            transport already verified it
    """

    def __init__(self, node_id: int, n: int, registry: KeyRegistry, genesis_hash: bytes = ZERO_HASH,
                 checkpoint_interval: int = 10,
                 verify_block: Optional[Callable[[Block, "PbftReplica"], bool]] = None,
                 on_commit: Optional[Callable[[Block, CommitCert], None]] = None,
                 state_root_of: Optional[Callable[[int], bytes]] = None,
                 byzantine: Optional[str] = None, verify_signatures: bool = True):
        self.id = node_id
        self.n = n
        self.f = (n - 1) // 3
        self.registry = registry
        self.checkpoint_interval = checkpoint_interval
        self.verify_block = verify_block
        self.on_commit = on_commit
        self.state_root_of = state_root_of
        self.byzantine = byzantine
        self.verify_signatures = verify_signatures
        self.window = 4 * checkpoint_interval

        self.view = 0
        self.view_changing = False
        self.target_view = 0
        self.last_committed = 0
        self.committed: Dict[int, Tuple[Block, CommitCert]] = {}
        self.committed_hashes: Dict[int, bytes] = {0: genesis_hash}
        self.log: Dict[Tuple[int, int], LogEntry] = {}
        # Highest-view prepared certificate per seq; survives view changes until a stable checkpoint
        self.prepared_certs: Dict[int, PreparedEntry] = {}
        self._ready: Dict[int, LogEntry] = {}
        self.view_changes: Dict[int, Dict[int, ViewChange]] = {}
        self.own_view_change: Optional[ViewChange] = None
        self.current_new_view: Optional[NewView] = None
        self._new_view_sent = set()
        self.checkpoints: Dict[int, Dict[Tuple[bytes, bytes], Dict[int, bytes]]] = {}
        self.stable_seq = 0
        self.stable_hash = genesis_hash
        self._catchup_target = 0
        self._catchup_at = -CATCHUP_RETRY_TICKS
        self._now = 0

        self.consecutive_view_changes = 0
        self.view_changes_started = 0
        self.views_installed = 0
        self.equivocations_seen = 0
        self.wrong_view_dropped = 0

    # Quorums

    @property
    def prepare_quorum(self) -> int:
        return self.n - self.f - 1

    @property
    def commit_quorum(self) -> int:
        return self.n - self.f

    @property
    def view_change_quorum(self) -> int:
        return self.n - self.f

    @property
    def checkpoint_quorum(self) -> int:
        return self.n - self.f

    def primary(self, view: int) -> int:
        return view % self.n

    @property
    def is_primary(self) -> bool:
        return self.primary(self.view) == self.id

    def adopt_history(self, block_hashes: Sequence[bytes]) -> None:
        """Treat a trusted chain (genesis first) as committed and stable; no certificates exist for it."""
        for seq, block_hash in enumerate(block_hashes):
            self.committed_hashes[seq] = block_hash
        self.last_committed = len(block_hashes) - 1
        self.stable_seq = self.last_committed
        self.stable_hash = block_hashes[-1]

    # Queries

    def in_flight(self) -> Optional[LogEntry]:
        """Lowest uncommitted pre-prepared entry of the current view."""
        pending = [e for (v, s), e in self.log.items()
                   if v == self.view and s > self.last_committed and e.pre_prepare is not None]
        return min(pending, key=lambda e: e.seq) if pending else None

    def can_propose(self) -> bool:
        return self.is_primary and not self.view_changing and self.in_flight() is None

    def state(self) -> PbftState:
        entries = {s: e for (v, s), e in sorted(self.log.items()) if v == self.view}
        return PbftState(
            view=self.view,
            seq=self.last_committed,
            view_changing=self.view_changing,
            phases={s: e.phase for s, e in entries.items()},
            prepare_votes={s: sum(len(p) for p in e.prepares.values()) for s, e in entries.items()},
            commit_votes={s: sum(len(c) for c in e.commits.values()) for s, e in entries.items()},
            checkpoint=(self.stable_seq, self.stable_hash),
        )

    # Entry points

    def step(self, msg, now: float = 0) -> StepResult:
        """
        Apply one message. Stale and duplicate messages are ignored; wrong-view
        messages are dropped and counted.

        Raises:
            InvalidSignature: The message signature does not verify
        """
        self._now = now
        out: List[Outbound] = []
        committed: List[Tuple[Block, CommitCert]] = []
        handler = {
            CLIENT_BATCH: self._on_client_batch,
            PRE_PREPARE: self._on_pre_prepare,
            PREPARE: self._on_prepare,
            COMMIT: self._on_commit,
            CHECKPOINT: self._on_checkpoint,
            VIEW_CHANGE: self._on_view_change,
            NEW_VIEW: self._on_new_view,
            BLOCK_REQUEST: self._on_block_request,
            BLOCK_RESPONSE: self._on_block_response,
        }.get(getattr(msg, "kind", None))
        if handler is None:
            raise PbftError(f"Unknown PBFT message: {msg!r}")
        if getattr(msg, "sender", self.id) == self.id and msg.kind != CLIENT_BATCH:
            return StepResult(out, committed)
        if msg.kind != CLIENT_BATCH and self.verify_signatures:
            if not self.registry.verify(node_identity(msg.sender), msg.wire(), msg.signature):
                raise InvalidSignature(f"Bad {msg.kind} signature from replica {msg.sender}")
        try:
            handler(msg, out, committed)
        except WrongView as e:
            self.wrong_view_dropped += 1
            logger.debug(f"replica {self.id} dropped message: {e}")
        return StepResult(out, committed)

    def on_timeout(self, now: float = 0) -> StepResult:
        """View-change timer expired: move to the next view."""
        self._now = now
        out: List[Outbound] = []
        committed: List[Tuple[Block, CommitCert]] = []
        next_view = (self.target_view if self.view_changing else self.view) + 1
        self.consecutive_view_changes += 1
        self._start_view_change(next_view, out, committed)
        return StepResult(out, committed)

    def retransmit(self, now: float = 0) -> StepResult:
        """Resend the current view-change, or the in-flight pre-prepare and own votes."""
        self._now = now
        out: List[Outbound] = []
        if self.view_changing:
            if self.own_view_change is not None:
                out.append(Outbound(self.own_view_change))
            return StepResult(out, [])
        entry = self.in_flight()
        if entry is not None:
            if self.is_primary:
                out.append(Outbound(entry.pre_prepare))
            self._resend_votes(entry, out)
        return StepResult(out, [])

    # Helpers

    def _sign(self, msg):
        return replace(msg, signature=self.registry.sign(node_identity(self.id), msg.wire()))

    def _entry(self, view: int, seq: int) -> LogEntry:
        entry = self.log.get((view, seq))
        if entry is None:
            entry = LogEntry(view, seq)
            self.log[(view, seq)] = entry
        return entry

    def _resend_votes(self, entry: LogEntry, out: List[Outbound]) -> None:
        if entry.own_prepare is not None:
            out.append(Outbound(entry.own_prepare))
        if entry.own_commit is not None:
            out.append(Outbound(entry.own_commit))

    def _others(self) -> List[int]:
        return [i for i in range(self.n) if i != self.id]

    # Normal case

    def _on_client_batch(self, batch: ClientBatch, out, committed) -> None:
        if not self.can_propose():
            return
        seq = self.last_committed + 1
        block = batch.block
        if block.height != seq or block.parent_hash != self.committed_hashes[self.last_committed]:
            logger.debug(f"replica {self.id} refuses proposal at height {block.height}, expected {seq}")
            return
        pp = self._sign(PrePrepare(self.view, seq, block.hash, block, self.id))
        entry = self._entry(self.view, seq)
        entry.pre_prepare = pp
        if self.byzantine == "equivocate" and batch.alt_block is not None:
            alt = batch.alt_block
            twin = self._sign(PrePrepare(self.view, seq, alt.hash, alt, self.id))
            others = self._others()
            middle = len(others) // 2
            out.append(Outbound(pp, tuple(others[:middle])))
            out.append(Outbound(twin, tuple(others[middle:])))
        else:
            out.append(Outbound(pp))
        self._advance(entry, out, committed)

    def _on_pre_prepare(self, pp: PrePrepare, out, committed) -> None:
        if pp.sender != self.primary(pp.view):
            return
        if self.view_changing or pp.view != self.view:
            raise WrongView(f"pre-prepare for view {pp.view}, replica in view {self.view}")
        if pp.digest != pp.block.hash or pp.block.height != pp.seq:
            return
        if pp.seq <= self.stable_seq or pp.seq > self.stable_seq + self.window:
            return
        entry = self._entry(pp.view, pp.seq)
        if entry.pre_prepare is not None:
            if entry.pre_prepare.digest != pp.digest:
                self.equivocations_seen += 1
                logger.warning(f"replica {self.id} saw conflicting pre-prepares for view {pp.view} seq {pp.seq}")
            else:
                self._resend_votes(entry, out)
            return
        if pp.seq <= self.last_committed:
            if self.committed_hashes.get(pp.seq) != pp.digest:
                return
        elif self.verify_block is not None and not self.verify_block(pp.block, self):
            logger.debug(f"replica {self.id} rejected proposal for seq {pp.seq}")
            return
        entry.pre_prepare = pp
        if self.id != pp.sender and self.byzantine != "withhold":
            prepare = self._sign(Prepare(pp.view, pp.seq, pp.digest, self.id))
            entry.prepares.setdefault(pp.digest, {})[self.id] = prepare.signature
            entry.own_prepare = prepare
            out.append(Outbound(prepare))
        if pp.seq > self.last_committed + 1:
            self._request_blocks(pp.seq - 1, pp.sender, out)
        self._advance(entry, out, committed)

    def _on_prepare(self, msg: Prepare, out, committed) -> None:
        if msg.view < self.view:
            raise WrongView(f"{msg.kind} for old view {msg.view}")
        if msg.seq <= self.stable_seq:
            return
        entry = self._entry(msg.view, msg.seq)
        entry.prepares.setdefault(msg.digest, {})[msg.sender] = msg.signature
        self._advance(entry, out, committed)

    def _on_commit(self, msg: Commit, out, committed) -> None:
        if msg.view < self.view:
            raise WrongView(f"{msg.kind} for old view {msg.view}")
        if msg.seq <= self.stable_seq:
            return
        entry = self._entry(msg.view, msg.seq)
        entry.commits.setdefault(msg.digest, {})[msg.sender] = msg.signature
        self._advance(entry, out, committed)

    def _advance(self, entry: LogEntry, out, committed) -> None:
        pp = entry.pre_prepare
        if pp is None or entry.view != self.view or self.view_changing:
            return
        digest = pp.digest
        if not entry.prepared:
            leader = self.primary(entry.view)
            backups = [s for s in entry.prepares.get(digest, {}) if s != leader]
            if len(backups) >= self.prepare_quorum:
                entry.prepared = True
                self._record_prepared(entry)
        if entry.prepared and entry.own_commit is None and self.byzantine != "withhold":
            vote = self._sign(Commit(entry.view, entry.seq, digest, self.id))
            entry.commits.setdefault(digest, {})[self.id] = vote.signature
            entry.own_commit = vote
            out.append(Outbound(vote))
        if entry.prepared and not entry.committed and len(entry.commits.get(digest, {})) >= self.commit_quorum:
            entry.committed = True
            if entry.seq > self.last_committed:
                self._ready[entry.seq] = entry
            self._deliver(out, committed)

    def _record_prepared(self, entry: LogEntry) -> None:
        current = self.prepared_certs.get(entry.seq)
        if current is not None and current.view >= entry.view:
            return
        pp = entry.pre_prepare
        leader = self.primary(entry.view)
        proof = tuple(sorted((s, sig) for s, sig in entry.prepares[pp.digest].items() if s != leader))
        self.prepared_certs[entry.seq] = PreparedEntry(entry.view, entry.seq, pp.digest, pp.block, pp.signature, proof)

    def _deliver(self, out, committed) -> None:
        while True:
            seq = self.last_committed + 1
            entry = self._ready.pop(seq, None)
            if entry is None:
                break
            block = entry.pre_prepare.block
            if block.parent_hash != self.committed_hashes[seq - 1]:
                logger.error(f"replica {self.id} committed seq {seq} does not extend its chain")
                break
            votes = tuple(sorted(entry.commits[entry.pre_prepare.digest].items()))
            self._commit(block, CommitCert(entry.view, seq, votes), out, committed)
        if self._ready:
            highest = max(self._ready)
            if highest > self.last_committed + 1:
                leader = self.primary(self.view)
                self._request_blocks(highest - 1, leader if leader != self.id else self._others()[0], out)

    def _commit(self, block: Block, cert: CommitCert, out, committed) -> None:
        seq = block.height
        self.committed[seq] = (block, cert)
        self.committed_hashes[seq] = block.hash
        self.last_committed = seq
        self.consecutive_view_changes = 0
        committed.append((block, cert))
        if self.on_commit is not None:
            self.on_commit(block, cert)
        if seq % self.checkpoint_interval == 0:
            root = self.state_root_of(seq) if self.state_root_of is not None else block.hash
            checkpoint = self._sign(Checkpoint(seq, block.hash, root, self.id))
            out.append(Outbound(checkpoint))
            self._record_checkpoint(checkpoint, out)

    # Checkpoints and catch-up

    def _on_checkpoint(self, msg: Checkpoint, out, committed) -> None:
        self._record_checkpoint(msg, out)

    def _record_checkpoint(self, msg: Checkpoint, out) -> None:
        if msg.seq <= self.stable_seq:
            return
        votes = self.checkpoints.setdefault(msg.seq, {}).setdefault((msg.block_hash, msg.state_root), {})
        votes[msg.sender] = msg.signature
        if len(votes) < self.checkpoint_quorum:
            return
        self.stable_seq = msg.seq
        self.stable_hash = msg.block_hash
        for key in [k for k in self.log if k[1] <= msg.seq]:
            del self.log[key]
        for seq in [s for s in self.checkpoints if s <= msg.seq]:
            del self.checkpoints[seq]
        for seq in [s for s in self.prepared_certs if s <= msg.seq]:
            del self.prepared_certs[seq]
        for seq in [s for s in self._ready if s <= self.last_committed]:
            del self._ready[seq]
        if msg.seq > self.last_committed:
            peer = msg.sender if msg.sender != self.id else self._others()[0]
            self._request_blocks(msg.seq, peer, out)

    def _request_blocks(self, upto: int, peer: int, out) -> None:
        if upto <= self.last_committed:
            return
        if upto <= self._catchup_target and self._now - self._catchup_at < CATCHUP_RETRY_TICKS:
            return
        self._catchup_target = upto
        self._catchup_at = self._now
        request = self._sign(BlockRequest(self.last_committed + 1, upto, self.id))
        out.append(Outbound(request, (peer,)))

    def _on_block_request(self, msg: BlockRequest, out, committed) -> None:
        upto = min(msg.to_seq, self.last_committed, msg.from_seq + MAX_BLOCKS_PER_RESPONSE - 1)
        blocks = tuple(self.committed[s] for s in range(msg.from_seq, upto + 1) if s in self.committed)
        if blocks:
            out.append(Outbound(self._sign(BlockResponse(blocks, self.id)), (msg.sender,)))

    def _on_block_response(self, msg: BlockResponse, out, committed) -> None:
        for block, cert in sorted(msg.blocks, key=lambda bc: bc[0].height):
            seq = block.height
            if seq != self.last_committed + 1:
                continue
            if block.parent_hash != self.committed_hashes[self.last_committed]:
                break
            if not verify_commit_cert(block, cert, self.registry, self.n):
                logger.warning(f"replica {self.id} got block {seq} with an invalid commit certificate")
                break
            self._commit(block, cert, out, committed)
        self._ready = {s: e for s, e in self._ready.items() if s > self.last_committed}
        self._deliver(out, committed)
        if self._catchup_target > self.last_committed:
            self._catchup_at = -CATCHUP_RETRY_TICKS
            self._request_blocks(self._catchup_target, msg.sender, out)

    # View change

    def _prepared_entries(self) -> Tuple[PreparedEntry, ...]:
        return tuple(self.prepared_certs[s] for s in sorted(self.prepared_certs) if s > self.stable_seq)

    def _start_view_change(self, new_view: int, out, committed) -> None:
        if new_view <= self.view or (self.view_changing and new_view <= self.target_view):
            return
        self.view_changing = True
        self.target_view = new_view
        self.view_changes_started += 1
        vc = self._sign(ViewChange(new_view, self.stable_seq, self.stable_hash, self._prepared_entries(), self.id))
        self.own_view_change = vc
        self.view_changes.setdefault(new_view, {})[self.id] = vc
        out.append(Outbound(vc))
        logger.debug(f"replica {self.id} starts view change to {new_view}")
        self._try_new_view(new_view, out, committed)

    def _on_view_change(self, vc: ViewChange, out, committed) -> None:
        if vc.new_view <= self.view:
            # The sender missed the new-view that installed our view
            if not self.view_changing and self.current_new_view is not None:
                out.append(Outbound(self.current_new_view, (vc.sender,)))
            return
        if not self._valid_prepared(vc):
            logger.warning(f"replica {self.id} ignored view-change from {vc.sender}: unproven prepared entry")
            return
        self.view_changes.setdefault(vc.new_view, {})[vc.sender] = vc
        current = self.target_view if self.view_changing else self.view
        ahead: Dict[int, int] = {}
        for view, messages in self.view_changes.items():
            if view <= current:
                continue
            for sender in messages:
                if sender != self.id:
                    ahead[sender] = max(ahead.get(sender, 0), view)
        if len(ahead) >= self.f + 1:
            self._start_view_change(min(ahead.values()), out, committed)
        self._try_new_view(vc.new_view, out, committed)

    def _valid_prepared(self, vc: ViewChange) -> bool:
        return all(verify_prepared(p, self.registry, self.n, vc.new_view) for p in vc.prepared)

    @staticmethod
    def _select_reissue(vcs: Sequence[ViewChange]) -> List[PreparedEntry]:
        floor = max(vc.stable_seq for vc in vcs)
        best: Dict[int, PreparedEntry] = {}
        for vc in vcs:
            for p in vc.prepared:
                if p.seq > floor and (p.seq not in best or best[p.seq].view < p.view):
                    best[p.seq] = p
        return [best[s] for s in sorted(best)]

    def _try_new_view(self, view: int, out, committed) -> None:
        if self.primary(view) != self.id or view in self._new_view_sent:
            return
        if not (self.view_changing and self.target_view == view):
            return
        vcs = self.view_changes.get(view, {})
        if len(vcs) < self.view_change_quorum:
            return
        proofs = tuple(vcs[s] for s in sorted(vcs))
        reissue = tuple(
            self._sign(PrePrepare(view, p.seq, p.digest, p.block, self.id))
            for p in self._select_reissue(proofs)
        )
        nv = self._sign(NewView(view, proofs, reissue, self.id))
        self._new_view_sent.add(view)
        out.append(Outbound(nv))
        logger.info(f"replica {self.id} installs view {view} as primary")
        self._install_view(nv, out, committed)

    def _on_new_view(self, nv: NewView, out, committed) -> None:
        if nv.sender != self.primary(nv.view) or nv.view <= self.view:
            return
        valid: Dict[int, ViewChange] = {}
        for vc in nv.view_changes:
            if vc.new_view != nv.view or vc.sender in valid:
                continue
            if (self.registry.verify(node_identity(vc.sender), vc.wire(), vc.signature)
                    and self._valid_prepared(vc)):
                valid[vc.sender] = vc
        if len(valid) < self.view_change_quorum:
            logger.warning(f"replica {self.id} rejected new-view {nv.view}: {len(valid)} valid view-changes")
            return
        expected = [(p.seq, p.digest) for p in self._select_reissue(list(valid.values()))]
        if expected != [(pp.seq, pp.digest) for pp in nv.pre_prepares]:
            logger.warning(f"replica {self.id} rejected new-view {nv.view}: reissued proposals do not match")
            return
        for pp in nv.pre_prepares:
            if (pp.view != nv.view or pp.sender != nv.sender or pp.digest != pp.block.hash
                    or not self.registry.verify(node_identity(pp.sender), pp.wire(), pp.signature)):
                logger.warning(f"replica {self.id} rejected new-view {nv.view}: bad reissued pre-prepare")
                return
        self._install_view(nv, out, committed)

    def _install_view(self, nv: NewView, out, committed) -> None:
        self.view = nv.view
        self.view_changing = False
        self.target_view = nv.view
        self.current_new_view = nv
        self.own_view_change = None
        self.views_installed += 1
        for view in [v for v in self.view_changes if v <= nv.view]:
            del self.view_changes[view]
        for key in [k for k, e in self.log.items() if k[0] < nv.view and not e.committed]:
            del self.log[key]
        for pp in nv.pre_prepares:
            self._accept_reissued(pp, out, committed)
        for (view, _), entry in sorted(self.log.items()):
            if view == self.view:
                self._advance(entry, out, committed)

    def _accept_reissued(self, pp: PrePrepare, out, committed) -> None:
        if pp.sender == self.id:
            if pp.seq > self.stable_seq:
                self._entry(pp.view, pp.seq).pre_prepare = pp
                if pp.seq > self.last_committed + 1:
                    others = self._others()
                    if others:
                        self._request_blocks(pp.seq - 1, others[0], out)
            return
        self._on_pre_prepare(pp, out, committed)


def pbft_step(replica: PbftReplica, msg, now: float = 0):
    """Apply msg; returns (replica, outbound messages, committed blocks)."""
    result = replica.step(msg, now)
    return replica, result.outbound, result.committed


def pbft_view_change(replica: PbftReplica, timeout: float = 0):
    """Handle an expired view-change timer; returns (replica, outbound messages)."""
    result = replica.on_timeout(timeout)
    return replica, result.outbound


class PbftEngine(ConsensusEngine):
    """Runs a PbftReplica on a node: relays its messages and owns its timers."""

    name = PBFT

    def __init__(self, node, config: ConsensusConfig):
        super().__init__(node, config)
        self.replica = PbftReplica(
            node.id, config.n_nodes, node.registry,
            genesis_hash=node.chain.genesis_hash,
            checkpoint_interval=config.checkpoint_interval,
            verify_block=self._verify_block,
            on_commit=self._on_replica_commit,
            state_root_of=lambda seq: node.store.root_history.get(seq, ZERO_HASH),
            byzantine=self.byzantine,
            verify_signatures=False,
        )
        self._batch_timer = None
        self._vc_timer = None
        self._installed = 0
        self._stepping = False

    def start(self) -> None:
        self.on_pool_changed()

    def stop(self) -> None:
        for timer in (self._batch_timer, self._vc_timer):
            if timer is not None:
                timer.cancel()
        self._batch_timer = None
        self._vc_timer = None

    def on_message(self, envelope) -> bool:
        if envelope.kind not in PBFT_KINDS:
            return False
        self._step(self.replica.step, envelope.payload, self.node.now)
        return True

    def on_pool_changed(self) -> None:
        # Commits re-enter through the node while the replica is mid-step
        if self._stepping:
            return
        self._maybe_propose()
        self._update_vc_timer()

    def on_preload(self) -> None:
        self.replica.adopt_history(self.node.chain.main_branch)

    def on_heal(self) -> None:
        self._step(self.replica.retransmit, self.node.now)

    def on_restart(self) -> None:
        self.stop()
        self.on_pool_changed()
        self._step(self.replica.retransmit, self.node.now)

    def verify_cert(self, block: Block, view: ChainView) -> bool:
        return verify_commit_cert(block, block.cert, self.node.registry, self.config.n_nodes)

    def stats(self):
        return {
            "view": self.replica.view,
            "view_changes_started": self.replica.view_changes_started,
            "views_installed": self.replica.views_installed,
            "equivocations_seen": self.replica.equivocations_seen,
        }

    # Internals

    def _verify_block(self, block: Block, replica: PbftReplica) -> bool:
        try:
            validate_body(block, self.config.batch_size)
        except InvalidBlock:
            return False
        if not self.node.verify_txns(block.txns):
            return False
        if block.height == replica.last_committed + 1:
            return (block.parent_hash == self.node.chain.tip.hash
                    and block.header.state_root == self.node.store.state_root())
        return True

    def _on_replica_commit(self, block: Block, cert: CommitCert) -> None:
        committed = Block(header=block.header, txns=block.txns, cert=cert)
        self.node.commit_block(committed)

    def _step(self, fn, *args) -> None:
        self._stepping = True
        try:
            result = fn(*args)
        finally:
            self._stepping = False
        self._dispatch(result)

    def _dispatch(self, result: StepResult) -> None:
        for outbound in result.outbound:
            msg = outbound.msg
            self.node.network.broadcast(self.node.id, msg.kind, msg, msg.wire(), consensus=True,
                                        targets=outbound.targets, signature=msg.signature)
            if msg.kind == VIEW_CHANGE and msg.sender == self.node.id:
                self.node.network.trace.record(self.node.now, self.node.id, self.node.id,
                                               "view-change-start", f"v{msg.new_view}")
        if self.replica.views_installed != self._installed:
            self._installed = self.replica.views_installed
            self.node.network.trace.record(self.node.now, self.node.id, self.node.id,
                                           "view-installed", f"v{self.replica.view}")
            self._reset_vc_timer()
        if result.committed:
            self._reset_vc_timer()
        self._maybe_propose()
        self._update_vc_timer()

    def _maybe_propose(self) -> None:
        replica = self.replica
        if not replica.can_propose() or not self.node.pool:
            return
        wait = max(0, self.node.ready_at() - self.node.now)
        if len(self.node.pool) >= self.config.batch_size and wait == 0:
            self._propose()
        elif self._batch_timer is None:
            self._batch_timer = self.node.schedule(max(self.config.batch_timeout, wait), self._on_batch_timer)

    def _on_batch_timer(self) -> None:
        self._batch_timer = None
        replica = self.replica
        if replica.is_primary and not replica.view_changing and replica.in_flight() is not None:
            self._step(replica.retransmit, self.node.now)
            if self._batch_timer is None:
                self._batch_timer = self.node.schedule(self.config.batch_timeout, self._on_batch_timer)
            return
        if replica.can_propose() and self.node.pool:
            wait = self.node.ready_at() - self.node.now
            if wait > 0:
                self._batch_timer = self.node.schedule(wait, self._on_batch_timer)
                return
            self._propose()

    def _propose(self) -> None:
        now = int(self.node.now)
        txns = self.node.select_txns()
        block = self.node.build_block(timestamp=now, txns=txns)
        alt = None
        if self.byzantine == "equivocate" and txns:
            alt = self.node.build_block(timestamp=now + 1, txns=tuple(reversed(txns))[: max(1, len(txns) - 1)])
        if self._batch_timer is not None:
            self._batch_timer.cancel()
        self._batch_timer = self.node.schedule(self.config.batch_timeout, self._on_batch_timer)
        self._step(self.replica.step, ClientBatch(block, alt), self.node.now)

    def _reset_vc_timer(self) -> None:
        if self._vc_timer is not None:
            self._vc_timer.cancel()
            self._vc_timer = None

    def _update_vc_timer(self) -> None:
        replica = self.replica
        waiting = bool(self.node.pool) or replica.view_changing or replica.in_flight() is not None
        if waiting and self._vc_timer is None:
            backoff = min(self.config.view_change_backoff_cap, 2 ** replica.consecutive_view_changes)
            self._vc_timer = self.node.schedule(self.config.view_change_timeout * backoff, self._on_vc_timeout)
        elif not waiting and self._vc_timer is not None:
            self._reset_vc_timer()

    def _on_vc_timeout(self) -> None:
        self._vc_timer = None
        logger.info(f"t={self.node.now:.0f} node {self.node.id} view-change timeout in view {self.replica.view}")
        self._step(self.replica.on_timeout, self.node.now)
