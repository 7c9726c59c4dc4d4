"""
ledger.py - Transactions, blocks, the hash-pointer chain and fork bookkeeping.
"""

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Callable, Dict, List, Optional, Sequence, Set, Tuple

from codec import (
    ZERO_HASH,
    digest,
    encode,
    encode_args,
    merkle_root,
    text_bytes,
    uint_bytes,
)
from constants import DEFAULT_BATCH_SIZE, DEFAULT_CONFIRMATION_DEPTH
from utils import JsonLinesWriter

logger = logging.getLogger(__name__)

LONGEST_CHAIN = "longest-chain"
FINALIZED = "finalized"


class LedgerError(Exception):
    """Base class for chain errors."""
    pass


class UnknownParent(LedgerError):
    """The block's parent is not in the view; the block was buffered."""
    pass


class InvalidCert(LedgerError):
    pass


class DuplicateBlock(LedgerError):
    pass


class SafetyViolation(LedgerError):
    """Two conflicting certified blocks exist at one height."""
    pass


class InvalidBlock(LedgerError):
    pass


@dataclass(frozen=True)
class Transaction:
    """A signed contract invocation. txn_id covers every field except the signature."""
    sender: str
    contract: str
    method: str
    args: Tuple[Any, ...]
    submit_time: int
    client_nonce: int = 0
    signature: bytes = field(default=b"", compare=False)

    def canonical_bytes(self) -> bytes:
        return encode([
            text_bytes(self.sender),
            text_bytes(self.contract),
            text_bytes(self.method),
            encode_args(self.args),
            uint_bytes(self.submit_time),
            uint_bytes(self.client_nonce),
        ])

    @cached_property
    def txn_id(self) -> bytes:
        return digest(self.canonical_bytes())

    def signed(self, registry) -> "Transaction":
        return replace(self, signature=registry.sign(self.sender, self.txn_id))

    def verify(self, registry) -> bool:
        return registry.verify(self.sender, self.txn_id, self.signature)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "txn_id": self.txn_id.hex(),
            "sender": self.sender,
            "contract": self.contract,
            "method": self.method,
            "args": [a.hex() if isinstance(a, bytes) else a for a in self.args],
            "submit_time": self.submit_time,
            "client_nonce": self.client_nonce,
        }


@dataclass(frozen=True)
class BlockHeader:
    height: int
    parent_hash: bytes
    proposer: int
    nonce: int
    state_root: bytes
    txn_root: bytes
    timestamp: int

    def canonical_bytes(self) -> bytes:
        return encode([
            uint_bytes(self.height),
            self.parent_hash,
            uint_bytes(self.proposer),
            uint_bytes(self.nonce),
            self.state_root,
            self.txn_root,
            uint_bytes(self.timestamp),
        ])


def hash_header(h: BlockHeader) -> bytes:
    """Digest of the header's canonical serialization."""
    return digest(h.canonical_bytes())


@dataclass(frozen=True)
class Seal:
    """Single-signer certificate (PoA proposer, central sequencer)."""
    signer: int
    signature: bytes


@dataclass(frozen=True)
class CommitCert:
    """PBFT commit certificate: the commit votes that finalized the block."""
    view: int
    seq: int
    votes: Tuple[Tuple[int, bytes], ...]


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    txns: Tuple[Transaction, ...] = ()
    cert: Optional[Any] = None

    @cached_property
    def hash(self) -> bytes:
        return hash_header(self.header)

    @property
    def height(self) -> int:
        return self.header.height

    @property
    def parent_hash(self) -> bytes:
        return self.header.parent_hash

    def canonical_bytes(self) -> bytes:
        return encode([self.header.canonical_bytes(), [t.txn_id for t in self.txns]])

    def to_dict(self) -> Dict[str, Any]:
        h = self.header
        return {
            "height": h.height,
            "hash": self.hash.hex(),
            "parent_hash": h.parent_hash.hex(),
            "proposer": h.proposer,
            "nonce": h.nonce,
            "state_root": h.state_root.hex(),
            "txn_root": h.txn_root.hex(),
            "timestamp": h.timestamp,
            "txns": [t.txn_id.hex() for t in self.txns],
        }


def txn_root(txns: Sequence[Transaction]) -> bytes:
    return merkle_root([t.txn_id for t in txns])


def make_block(height: int, parent_hash: bytes, proposer: int, state_root: bytes,
               txns: Sequence[Transaction], timestamp: int, nonce: int = 0,
               cert: Optional[Any] = None) -> Block:
    header = BlockHeader(
        height=height,
        parent_hash=parent_hash,
        proposer=proposer,
        nonce=nonce,
        state_root=state_root,
        txn_root=txn_root(txns),
        timestamp=timestamp,
    )
    return Block(header=header, txns=tuple(txns), cert=cert)


def make_genesis(state_root: bytes, txns: Sequence[Transaction] = ()) -> Block:
    return make_block(0, ZERO_HASH, 0, state_root, txns, timestamp=0)


def validate_body(block: Block, batch_size: int = DEFAULT_BATCH_SIZE) -> None:
    """
    Check the block body against its header.

    Raises:
        InvalidBlock: On txn_root mismatch or batch overflow
    """
    if len(block.txns) > batch_size and block.height > 0:
        raise InvalidBlock(f"Block {block.height} carries {len(block.txns)} txns, batch size is {batch_size}")
    if txn_root(block.txns) != block.header.txn_root:
        raise InvalidBlock(f"Block {block.height} txn_root mismatch")


@dataclass
class ChainUpdate:
    """Result of one append: blocks attached, and main-branch blocks removed/added."""
    attached: List[Block] = field(default_factory=list)
    removed: List[bytes] = field(default_factory=list)
    added: List[bytes] = field(default_factory=list)
    ancestor_height: int = 0
    # Buffered descendants refused because their height was already finalized
    conflicting: List[Block] = field(default_factory=list)

    @property
    def reorged(self) -> bool:
        return bool(self.removed)


CertVerifier = Callable[[Block, "ChainView"], bool]


class ChainView:
    """
    A block forest with fork choice.

    In longest-chain mode the main branch is the path to the highest block,
    ties broken by the smaller digest. In finalized mode at most one block may
    exist per height and the main branch is that unique sequence.
    """

    def __init__(self, genesis: Block, mode: str = LONGEST_CHAIN,
                 confirmation_depth: int = DEFAULT_CONFIRMATION_DEPTH,
                 cert_verifier: Optional[CertVerifier] = None):
        if mode not in (LONGEST_CHAIN, FINALIZED):
            raise LedgerError(f"Unknown fork-choice mode: {mode}")
        self.mode = mode
        self.confirmation_depth = confirmation_depth
        self.cert_verifier = cert_verifier
        self.genesis_hash = genesis.hash
        self.blocks: Dict[bytes, Block] = {genesis.hash: genesis}
        self.children: Dict[bytes, List[bytes]] = {genesis.hash: []}
        self.heads: Set[bytes] = {genesis.hash}
        self.main_branch: List[bytes] = [genesis.hash]
        self.by_height: Dict[int, bytes] = {0: genesis.hash}
        self.orphans: Dict[bytes, List[Block]] = {}
        self.total_appended = 0
        self.conflicts = 0

    @property
    def tip(self) -> Block:
        return self.blocks[self.main_branch[-1]]

    @property
    def height(self) -> int:
        return len(self.main_branch) - 1

    @property
    def confirmed_upto(self) -> int:
        if self.mode == FINALIZED:
            return self.height
        return max(0, self.height - self.confirmation_depth)

    def block_at(self, height: int) -> Optional[Block]:
        if 0 <= height < len(self.main_branch):
            return self.blocks[self.main_branch[height]]
        return None

    def on_main(self, block_hash: bytes) -> bool:
        block = self.blocks.get(block_hash)
        return block is not None and self.block_at(block.height) is block

    def missing_parents(self) -> List[bytes]:
        return [h for h in self.orphans if h not in self.blocks]

    def append(self, block: Block, trusted: bool = False) -> ChainUpdate:
        """
        Insert a block and recompute the main branch.

        Raises:
            DuplicateBlock: Block already present; nothing changes
            UnknownParent: Parent missing; the block is buffered until it arrives
            InvalidCert: Certificate rejected by the cert verifier
            SafetyViolation: Finalized mode saw a second block at one height
        """
        if block.hash in self.blocks:
            raise DuplicateBlock(block.hash.hex())
        if block.parent_hash not in self.blocks:
            pending = self.orphans.setdefault(block.parent_hash, [])
            if all(b.hash != block.hash for b in pending):
                pending.append(block)
            raise UnknownParent(block.parent_hash.hex())
        parent = self.blocks[block.parent_hash]
        if block.height != parent.height + 1:
            raise InvalidCert(f"Height {block.height} does not follow parent height {parent.height}")
        if not trusted and self.cert_verifier is not None and not self.cert_verifier(block, self):
            raise InvalidCert(f"Certificate rejected for block {block.height} {block.hash.hex()[:12]}")

        self._check_height(block)
        update = ChainUpdate(ancestor_height=self.height)
        self._insert(block, update)
        # Attach buffered descendants breadth-first
        queue = [block.hash]
        while queue:
            parent_hash = queue.pop(0)
            for child in self.orphans.pop(parent_hash, []):
                if child.hash in self.blocks:
                    continue
                if not trusted and self.cert_verifier is not None and not self.cert_verifier(child, self):
                    logger.debug(f"Dropping buffered block {child.height} with invalid certificate")
                    continue
                try:
                    self._check_height(child)
                except SafetyViolation as e:
                    logger.error(f"Refusing buffered block: {e}")
                    update.conflicting.append(child)
                    continue
                self._insert(child, update)
                queue.append(child.hash)
        return update

    def _check_height(self, block: Block) -> None:
        """Finalized mode admits one block per height; raises before anything is stored."""
        if self.mode != FINALIZED:
            return
        existing = self.by_height.get(block.height)
        if existing is not None and existing != block.hash:
            self.conflicts += 1
            raise SafetyViolation(
                f"Conflicting blocks at height {block.height}: "
                f"{existing.hex()[:12]} vs {block.hash.hex()[:12]}"
            )

    def _insert(self, block: Block, update: ChainUpdate) -> None:
        h = block.hash
        self.blocks[h] = block
        self.children[h] = []
        self.children[block.parent_hash].append(h)
        self.heads.discard(block.parent_hash)
        self.heads.add(h)
        self.total_appended += 1
        update.attached.append(block)

        if self.mode == FINALIZED:
            self.by_height[block.height] = h
            if block.height == self.height + 1 and block.parent_hash == self.main_branch[-1]:
                self.main_branch.append(h)
                update.added.append(h)
            return

        tip = self.tip
        if block.height > tip.height or (block.height == tip.height and h < tip.hash):
            self._switch_to(block, update)

    def _switch_to(self, new_tip: Block, update: ChainUpdate) -> None:
        path = []
        cursor = new_tip
        while not (cursor.height < len(self.main_branch) and self.main_branch[cursor.height] == cursor.hash):
            path.append(cursor.hash)
            cursor = self.blocks[cursor.parent_hash]
        ancestor = cursor.height
        removed = self.main_branch[ancestor + 1:]
        added = list(reversed(path))
        self.main_branch = self.main_branch[:ancestor + 1] + added

        # Merge with earlier switches in the same update
        for r in removed:
            if r in update.added:
                update.added.remove(r)
            else:
                update.removed.append(r)
        update.added.extend(added)
        update.ancestor_height = min(update.ancestor_height, ancestor)


def append_block(view: ChainView, b: Block) -> ChainView:
    """Insert b into view (in place) and return the view."""
    view.append(b)
    return view


def fork_choice(view: ChainView, mode: Optional[str] = None) -> List[bytes]:
    """
    Recompute the selected branch from the block forest alone.

    Raises:
        SafetyViolation: Finalized mode with two blocks at one height
        LedgerError: Empty view
    """
    mode = mode or view.mode
    if not view.blocks:
        raise LedgerError("Empty chain view")
    if mode == FINALIZED:
        seen: Dict[int, bytes] = {}
        for h, block in view.blocks.items():
            other = seen.get(block.height)
            if other is not None and other != h:
                raise SafetyViolation(f"Conflicting blocks at height {block.height}")
            seen[block.height] = h
        branch = []
        height = 0
        while height in seen:
            if height > 0 and view.blocks[seen[height]].parent_hash != branch[-1]:
                break
            branch.append(seen[height])
            height += 1
        return branch

    best = min(view.blocks.values(), key=lambda b: (-b.height, b.hash))
    branch = []
    cursor = best
    while True:
        branch.append(cursor.hash)
        if cursor.height == 0:
            break
        cursor = view.blocks[cursor.parent_hash]
    branch.reverse()
    return branch


def fork_delta(view: ChainView) -> Tuple[int, int, int]:
    """Return (total non-genesis blocks, main-branch non-genesis blocks, delta)."""
    total = view.total_appended
    main = len(view.main_branch) - 1
    return total, main, total - main


def security_ratio(view: ChainView) -> float:
    total, main, _ = fork_delta(view)
    return 1.0 if total == 0 else main / total


def dump_chain(view: ChainView, path) -> int:
    """Write every block as one JSON line, ordered by height then digest."""
    ordered = sorted(view.blocks.values(), key=lambda b: (b.height, b.hash))
    with JsonLinesWriter(path) as writer:
        for block in ordered:
            record = block.to_dict()
            record["main"] = view.on_main(block.hash)
            writer.write(record)
    return len(ordered)
