"""
state_store.py - Versioned key-value state with a bucket-Merkle commitment.

Every put appends a version. Versions live under composite keys
``key:<version>`` and the newest version number under ``key:latest``, so the
version walk used by the analytics queries reads the store exactly the way a
contract would. The commitment covers the latest value of every key: keys are
hashed into a fixed number of buckets, each bucket is digested over its sorted
(key, value) pairs, and the bucket digests are Merkle-combined.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, NamedTuple, Optional, Set, Tuple

from codec import (
    CodecError,
    bytes_uint,
    decode,
    digest,
    digest_to_int,
    encode,
    merkle_leaf,
    merkle_levels,
    merkle_parent,
    uint_bytes,
)
from constants import DEFAULT_NUM_BUCKETS
from utils import JsonLinesWriter

logger = logging.getLogger(__name__)

LATEST_SUFFIX = b":latest"
BLOCK_KEY_PREFIX = b"block:"


class StateStoreError(Exception):
    """Base class for state store errors."""
    pass


class StaleCommit(StateStoreError):
    pass


class UnknownKey(StateStoreError):
    pass


class UnknownBlock(StateStoreError):
    pass


@dataclass(frozen=True)
class VersionedEntry:
    key: bytes
    version: int
    value: bytes
    commit_block: int

    def to_dict(self):
        return {
            "key": self.key.hex(),
            "version": self.version,
            "value": self.value.hex(),
            "commit_block": self.commit_block,
        }


class TxnSummary(NamedTuple):
    sender: str
    receiver: str
    value: int


def version_key(key: bytes, version: int) -> bytes:
    return key + b":" + str(version).encode("ascii")


def latest_key(key: bytes) -> bytes:
    return key + LATEST_SUFFIX


def block_key(height: int) -> bytes:
    return BLOCK_KEY_PREFIX + str(height).encode("ascii")


def encode_txn_list(summaries) -> bytes:
    return encode([[s.sender.encode("utf-8"), s.receiver.encode("utf-8"), uint_bytes(s.value)]
                   for s in summaries])


def decode_txn_list(data: bytes) -> List[TxnSummary]:
    return [TxnSummary(a.decode("utf-8"), b.decode("utf-8"), bytes_uint(v)) for a, b, v in decode(data)]


class BucketTree:
    """Bucket digests plus every Merkle level above them, updated along one path per dirty bucket."""

    def __init__(self, num_buckets: int = DEFAULT_NUM_BUCKETS):
        if num_buckets < 1:
            raise StateStoreError("num_buckets must be positive")
        self.num_buckets = num_buckets
        self.buckets: List[Dict[bytes, bytes]] = [{} for _ in range(num_buckets)]
        self.levels = merkle_levels([self.bucket_bytes({})] * num_buckets)
        self._dirty: Set[int] = set()

    @property
    def bucket_hashes(self) -> List[bytes]:
        self._flush()
        return self.levels[0]

    @property
    def root(self) -> bytes:
        self._flush()
        return self.levels[-1][0]

    def bucket_of(self, key: bytes) -> int:
        return digest_to_int(digest(key)) % self.num_buckets

    @staticmethod
    def bucket_bytes(content: Dict[bytes, bytes]) -> bytes:
        return encode([[k, content[k]] for k in sorted(content)])

    @classmethod
    def bucket_digest(cls, content: Dict[bytes, bytes]) -> bytes:
        return merkle_leaf(cls.bucket_bytes(content))

    def set(self, key: bytes, value: Optional[bytes]) -> None:
        index = self.bucket_of(key)
        bucket = self.buckets[index]
        if value is None:
            bucket.pop(key, None)
        else:
            bucket[key] = value
        self._dirty.add(index)

    def _flush(self) -> None:
        if not self._dirty:
            return
        for index in sorted(self._dirty):
            self.levels[0][index] = self.bucket_digest(self.buckets[index])
            position = index
            for depth in range(1, len(self.levels)):
                below = self.levels[depth - 1]
                parent = position // 2
                self.levels[depth][parent] = merkle_parent(below, parent)
                position = parent
        self._dirty.clear()


class VersionedStateStore:
    """
    Single-writer versioned store owned by one node.

    put() appends versions; rollback_to() removes every version committed above
    a height so the store can follow a chain reorganization.
    """

    def __init__(self, num_buckets: int = DEFAULT_NUM_BUCKETS):
        self.num_buckets = num_buckets
        self._kv: Dict[bytes, bytes] = {}
        self._tree = BucketTree(num_buckets)
        self._touched: Dict[int, List[Tuple[bytes, int]]] = {}
        self.root_history: Dict[int, bytes] = {}
        self.puts = 0

    # Raw composite-key access

    def _latest_version(self, key: bytes) -> int:
        raw = self._kv.get(latest_key(key))
        return int(raw) if raw is not None else 0

    def _read_version(self, key: bytes, version: int) -> VersionedEntry:
        raw = self._kv[version_key(key, version)]
        value, commit_block = decode(raw)
        return VersionedEntry(key, version, value, bytes_uint(commit_block))

    # Operations

    def put(self, key: bytes, value: bytes, commit_block: int) -> int:
        """
        Append a new version of key.

        Returns:
            int: The new version number

        Raises:
            StaleCommit: commit_block is older than the key's latest version
        """
        latest = self._latest_version(key)
        if latest:
            previous = self._read_version(key, latest)
            if commit_block < previous.commit_block:
                raise StaleCommit(
                    f"Key {key!r} latest commit_block {previous.commit_block} > {commit_block}"
                )
        version = latest + 1
        self._kv[version_key(key, version)] = encode([value, uint_bytes(commit_block)])
        self._kv[latest_key(key)] = str(version).encode("ascii")
        self._tree.set(key, value)
        self._touched.setdefault(commit_block, []).append((key, version))
        self.puts += 1
        return version

    def get_latest(self, key: bytes) -> Optional[bytes]:
        latest = self._latest_version(key)
        if not latest:
            return None
        return self._read_version(key, latest).value

    def latest_version(self, key: bytes) -> int:
        return self._latest_version(key)

    def get_version(self, key: bytes, version: int) -> VersionedEntry:
        if not 1 <= version <= self._latest_version(key):
            raise UnknownKey(f"Key {key!r} has no version {version}")
        return self._read_version(key, version)

    def versions(self, key: bytes) -> List[VersionedEntry]:
        return [self._read_version(key, v) for v in range(1, self._latest_version(key) + 1)]

    def keys(self) -> List[bytes]:
        return sorted(k[:-len(LATEST_SUFFIX)] for k in self._kv if k.endswith(LATEST_SUFFIX))

    def query_account_block_range(self, key: bytes, start_block: int, end_block: int) -> List[Tuple[bytes, int]]:
        """
        Walk versions from the newest down, collecting start_block <= commit_block < end_block.

        Stops at the first version committed before start_block.

        Raises:
            UnknownKey: key was never written
            StateStoreError: start_block > end_block
        """
        if start_block > end_block:
            raise StateStoreError(f"Invalid block range [{start_block}, {end_block})")
        version = self._latest_version(key)
        if not version:
            raise UnknownKey(f"Key {key!r} was never written")
        result = []
        while version > 0:
            entry = self._read_version(key, version)
            if entry.commit_block < start_block:
                break
            if entry.commit_block < end_block:
                result.append((entry.value, entry.commit_block))
            version -= 1
        return result

    def query_block_txn_list(self, block_height: int) -> List[TxnSummary]:
        """
        Return the (from, to, value) triples recorded for a block.

        Raises:
            UnknownBlock: No transaction list was recorded at that height
        """
        raw = self.get_latest(block_key(block_height))
        if raw is None:
            raise UnknownBlock(f"No transaction list recorded for block {block_height}")
        try:
            return decode_txn_list(raw)
        except (CodecError, ValueError) as e:
            raise UnknownBlock(f"Corrupt transaction list for block {block_height}: {e}")

    def state_root(self) -> bytes:
        return self._tree.root

    def rebuild_root(self) -> bytes:
        """Recompute the root from scratch over the latest values."""
        tree = BucketTree(self.num_buckets)
        for key in self.keys():
            tree.set(key, self.get_latest(key))
        return tree.root

    def commit_block(self, height: int) -> bytes:
        root = self.state_root()
        self.root_history[height] = root
        return root

    def rollback_to(self, height: int) -> int:
        """
        Remove every version committed above height.

        Returns:
            int: Number of versions removed
        """
        removed = 0
        for commit_block in sorted((h for h in self._touched if h > height), reverse=True):
            for key, version in reversed(self._touched.pop(commit_block)):
                del self._kv[version_key(key, version)]
                if version == 1:
                    del self._kv[latest_key(key)]
                    self._tree.set(key, None)
                else:
                    self._kv[latest_key(key)] = str(version - 1).encode("ascii")
                    self._tree.set(key, self._read_version(key, version - 1).value)
                removed += 1
        for h in [h for h in self.root_history if h > height]:
            del self.root_history[h]
        if removed:
            logger.debug(f"Rolled back {removed} versions above height {height}")
        return removed

    def entries(self) -> Iterator[VersionedEntry]:
        for key in self.keys():
            yield from self.versions(key)

    def dump_snapshot(self, path) -> int:
        with JsonLinesWriter(path) as writer:
            for entry in self.entries():
                writer.write(entry.to_dict())
            return writer.count

    def append_snapshot(self, path, height: int) -> int:
        """Append the versions committed at one height to a snapshot file."""
        with JsonLinesWriter(path, mode="a") as writer:
            for key, version in self._touched.get(height, []):
                writer.write(self._read_version(key, version).to_dict())
            return writer.count
