import json

import numpy as np
import pytest

from state_store import (
    StaleCommit,
    StateStoreError,
    TxnSummary,
    UnknownBlock,
    UnknownKey,
    VersionedStateStore,
    block_key,
    encode_txn_list,
)


def random_store(rng, puts=10_000, keys=200, buckets=64):
    store = VersionedStateStore(num_buckets=buckets)
    height = 0
    for _ in range(puts):
        height += int(rng.integers(0, 2))
        key = f"k{int(rng.integers(keys))}".encode()
        store.put(key, rng.bytes(8), height)
    return store


def brute_force_range(store, key, start, end):
    matches = [e for e in store.versions(key) if start <= e.commit_block < end]
    return [(e.value, e.commit_block) for e in reversed(matches)]


def test_versions_accumulate():
    store = VersionedStateStore(num_buckets=4)
    assert store.put(b"a", b"1", 0) == 1
    assert store.put(b"a", b"2", 3) == 2
    assert store.get_latest(b"a") == b"2"
    assert store.get_version(b"a", 1).value == b"1"
    assert store.get_latest(b"missing") is None
    with pytest.raises(UnknownKey):
        store.get_version(b"a", 3)


def test_commit_block_must_not_go_backwards():
    store = VersionedStateStore(num_buckets=4)
    store.put(b"a", b"1", 5)
    with pytest.raises(StaleCommit):
        store.put(b"a", b"2", 4)


def test_incremental_root_matches_rebuild():
    store = random_store(np.random.default_rng(1))
    assert store.puts == 10_000
    assert store.state_root() == store.rebuild_root()


def test_range_query_matches_brute_force():
    rng = np.random.default_rng(2)
    store = random_store(rng, puts=3_000)
    keys = store.keys()
    top = max(e.commit_block for e in store.entries()) + 2
    for _ in range(1_000):
        key = keys[int(rng.integers(len(keys)))]
        start = int(rng.integers(0, top))
        end = int(rng.integers(start, top + 1))
        assert store.query_account_block_range(key, start, end) == brute_force_range(store, key, start, end)


def test_range_query_edges():
    store = VersionedStateStore(num_buckets=4)
    store.put(b"a", b"x", 2)
    assert store.query_account_block_range(b"a", 3, 3) == []
    assert store.query_account_block_range(b"a", 2, 3) == [(b"x", 2)]
    with pytest.raises(UnknownKey):
        store.query_account_block_range(b"b", 0, 1)
    with pytest.raises(StateStoreError):
        store.query_account_block_range(b"a", 4, 1)


def test_root_changes_when_one_byte_flips():
    rng = np.random.default_rng(3)
    roots = set()
    for trial in range(100):
        store = VersionedStateStore(num_buckets=16)
        for i in range(20):
            store.put(f"k{i}".encode(), rng.bytes(4), trial)
        before = store.state_root()
        key = f"k{int(rng.integers(20))}".encode()
        value = bytearray(store.get_latest(key))
        value[0] ^= 0x01
        store.put(key, bytes(value), trial)
        after = store.state_root()
        assert before != after
        roots.update((before, after))
    assert len(roots) == 200


def test_rollback_restores_earlier_root():
    store = VersionedStateStore(num_buckets=8)
    store.put(b"a", b"1", 1)
    root = store.commit_block(1)
    store.put(b"a", b"2", 2)
    store.put(b"b", b"3", 2)
    store.commit_block(2)
    assert store.rollback_to(1) == 2
    assert store.state_root() == root
    assert store.get_latest(b"b") is None
    assert store.keys() == [b"a"]
    assert 2 not in store.root_history


def test_block_txn_list():
    store = VersionedStateStore(num_buckets=4)
    summaries = [TxnSummary("acct0", "acct1", 7)]
    store.put(block_key(1), encode_txn_list(summaries), 1)
    assert store.query_block_txn_list(1) == summaries
    with pytest.raises(UnknownBlock):
        store.query_block_txn_list(2)


def test_snapshot_lists_every_version(tmp_path):
    store = VersionedStateStore(num_buckets=4)
    store.put(b"a", b"1", 0)
    store.put(b"a", b"2", 1)
    path = tmp_path / "state.jsonl"
    assert store.dump_snapshot(path) == 2
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["version"] for r in records] == [1, 2]
    assert records[1]["commit_block"] == 1
