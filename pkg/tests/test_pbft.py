from collections import deque
from dataclasses import replace

import numpy as np
import pytest

from conftest import child_of, transfer
from ledger import CommitCert
from pbft import (
    ClientBatch,
    InvalidSignature,
    NewView,
    PbftReplica,
    PrePrepare,
    Prepare,
    PreparedEntry,
    ViewChange,
    pbft_step,
    pbft_view_change,
    verify_commit_cert,
    verify_prepared,
)
from signatures import node_identity


class Cluster:
    """
    Replicas wired through an in-order message queue; ids in `down` neither send
    nor receive, and drop(target, msg) can lose single deliveries.
    """

    def __init__(self, n, registry, genesis, byzantine=None, checkpoint_interval=10):
        self.n = n
        self.replicas = [
            PbftReplica(i, n, registry, genesis.hash, checkpoint_interval,
                        byzantine=(byzantine or {}).get(i))
            for i in range(n)
        ]
        self.down = set()
        self.drop = None
        self.queue = deque()
        self.commits = {i: [] for i in range(n)}

    def route(self, sender, result):
        for block, _ in result.committed:
            self.commits[sender].append(block)
        for msg, targets in result.outbound:
            for target in (targets if targets is not None else range(self.n)):
                if target != sender:
                    self.queue.append((target, msg))

    def propose(self, leader, block, alt=None):
        self.route(leader, self.replicas[leader].step(ClientBatch(block, alt)))
        self.drain()

    def next_message(self):
        return self.queue.popleft()

    def drain(self):
        while self.queue:
            target, msg = self.next_message()
            if target in self.down or msg.sender in self.down:
                continue
            if self.drop is not None and self.drop(target, msg):
                continue
            self.route(target, self.replicas[target].step(msg))

    def timeout(self, ids):
        for i in ids:
            self.route(i, self.replicas[i].on_timeout())
        self.drain()

    def committed_hash(self, replica, seq):
        return self.replicas[replica].committed_hashes.get(seq)


class ShuffledCluster(Cluster):
    """Delivers queued messages in a seeded random order, optionally losing a share of them."""

    def __init__(self, rng, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.rng = rng

    def next_message(self):
        index = int(self.rng.integers(len(self.queue)))
        item = self.queue[index]
        del self.queue[index]
        return item

    def lossy(self, rate):
        self.drop = (lambda target, msg: self.rng.random() < rate) if rate else None


def signed(registry, msg):
    return replace(msg, signature=registry.sign(node_identity(msg.sender), msg.wire()))


def assert_agreement(cluster, ids):
    seqs = set().union(*(cluster.replicas[i].committed_hashes for i in ids))
    for seq in sorted(seqs):
        hashes = {cluster.committed_hash(i, seq) for i in ids} - {None}
        assert len(hashes) == 1, f"replicas {ids} disagree at seq {seq}"


def test_quorum_sizes():
    replica = PbftReplica(0, 4, None)
    assert (replica.f, replica.prepare_quorum, replica.commit_quorum) == (1, 2, 3)
    replica = PbftReplica(0, 16, None)
    assert (replica.f, replica.prepare_quorum, replica.commit_quorum, replica.view_change_quorum) == (5, 10, 11, 11)
    assert [replica.primary(v) for v in (0, 1, 17)] == [0, 1, 1]


def test_normal_case_commits_everywhere(registry, genesis):
    cluster = Cluster(4, registry, genesis)
    block = child_of(genesis, txns=[transfer()])
    cluster.propose(0, block)
    for i in range(4):
        assert cluster.commits[i] == [block]
        assert cluster.replicas[i].last_committed == 1
    _, cert = cluster.replicas[2].committed[1]
    assert verify_commit_cert(block, cert, registry, 4)
    state = cluster.replicas[1].state()
    assert state.phases[1] == "committed"
    assert state.commit_votes[1] >= 3


def test_leader_refuses_second_proposal_while_one_is_in_flight(registry, genesis):
    cluster = Cluster(4, registry, genesis)
    cluster.down = {1, 2, 3}
    first = child_of(genesis, proposer=0)
    cluster.propose(0, first)
    assert not cluster.replicas[0].can_propose()
    result = cluster.replicas[0].step(ClientBatch(child_of(genesis, proposer=0, nonce=1)))
    assert result.outbound == []


def test_one_crashed_backup_is_tolerated(registry, genesis):
    cluster = Cluster(4, registry, genesis)
    cluster.down = {3}
    block = child_of(genesis)
    cluster.propose(0, block)
    assert all(cluster.committed_hash(i, 1) == block.hash for i in range(3))
    assert cluster.committed_hash(3, 1) is None


def test_two_crashed_backups_block_progress(registry, genesis):
    cluster = Cluster(4, registry, genesis)
    cluster.down = {2, 3}
    cluster.propose(0, child_of(genesis))
    assert cluster.commits[0] == [] and cluster.commits[1] == []


def test_equivocating_leader_cannot_split_honest_replicas(registry, genesis):
    cluster = Cluster(4, registry, genesis, byzantine={0: "equivocate"})
    a = child_of(genesis, txns=[transfer(nonce=1)])
    b = child_of(genesis, txns=[transfer(nonce=2)])
    cluster.propose(0, a, alt=b)
    # Neither twin gathers a commit quorum in view 0
    assert all(cluster.committed_hash(i, 1) is None for i in range(4))

    cluster.timeout([1, 2, 3])
    honest = [cluster.replicas[i] for i in (1, 2, 3)]
    assert all(r.view == 1 for r in honest)
    hashes = {cluster.committed_hash(i, 1) for i in (1, 2, 3)}
    # Replicas 2 and 3 prepared the twin, so the new view must carry it
    assert hashes == {b.hash}
    assert all(r.view_changes_started >= 1 for r in honest)


def test_view_change_lets_new_primary_propose(registry, genesis):
    cluster = Cluster(4, registry, genesis)
    cluster.down = {0}
    cluster.timeout([1, 2, 3])
    assert cluster.replicas[1].is_primary
    assert cluster.replicas[1].can_propose()
    block = child_of(genesis, proposer=1)
    cluster.propose(1, block)
    assert all(cluster.committed_hash(i, 1) == block.hash for i in (1, 2, 3))


def test_checkpoint_becomes_stable_and_prunes_log(registry, genesis):
    cluster = Cluster(4, registry, genesis, checkpoint_interval=2)
    first = child_of(genesis)
    cluster.propose(0, first)
    cluster.propose(0, child_of(first))
    for replica in cluster.replicas:
        assert replica.stable_seq == 2
        assert all(seq > 2 for _, seq in replica.log)


def test_lagging_replica_catches_up_with_certificates(registry, genesis):
    cluster = Cluster(4, registry, genesis)
    cluster.down = {3}
    b1 = child_of(genesis)
    b2 = child_of(b1)
    cluster.propose(0, b1)
    cluster.propose(0, b2)
    cluster.down = set()
    b3 = child_of(b2)
    cluster.propose(0, b3)
    assert cluster.commits[3] == [b1, b2, b3]
    assert cluster.replicas[3].last_committed == 3


def test_forged_signature_is_rejected(registry, genesis):
    replica = PbftReplica(1, 4, registry, genesis.hash)
    forged = Prepare(0, 1, genesis.hash, 2, signature=b"\x00" * 32)
    with pytest.raises(InvalidSignature):
        replica.step(forged)


def test_short_certificate_is_rejected(registry, genesis):
    cluster = Cluster(4, registry, genesis)
    block = child_of(genesis)
    cluster.propose(0, block)
    _, cert = cluster.replicas[0].committed[1]
    short = CommitCert(cert.view, cert.seq, cert.votes[:2])
    assert not verify_commit_cert(block, short, registry, 4)
    duplicated = replace(cert, votes=(cert.votes[0],) * 3)
    assert not verify_commit_cert(block, duplicated, registry, 4)


def test_functional_wrappers(registry, genesis):
    replica = PbftReplica(0, 4, registry, genesis.hash)
    block = child_of(genesis)
    same, outbound, committed = pbft_step(replica, ClientBatch(block))
    assert same is replica
    assert [m.msg.kind for m in outbound] == ["pre-prepare"]
    assert committed == []
    _, outbound = pbft_view_change(replica)
    assert [m.msg.kind for m in outbound] == ["view-change"]
    assert replica.view_changing and replica.target_view == 1


def test_adopted_history_sets_next_sequence(registry, genesis):
    chain = [genesis]
    for _ in range(3):
        chain.append(child_of(chain[-1]))
    replica = PbftReplica(0, 4, registry, genesis.hash)
    replica.adopt_history([b.hash for b in chain])
    assert replica.last_committed == 3
    assert replica.stable_seq == 3
    _, outbound, _ = pbft_step(replica, ClientBatch(child_of(chain[-1])))
    assert outbound[0].msg.seq == 4


def test_prepared_value_survives_two_view_changes(registry, genesis):
    cluster = Cluster(4, registry, genesis)
    first = child_of(genesis, txns=[transfer(nonce=1)])
    # Only the leader collects a commit quorum; the backups stay prepared
    cluster.drop = lambda target, msg: msg.kind == "commit" and target != 0
    cluster.propose(0, first)
    assert cluster.committed_hash(0, 1) == first.hash
    assert all(cluster.committed_hash(i, 1) is None for i in (1, 2, 3))

    # View 1 reissues the block but loses every vote
    cluster.down = {0}
    cluster.drop = lambda target, msg: msg.kind in ("prepare", "commit")
    cluster.timeout([1, 2, 3])
    assert all(cluster.replicas[i].view == 1 for i in (1, 2, 3))
    assert all(cluster.committed_hash(i, 1) is None for i in (1, 2, 3))
    assert all(cluster.replicas[i].prepared_certs[1].view == 0 for i in (1, 2, 3))

    cluster.drop = None
    cluster.timeout([1, 2, 3])
    assert all(cluster.replicas[i].view == 2 for i in (1, 2, 3))
    assert [cluster.committed_hash(i, 1) for i in range(4)] == [first.hash] * 4

    # The new primary cannot fill seq 1 with a rival block
    rival = child_of(genesis, proposer=2, nonce=9)
    outbound, _ = cluster.replicas[2].step(ClientBatch(rival))
    assert outbound == []
    second = child_of(first, proposer=2)
    cluster.propose(2, second)
    assert all(cluster.committed_hash(i, 2) == second.hash for i in (1, 2, 3))


def test_prepared_certificate_verification(registry, genesis):
    cluster = Cluster(4, registry, genesis)
    cluster.drop = lambda target, msg: msg.kind == "commit"
    block = child_of(genesis)
    cluster.propose(0, block)
    cert = cluster.replicas[1].prepared_certs[1]
    assert (cert.view, cert.seq, cert.digest) == (0, 1, block.hash)

    assert verify_prepared(cert, registry, 4, before_view=1)
    assert not verify_prepared(cert, registry, 4, before_view=0)
    assert not verify_prepared(replace(cert, prepares=cert.prepares[:1]), registry, 4, 1)
    assert not verify_prepared(replace(cert, prepares=(cert.prepares[0],) * 3), registry, 4, 1)
    other = child_of(genesis, nonce=5)
    assert not verify_prepared(replace(cert, digest=other.hash, block=other), registry, 4, 1)
    assert not verify_prepared(replace(cert, leader_signature=b""), registry, 4, 1)


def test_view_change_with_unproven_prepared_entry_is_ignored(registry, genesis):
    replica = PbftReplica(1, 4, registry, genesis.hash)
    fake = child_of(genesis, nonce=5)
    leader_pp = signed(registry, PrePrepare(0, 1, fake.hash, fake, 0))
    bare = PreparedEntry(0, 1, fake.hash, fake, leader_pp.signature)
    replica.step(signed(registry, ViewChange(1, 0, genesis.hash, (bare,), 3)))
    assert 3 not in replica.view_changes.get(1, {})

    # A fully signed certificate still has to come from a view below the target
    prepares = tuple((s, signed(registry, Prepare(1, 1, fake.hash, s)).signature) for s in (2, 3))
    future_pp = signed(registry, PrePrepare(1, 1, fake.hash, fake, 1))
    future = PreparedEntry(1, 1, fake.hash, fake, future_pp.signature, prepares)
    assert verify_prepared(future, registry, 4, before_view=2)
    replica.step(signed(registry, ViewChange(1, 0, genesis.hash, (future,), 3)))
    assert 3 not in replica.view_changes.get(1, {})

    replica.step(signed(registry, ViewChange(1, 0, genesis.hash, (), 2)))
    assert 2 in replica.view_changes[1]


def test_new_view_built_on_unproven_entry_is_rejected(registry, genesis):
    fake = child_of(genesis, nonce=5)
    leader_pp = signed(registry, PrePrepare(0, 1, fake.hash, fake, 0))
    honest = [signed(registry, ViewChange(1, 0, genesis.hash, (), s)) for s in (1, 2)]
    forged = signed(registry, ViewChange(
        1, 0, genesis.hash, (PreparedEntry(0, 1, fake.hash, fake, leader_pp.signature),), 3))
    reissue = signed(registry, PrePrepare(1, 1, fake.hash, fake, 1))

    replica = PbftReplica(2, 4, registry, genesis.hash)
    replica.step(signed(registry, NewView(1, (*honest, forged), (reissue,), 1)))
    assert replica.view == 0
    assert replica.log == {}

    clean = signed(registry, ViewChange(1, 0, genesis.hash, (), 3))
    replica.step(signed(registry, NewView(1, (*honest, clean), (), 1)))
    assert replica.view == 1


@pytest.mark.parametrize("seed", range(30))
def test_equivocation_under_reordering_and_loss_keeps_agreement(registry, genesis, seed):
    rng = np.random.default_rng(seed)
    cluster = ShuffledCluster(rng, 4, registry, genesis, byzantine={0: "equivocate"})
    cluster.lossy(0.2)
    a = child_of(genesis, txns=[transfer(nonce=1)])
    b = child_of(genesis, txns=[transfer(nonce=2)])
    cluster.propose(0, a, alt=b)
    cluster.timeout([1, 2, 3])
    cluster.timeout([1, 2, 3])

    cluster.lossy(0)
    for i in (1, 2, 3):
        cluster.route(i, cluster.replicas[i].retransmit())
    cluster.drain()
    assert_agreement(cluster, (1, 2, 3))


@pytest.mark.parametrize("seed", range(30))
def test_crash_after_partial_commit_keeps_agreement(registry, genesis, seed):
    rng = np.random.default_rng(seed)
    cluster = ShuffledCluster(rng, 4, registry, genesis)
    first = child_of(genesis, txns=[transfer(nonce=1)])
    cluster.drop = lambda target, msg: msg.kind == "commit" and target != 0 and rng.random() < 0.8
    cluster.propose(0, first)

    cluster.down = {0}
    cluster.lossy(0.3)
    cluster.timeout([1, 2, 3])
    cluster.timeout([1, 2, 3])
    cluster.lossy(0)
    for i in (1, 2, 3):
        cluster.route(i, cluster.replicas[i].retransmit())
    cluster.drain()

    for i in (1, 2, 3):
        replica = cluster.replicas[i]
        if replica.is_primary and replica.can_propose():
            last = replica.last_committed
            parent = genesis if last == 0 else replica.committed[last][0]
            cluster.propose(i, child_of(parent, proposer=i, nonce=7))
    assert_agreement(cluster, (0, 1, 2, 3))
