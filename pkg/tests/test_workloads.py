from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
import simpy

from builtin_contracts import BUILTIN_CONTRACTS
from contracts import COMMITTED, ContractRuntime
from netsim import SimNetwork
from signatures import KeyRegistry
from state_store import VersionedStateStore
from workloads import (
    ANALYTICS,
    MIX_TRANSFERS,
    SMALLBANK,
    UNIFORM,
    ZIPFIAN,
    KeyChooser,
    TxnFactory,
    WorkloadError,
    WorkloadSpec,
    build_genesis,
    build_preload,
    deploy_transactions,
    expected_smallbank_total,
    make_clients,
    workload_contract,
)


def test_zipfian_keys_favour_low_ranks():
    chooser = KeyChooser(100, ZIPFIAN, 0.99, np.random.default_rng(0))
    counts = Counter(chooser.next() for _ in range(20_000))
    assert counts.most_common(1)[0][0] == 0
    assert counts[0] > 5 * counts[50]
    assert all(0 <= k < 100 for k in counts)


def test_uniform_keys_cover_the_range():
    chooser = KeyChooser(10, UNIFORM, 0.99, np.random.default_rng(0))
    counts = Counter(chooser.next() for _ in range(10_000))
    assert set(counts) == set(range(10))
    assert max(counts.values()) < 2 * min(counts.values())


def test_smallbank_transfer_mix_only_uses_conserving_procedures():
    factory = TxnFactory(WorkloadSpec(kind=SMALLBANK, smallbank_mix=MIX_TRANSFERS), np.random.default_rng(1))
    methods = {factory.make("client-0", 0, i).method for i in range(500)}
    assert methods == {"send_payment", "get_balance", "amalgamate"}


def test_overdraft_ratio_requests_impossible_payments():
    spec = WorkloadSpec(kind=SMALLBANK, overdraft_ratio=1.0)
    txn = TxnFactory(spec, np.random.default_rng(1)).make("client-0", 0, 0)
    assert txn.method == "send_payment"
    assert txn.args[2] == 10 ** 9


def test_ycsb_read_ratio():
    spec = WorkloadSpec(read_ratio=1.0)
    factory = TxnFactory(spec, np.random.default_rng(2))
    assert {factory.make("c", 0, i).method for i in range(100)} == {"read"}


@pytest.mark.parametrize("spec", [
    WorkloadSpec(kind="tpcc"),
    WorkloadSpec(read_ratio=1.5),
    WorkloadSpec(key_distribution="hotspot"),
    WorkloadSpec(accounts=1),
    WorkloadSpec(request_rate=0),
    WorkloadSpec(threads_per_client=0),
])
def test_invalid_specs(spec):
    with pytest.raises(WorkloadError):
        spec.validate()


def test_every_workload_targets_a_deployed_contract():
    deployed = {txn.args[0] for txn in deploy_transactions()}
    assert deployed == set(BUILTIN_CONTRACTS)
    assert workload_contract(ANALYTICS) == "versionkv"
    with pytest.raises(WorkloadError):
        workload_contract("tpcc")


def test_genesis_does_not_depend_on_signing_keys():
    a = build_genesis(16, KeyRegistry(seed=1))
    b = build_genesis(16, KeyRegistry(seed=2))
    assert a.hash == b.hash
    assert len(a.txns) == len(BUILTIN_CONTRACTS)


def test_preload_builds_a_replayable_chain(registry):
    genesis = build_genesis(16, registry)
    spec = WorkloadSpec(kind=ANALYTICS, preload_blocks=50, accounts=32)
    blocks = build_preload(genesis, spec, np.random.default_rng(4), registry, 16)
    assert [b.height for b in blocks] == list(range(1, 51))
    assert blocks[0].parent_hash == genesis.hash
    assert all(b.parent_hash == a.hash for a, b in zip(blocks, blocks[1:]))

    # Replaying on a fresh store reproduces every pre-state root
    runtime = ContractRuntime(VersionedStateStore(16), BUILTIN_CONTRACTS)
    runtime.execute_block(genesis)
    for block in blocks:
        assert block.header.state_root == runtime.store.state_root()
        receipts = runtime.execute_block(block)
        assert all(r.status == COMMITTED for r in receipts)

    again = build_preload(genesis, spec, np.random.default_rng(4), registry, 16)
    assert [b.hash for b in again] == [b.hash for b in blocks]


def test_expected_smallbank_total():
    assert expected_smallbank_total(["a", "b", "c"]) == 60_000


def make_network(registry):
    env = simpy.Environment()
    return SimNetwork(env, 2, registry, np.random.default_rng([0, 0]))


def test_open_loop_client_rate(registry):
    network = make_network(registry)
    spec = WorkloadSpec(clients=2, request_rate=50.0)
    submitted = []
    clients = make_clients(spec, network, registry, seed=0, end_time=20_000, n_nodes=2,
                           on_submit=lambda c, txn: submitted.append(c))
    assert [c.node_id for c in clients] == [0, 1]
    for client in clients:
        client.start()
    network.run_until(25_000)
    for client in clients:
        # Poisson with mean 1000
        assert 880 < client.submitted < 1120
    assert len(submitted) == sum(c.submitted for c in clients)


def test_ops_cap_stops_submission(registry):
    network = make_network(registry)
    [client] = make_clients(WorkloadSpec(clients=1, ops=3, request_rate=100.0), network, registry,
                            seed=0, end_time=60_000, n_nodes=2)
    client.start()
    network.run_until(60_000)
    assert client.submitted == 3


def test_closed_loop_resubmits_after_timeout(registry):
    network = make_network(registry)
    spec = WorkloadSpec(clients=1, threads_per_client=2, blocking=True, request_timeout=1000)
    [client] = make_clients(spec, network, registry, seed=0, end_time=5000, n_nodes=2)
    client.start()
    network.run_until(6000)
    assert client.submitted == 10
    assert client.timeouts == 10


def test_closed_loop_confirmation_triggers_next_request(registry):
    network = make_network(registry)
    spec = WorkloadSpec(clients=1, blocking=True, request_timeout=10_000)
    sent = []
    [client] = make_clients(spec, network, registry, seed=0, end_time=5000, n_nodes=2,
                            on_submit=lambda c, txn: sent.append(txn))
    client.start()
    assert len(sent) == 1
    client.confirmed(sent[0].txn_id)
    assert len(sent) == 2
    # Unknown or repeated confirmations are ignored
    client.confirmed(sent[0].txn_id)
    assert len(sent) == 2
    assert client.timeouts == 0


def test_clients_sign_their_transactions(registry):
    network = make_network(registry)
    sent = []
    [client] = make_clients(replace(WorkloadSpec(), clients=1, blocking=True), network, registry,
                            seed=0, end_time=100, n_nodes=2, on_submit=lambda c, txn: sent.append(txn))
    client.start()
    assert sent[0].sender == "client-0"
    assert sent[0].verify(registry)
