from dataclasses import replace

import pytest

from benchmark_driver import (
    CONSERVATION,
    FINALIZED_FORK_FREE,
    REPLICA_AGREEMENT,
    BenchmarkError,
    RunPlan,
    Simulation,
    Topology,
    blocking_latency_mode,
    rescale_consensus,
    resize_plan,
    run,
    run_many,
    run_plan,
    security_run,
    sweep,
)
from consensus import PBFT, POA, POW, SEQUENCER, ConsensusConfig, pow_difficulty
from contracts import COMMITTED
from ledger import Transaction, make_block
from netsim import FaultSchedule, PartitionSpec
from reports import report_digest
from utils import read_json_lines
from workloads import WorkloadSpec, account_name


def small_plan(engine=PBFT, kind="ycsb", seed=0, duration=5000, **consensus):
    consensus.setdefault("n_nodes", 4)
    if engine in (POA, SEQUENCER):
        consensus.setdefault("authorities", tuple(range(consensus["n_nodes"])))
    return RunPlan(
        workload=WorkloadSpec(kind=kind, clients=2, request_rate=10, record_count=100, accounts=64),
        topology=Topology(nodes=consensus["n_nodes"]),
        consensus=ConsensusConfig(engine=engine, **consensus),
        seed=seed,
        name="small",
        duration=duration,
    )


def test_pbft_run_commits():
    report = run_plan(small_plan())
    assert report.engine == PBFT
    assert report.submitted > 50
    assert report.committed > 0
    assert report.latency.count == report.confirmed
    assert report.security.delta == 0
    assert report.checks[REPLICA_AGREEMENT]
    assert report.checks[FINALIZED_FORK_FREE]
    assert report.state_roots_agree
    assert not report.stall.stalled
    assert len(report.samples) == 5


def test_run_is_deterministic():
    first = run_plan(small_plan(seed=4))
    second = run_plan(small_plan(seed=4))
    assert first.trace_hash == second.trace_hash
    assert report_digest(first) == report_digest(second)
    assert first.to_dict(with_samples=True) == second.to_dict(with_samples=True)
    other = run_plan(small_plan(seed=5))
    assert other.trace_hash != first.trace_hash


def test_run_keyword_form_matches_plan():
    plan = small_plan(seed=2)
    report = run(plan.workload, plan.topology, plan.consensus, seed=2, name="small", duration=5000)
    assert report_digest(report) == report_digest(run_plan(plan))


def test_sequencer_smallbank_conserves_money():
    report = run_plan(small_plan(engine=SEQUENCER, kind="smallbank", authorities=(0,)))
    assert report.committed > 0
    assert report.checks[CONSERVATION]
    assert report.checks[REPLICA_AGREEMENT]


def test_smallbank_total_holds_after_every_block_with_overdrafts():
    plan = small_plan(kind="smallbank")
    plan = replace(plan, workload=replace(plan.workload, overdraft_ratio=0.3))
    sim = Simulation(plan)
    sim.execute()
    report = sim.report()
    assert report.reverted > 0
    assert sim.monitor.violations == []
    executed = sum(node.chain.height for node in sim.honest_nodes())
    assert sim.monitor.blocks_checked >= executed > 0
    assert report.checks[CONSERVATION]


def test_conservation_monitor_flags_minted_money():
    sim = Simulation(small_plan(kind="smallbank"))
    sim.execute()
    node = sim.honest_nodes()[0]
    mint = Transaction("client-0", "smallbank", "update_balance", (account_name(0), 500), 0, 10 ** 6)
    block = make_block(node.chain.height + 1, node.chain.tip.hash, node.id, node.store.state_root(), [mint], 0)
    receipts = node.runtime.execute_block(block)
    assert receipts[0].status == COMMITTED
    sim.monitor.block_executed(node.id, block, receipts)
    assert sim.monitor.violations == [(node.id, block.height, sim.monitor.expected + 500)]
    assert sim.conservation() is False


def test_pow_run_confirms_after_depth():
    plan = small_plan(engine=POW, kind="smallbank", duration=20_000,
                      difficulty_t=pow_difficulty(1000, 4), confirmation_depth=2)
    report = run_plan(plan)
    assert report.committed > 0
    assert report.checks[CONSERVATION]
    assert FINALIZED_FORK_FREE not in report.checks
    assert report.security.total_blocks >= report.security.main_blocks > 2


def test_plan_validation():
    plan = small_plan()
    with pytest.raises(BenchmarkError):
        Simulation(replace(plan, topology=Topology(nodes=5)))
    with pytest.raises(BenchmarkError):
        Simulation(replace(plan, workload=replace(plan.workload, kind="tpcc")))
    with pytest.raises(BenchmarkError):
        Simulation(replace(plan, faults=FaultSchedule(crashes=[(7, 100)])))
    with pytest.raises(BenchmarkError):
        Simulation(replace(plan, duration=0))


def test_trace_and_artifacts(tmp_path):
    trace = tmp_path / "trace.jsonl"
    artifacts = {kind: str(tmp_path / f"{kind}.jsonl") for kind in ("chain", "receipts", "state")}
    plan = replace(small_plan(), trace_path=str(trace), artifacts=artifacts)
    report = run_plan(plan)
    records = list(read_json_lines(trace))
    assert records[0]["type"] == "header"
    assert records[0]["seed"] == 0
    assert records[-1] == {"type": "footer", "trace_hash": report.trace_hash, "report_hash": report_digest(report)}
    assert sum(1 for r in records if r["type"] == "event") > 0
    for path in artifacts.values():
        assert list(read_json_lines(path))
    # tracing to a file does not change the run
    assert report.trace_hash == run_plan(small_plan()).trace_hash


def test_blocking_mode_toggle():
    plan = small_plan()
    assert blocking_latency_mode(plan, True).workload.blocking
    assert not blocking_latency_mode(blocking_latency_mode(plan, True), False).workload.blocking


def test_rescale_consensus():
    config = ConsensusConfig(engine=POW, n_nodes=4, difficulty_t=8000, authorities=(0, 1, 2, 3),
                             byzantine=((1, "fork"), (3, "fork")))
    scaled = rescale_consensus(config, 8)
    assert scaled.n_nodes == 8
    assert scaled.difficulty_t == 4000
    assert scaled.authorities == tuple(range(8))
    assert rescale_consensus(config, 2).byzantine == ((1, "fork"),)

    poa = ConsensusConfig(engine=POA, n_nodes=4, authorities=(1, 3))
    assert rescale_consensus(poa, 2).authorities == (1,)


def test_resize_plan():
    plan = small_plan()
    both = resize_plan(plan, "both", 8)
    assert both.topology.nodes == 8
    assert both.consensus.n_nodes == 8
    assert both.workload.clients == 8
    assert both.variant == "both8"
    clients = resize_plan(plan, "clients", 3)
    assert clients.topology.nodes == 4
    assert clients.workload.clients == 3
    with pytest.raises(BenchmarkError):
        resize_plan(plan, "disks", 2)
    crashing = replace(plan, faults=FaultSchedule(crashes=[(0, 100)]))
    with pytest.raises(BenchmarkError):
        resize_plan(crashing, "nodes", 8)
    assert resize_plan(crashing, "clients", 4).faults.crashes == [(0, 100)]


def test_sweep_in_input_order():
    reports = sweep(small_plan(duration=2000), "clients", [1, 3])
    assert [r.clients for r in reports] == [1, 3]
    assert [r.variant for r in reports] == ["clients1", "clients3"]


def test_run_many_keeps_order():
    plans = [small_plan(seed=s, duration=2000) for s in (1, 0)]
    assert [r.seed for r in run_many(plans)] == [1, 0]


def test_security_run_needs_partition():
    with pytest.raises(BenchmarkError):
        security_run(small_plan())


def test_security_run_series():
    plan = replace(
        small_plan(engine=POA, duration=15_000, step_duration=500),
        faults=FaultSchedule(partitions=[PartitionSpec(frozenset({0, 1}), frozenset({2, 3}), 2000, 5000)]),
    )
    report = security_run(plan)
    partition = report.analytics["partition"]
    assert partition["heal_s"] == 7.0
    assert partition["delta_end"] == report.security.delta
    assert partition["peak_delta"] >= partition["delta_at_heal"]
    assert 0.0 <= partition["fork_share"] <= 1.0
    assert len(report.samples) == 15
    assert report.fault.first_fault_s == 2.0
