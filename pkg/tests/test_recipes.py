"""End-to-end runs of the bundled recipes; deselect with -m "not slow"."""

import pytest

from benchmark_driver import CONSERVATION, RunPlan, Simulation, Topology, run_plan, security_run
from consensus import PBFT, ConsensusConfig
from experiment_config import expand_plans, load_config
from main import evaluate
from reports import report_digest
from workloads import WorkloadSpec

pytestmark = pytest.mark.slow


def run_recipe(name, runner=run_plan, seeds=None):
    config = load_config(name)
    expanded = expand_plans(config, seeds or list(config.run.seeds))
    return config, [(variant, runner(plan)) for variant, plan in expanded]


@pytest.mark.parametrize("name", ["crash-12-4", "crash-16-4", "queue-saturation", "peak-8x8", "analytics-preload"])
def test_recipe_meets_expectations(name):
    config, results = run_recipe(name)
    assert evaluate(config, results) == []


def test_partition_exposes_forks_only_without_finality():
    config, results = run_recipe("partition-security", runner=security_run)
    assert evaluate(config, results) == []
    by_variant = {variant.name: report for variant, report in results}
    assert all(s.delta == 0 for s in by_variant["pbft"].samples)
    for name in ("pow", "poa"):
        partition = by_variant[name].analytics["partition"]
        assert partition["peak_delta"] > 0
        assert partition["growth_ceased"]


def test_layer_cost_ordering():
    config, results = run_recipe("layer-cost")
    assert evaluate(config, results) == []


def test_recipe_replays_identically():
    config = load_config("peak-8x8")
    _, plan = expand_plans(config, [0])[0]
    first, second = run_plan(plan), run_plan(plan)
    assert first.trace_hash == second.trace_hash
    assert report_digest(first) == report_digest(second)


def test_smallbank_total_holds_after_every_block_over_ten_thousand_transactions():
    workload = WorkloadSpec(kind="smallbank", clients=8, request_rate=125, ops=1250, accounts=256,
                            overdraft_ratio=0.1)
    plan = RunPlan(workload=workload, topology=Topology(nodes=4), consensus=ConsensusConfig(engine=PBFT, n_nodes=4),
                   seed=0, name="smallbank-10k", duration=15_000)
    sim = Simulation(plan)
    sim.execute()
    report = sim.report()
    assert report.submitted == 10_000
    assert report.reverted > 0
    assert sim.monitor.violations == []
    assert sim.monitor.blocks_checked >= sum(node.chain.height for node in sim.honest_nodes()) > 0
    assert report.checks[CONSERVATION]
