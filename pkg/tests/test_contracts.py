import json

import pytest

from builtin_contracts import BUILTIN_CONTRACTS, Smallbank, quicksort, sequence_checksum
from codec import ZERO_HASH
from contracts import (
    ABORTED,
    COMMITTED,
    REVERTED,
    SYSTEM_CONTRACT,
    ContractRuntime,
    ReadOnlyViolation,
    UnknownContract,
    UnknownMethod,
    write_receipts,
)
from ledger import Transaction, make_block
from state_store import VersionedStateStore
from workloads import deploy_transactions


@pytest.fixture
def runtime():
    rt = ContractRuntime(VersionedStateStore(num_buckets=16), BUILTIN_CONTRACTS)
    genesis = make_block(0, ZERO_HASH, 0, ZERO_HASH, deploy_transactions(), 0)
    receipts = rt.execute_block(genesis)
    assert all(r.status == COMMITTED for r in receipts)
    return rt


class BlockRunner:
    def __init__(self, runtime):
        self.runtime = runtime
        self.height = 0
        self.nonce = 0

    def run(self, *calls, sender="client-0"):
        self.height += 1
        txns = []
        for contract, method, args in calls:
            txns.append(Transaction(sender, contract, method, tuple(args), self.height, self.nonce))
            self.nonce += 1
        block = make_block(self.height, ZERO_HASH, 0, ZERO_HASH, txns, self.height)
        return self.runtime.execute_block(block)


def test_genesis_deploys_every_builtin(runtime):
    assert sorted(runtime.deployed_contracts()) == sorted(BUILTIN_CONTRACTS)
    assert runtime.deployed_kind("smallbank") == "smallbank"


def test_redeploy_reverts(runtime):
    [receipt] = BlockRunner(runtime).run((SYSTEM_CONTRACT, "deploy", ("smallbank", "smallbank")))
    assert receipt.status == REVERTED


def test_unknown_contract_and_method_abort_without_writes(runtime):
    runner = BlockRunner(runtime)
    missing, bad_method = runner.run(("nowhere", "invoke", ()), ("smallbank", "steal", ("acct0",)))
    assert missing.status == ABORTED and missing.error == "UnknownContract"
    assert bad_method.status == ABORTED and bad_method.error == "UnknownMethod"
    assert missing.state_keys_written == () and bad_method.state_keys_written == ()
    assert runtime.store.get_latest(Smallbank.checking_key("acct0")) is None


def test_smallbank_payment_conserves_money(runtime):
    runner = BlockRunner(runtime)
    [ok, short] = runner.run(("smallbank", "send_payment", ("acct0", "acct1", 250)),
                             ("smallbank", "send_payment", ("acct0", "acct1", 10 ** 9)))
    assert ok.status == COMMITTED
    assert short.status == REVERTED and short.error == "InsufficientFunds"
    a = runtime.query("smallbank", "balance", ("acct0",))
    b = runtime.query("smallbank", "balance", ("acct1",))
    initial = Smallbank.INITIAL_CHECKING + Smallbank.INITIAL_SAVINGS
    assert a == initial - 250
    assert a + b == 2 * initial


def test_amalgamate_moves_everything(runtime):
    runner = BlockRunner(runtime)
    runner.run(("smallbank", "amalgamate", ("acct2", "acct3")))
    assert runtime.query("smallbank", "balance", ("acct2",)) == 0
    assert runtime.query("smallbank", "balance", ("acct3",)) == 40_000


def test_step_budget_aborts_expensive_calls():
    rt = ContractRuntime(VersionedStateStore(num_buckets=4), BUILTIN_CONTRACTS, step_budget=50)
    rt.execute_block(make_block(0, ZERO_HASH, 0, ZERO_HASH, deploy_transactions(), 0))
    [receipt] = BlockRunner(rt).run(("cpuheavy", "sort", (1000,)))
    assert receipt.status == ABORTED
    assert receipt.error == "StepBudgetExceeded"


def test_cpuheavy_sorts_the_sequence(runtime):
    runner = BlockRunner(runtime)
    [receipt] = runner.run(("cpuheavy", "sort", (10,)))
    assert receipt.status == COMMITTED
    assert receipt.output == sequence_checksum(range(1, 11))
    assert receipt.steps_used > 10


def test_quicksort_sorts_and_counts():
    values = list(range(100_000, 0, -1))
    comparisons = quicksort(values)
    assert values == list(range(1, 100_001))
    assert comparisons > 0
    assert sequence_checksum(values) == sequence_checksum(range(1, 100_001))


def test_kvstore_matches_plain_map(runtime):
    runner = BlockRunner(runtime)
    oracle = {}
    for i in range(50):
        key = f"user{i % 7}"
        value = bytes([i]) * 4
        runner.run(("kvstore", "write", (key, value)))
        oracle[key] = value
    for key, value in oracle.items():
        assert runtime.query("kvstore", "read", (key,)) == value
    assert runtime.query("kvstore", "read", ("absent",)) is None


def test_ioheavy_reads_back_written_keys(runtime):
    runner = BlockRunner(runtime)
    runner.run(("ioheavy", "write_batch", (20, 3)))
    [receipt] = runner.run(("ioheavy", "read_batch", (20, 3)))
    assert receipt.output == 20


def test_versionkv_queries(runtime):
    runner = BlockRunner(runtime)
    assert runtime.query("versionkv", "q1", (0, 0)) == 0
    runner.run(("versionkv", "send_value", ("acct0", "acct1", 7)))
    assert runtime.query("versionkv", "q1", (1, 2)) == 7
    assert runtime.query("versionkv", "q2", ("acct0", 1, 2)) == 7
    assert runtime.query("versionkv", "q2", ("acct1", 1, 2)) == 7
    assert runtime.query("versionkv", "q2", ("acct9", 1, 2)) == 0
    runner.run(("versionkv", "send_value", ("acct1", "acct2", 3)),
               ("versionkv", "send_value", ("acct2", "acct0", 11)))
    assert runtime.query("versionkv", "q1", (1, 3)) == 21
    assert runtime.query("versionkv", "q1", (2, 3)) == 14
    assert runtime.query("versionkv", "q2", ("acct0", 1, 3)) == 11
    assert runtime.query("versionkv", "q2", ("acct1", 2, 3)) == 3
    assert runtime.query("versionkv", "account", ("acct0",)) == (4, 11)


def test_doubler_pays_earlier_entrants(runtime):
    runner = BlockRunner(runtime)
    runner.run(("doubler", "enter", (10,)), sender="client-0")
    [receipt] = runner.run(("doubler", "enter", (30,)), sender="client-1")
    assert receipt.output == 1
    assert runtime.query("doubler", "paid", ("client-0",)) == 20
    assert runtime.query("doubler", "status")["balance"] == 20


def test_queries_are_read_only(runtime):
    with pytest.raises(UnknownMethod):
        runtime.query("kvstore", "write", ("k", b"v"))
    with pytest.raises(UnknownContract):
        runtime.query("missing", "read", ("k",))


def test_put_state_refused_in_read_only_context(runtime):
    from contracts import ContractContext

    ctx = ContractContext(runtime.store, "query", 0, read_only=True)
    with pytest.raises(ReadOnlyViolation):
        ctx.put_state(b"k", b"v")


def test_write_receipts(runtime, tmp_path):
    receipts = BlockRunner(runtime).run(("donothing", "invoke", ()))
    path = tmp_path / "receipts.jsonl"
    assert write_receipts(receipts, path, mode="w") == 1
    record = json.loads(path.read_text())
    assert record["status"] == COMMITTED
    assert record["block_height"] == 1


def test_reverted_transaction_leaves_state_root_unchanged(runtime):
    runner = BlockRunner(runtime)
    runner.run(("smallbank", "send_payment", ("acct0", "acct1", 100)))
    before = runtime.store.state_root()
    overdraft = Transaction("client-0", "smallbank", "send_payment", ("acct0", "acct1", 10 ** 9), 99, 0)
    receipt = runtime.invoke(overdraft, runner.height + 1)
    assert receipt.status == REVERTED and receipt.error == "InsufficientFunds"
    assert receipt.state_keys_written == ()
    assert runtime.store.state_root() == before
    assert runtime.store.rebuild_root() == before


@pytest.mark.parametrize("contract,method,args,error", [
    ("kvstore", "read", (5,), "AttributeError"),
    ("kvstore", "write", ("k",), "TypeError"),
    ("smallbank", "send_payment", ("acct0", "acct1", "ten"), "TypeError"),
])
def test_malformed_arguments_abort_without_stopping_the_block(runtime, contract, method, args, error):
    runner = BlockRunner(runtime)
    bad, good = runner.run((contract, method, args), ("kvstore", "write", ("k", b"v")))
    assert bad.status == ABORTED and bad.error == error
    assert bad.state_keys_written == ()
    assert good.status == COMMITTED
    assert runtime.query("kvstore", "read", ("k",)) == b"v"
