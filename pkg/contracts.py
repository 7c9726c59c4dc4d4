"""
contracts.py - Deterministic stored-procedure runtime with step metering.

Contracts are native classes behind ContractContext. A transaction's writes are
buffered in the context and flushed to the store only when the call returns
normally, so aborted and reverted calls leave the state untouched. Deployment
is itself a transaction on the system contract; the deployed set lives in the
state store, so it follows chain reorganizations like any other state.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Type

from codec import decode, encode
from constants import DEFAULT_STEP_BUDGET
from ledger import Block, Transaction
from state_store import StateStoreError, VersionedStateStore
from utils import JsonLinesWriter

logger = logging.getLogger(__name__)

SYSTEM_CONTRACT = "__system__"
DEPLOY_KEY_PREFIX = b"sys:contract:"
DEPLOYED_LIST_KEY = b"sys:deployed"

COMMITTED = "committed"
ABORTED = "aborted"
REVERTED = "reverted"


class ContractError(Exception):
    """Base class for contract execution errors."""
    pass


class UnknownContract(ContractError):
    pass


class UnknownMethod(ContractError):
    pass


class StepBudgetExceeded(ContractError):
    pass


class ContractRevert(ContractError):
    """Raised by contract code to reject a call; the receipt is 'reverted'."""
    pass


class InsufficientFunds(ContractRevert):
    pass


class ReadOnlyViolation(ContractError):
    pass


@dataclass
class Receipt:
    txn_id: bytes
    status: str
    steps_used: int
    state_keys_written: Tuple[bytes, ...] = ()
    error: Optional[str] = None
    output: Any = None
    block_height: int = 0

    def to_dict(self) -> Dict[str, Any]:
        output = self.output.hex() if isinstance(self.output, bytes) else self.output
        return {
            "txn_id": self.txn_id.hex(),
            "status": self.status,
            "steps_used": self.steps_used,
            "state_keys_written": [k.hex() for k in self.state_keys_written],
            "error": self.error,
            "output": output,
            "block_height": self.block_height,
        }


class ContractContext:
    """
    The only window a contract has on the world.

    One step is charged per state access; contracts charge extra steps for
    their own work through step().
    """

    def __init__(self, store: VersionedStateStore, sender: str, block_height: int,
                 step_budget: int = DEFAULT_STEP_BUDGET, value: int = 0, read_only: bool = False):
        self.store = store
        self.sender = sender
        self.value = value
        self.block_height = block_height
        self.step_budget = step_budget
        self.read_only = read_only
        self.steps_used = 0
        self.writes: Dict[bytes, bytes] = {}

    def step(self, n: int = 1) -> None:
        self.steps_used += n
        if self.steps_used > self.step_budget:
            raise StepBudgetExceeded(f"Used {self.steps_used} of {self.step_budget} steps")

    def get_state(self, key: bytes) -> Optional[bytes]:
        self.step()
        if key in self.writes:
            return self.writes[key]
        return self.store.get_latest(key)

    def put_state(self, key: bytes, value: bytes) -> None:
        self.step()
        if self.read_only:
            raise ReadOnlyViolation(f"Write to {key!r} in a read-only call")
        self.writes[key] = value

    def query_account_block_range(self, key: bytes, start_block: int, end_block: int):
        self.step()
        return self.store.query_account_block_range(key, start_block, end_block)

    def query_block_txn_list(self, height: int):
        self.step()
        return self.store.query_block_txn_list(height)


class Contract:
    """Base class for native contracts. `methods` lists the callable entry points."""

    kind = ""
    methods: Tuple[str, ...] = ()
    query_methods: Tuple[str, ...] = ()
    payable_methods: Tuple[str, ...] = ()

    def on_block_end(self, ctx: ContractContext) -> None:
        """Hook run once per block after the block's transactions."""
        pass


class SystemContract(Contract):
    kind = SYSTEM_CONTRACT
    methods = ("deploy",)

    def __init__(self, kinds: Dict[str, Type[Contract]]):
        self.kinds = kinds

    def deploy(self, ctx: ContractContext, contract_id: str, kind: str):
        if kind not in self.kinds:
            raise ContractRevert(f"Unknown contract kind: {kind}")
        key = DEPLOY_KEY_PREFIX + contract_id.encode("utf-8")
        if ctx.get_state(key) is not None:
            raise ContractRevert(f"Contract {contract_id} already deployed")
        ctx.put_state(key, kind.encode("utf-8"))
        raw = ctx.get_state(DEPLOYED_LIST_KEY)
        deployed = list(decode(raw)) if raw else []
        ctx.put_state(DEPLOYED_LIST_KEY, encode(deployed + [contract_id.encode("utf-8")]))
        return contract_id


class ContractRuntime:
    """
    Executes transactions against one node's state store.

    Args:
        store: The node's versioned state store
        kinds: Contract kind name -> implementation class
        step_budget: Per-transaction step limit
    """

    def __init__(self, store: VersionedStateStore, kinds: Dict[str, Type[Contract]],
                 step_budget: int = DEFAULT_STEP_BUDGET):
        self.store = store
        self.kinds = dict(kinds)
        self.step_budget = step_budget
        self._system = SystemContract(self.kinds)
        self._instances: Dict[str, Contract] = {}

    def deploy(self, contract_id: str, contract_impl: Type[Contract]) -> None:
        """Register an implementation kind; deployment proper is a system transaction."""
        if contract_impl.kind not in self.kinds:
            self.kinds[contract_impl.kind] = contract_impl
        self._system.kinds = self.kinds
        logger.debug(f"Registered contract kind {contract_impl.kind} for {contract_id}")

    def deployed_kind(self, contract_id: str) -> Optional[str]:
        raw = self.store.get_latest(DEPLOY_KEY_PREFIX + contract_id.encode("utf-8"))
        return raw.decode("utf-8") if raw is not None else None

    def resolve(self, contract_id: str) -> Contract:
        if contract_id == SYSTEM_CONTRACT:
            return self._system
        kind = self.deployed_kind(contract_id)
        if kind is None:
            raise UnknownContract(f"Contract {contract_id} is not deployed")
        instance = self._instances.get(kind)
        if instance is None:
            instance = self.kinds[kind]()
            self._instances[kind] = instance
        return instance

    def _dispatch(self, contract: Contract, method: str, allowed: Sequence[str]) -> Callable:
        if method not in allowed:
            raise UnknownMethod(f"{contract.kind} has no method {method}")
        return getattr(contract, method)

    def invoke(self, txn: Transaction, block_height: int) -> Receipt:
        """
        Execute one committed transaction.

        Never raises for contract-level failures: they become aborted or
        reverted receipts and leave the state unchanged.
        """
        ctx = ContractContext(self.store, txn.sender, block_height, self.step_budget)
        try:
            ctx.step()
            contract = self.resolve(txn.contract)
            fn = self._dispatch(contract, txn.method, contract.methods)
            if txn.method in contract.payable_methods and txn.args and isinstance(txn.args[0], int):
                ctx.value = txn.args[0]
            output = fn(ctx, *txn.args)
        except ContractRevert as e:
            return Receipt(txn.txn_id, REVERTED, ctx.steps_used, (), type(e).__name__, str(e), block_height)
        except (ContractError, StateStoreError) as e:
            return Receipt(txn.txn_id, ABORTED, ctx.steps_used, (), type(e).__name__, str(e), block_height)
        except (TypeError, ValueError, AttributeError, KeyError, IndexError) as e:
            # Malformed arguments: wrong arity or argument types the method cannot use
            return Receipt(txn.txn_id, ABORTED, ctx.steps_used, (), type(e).__name__, str(e), block_height)

        written = tuple(ctx.writes)
        for key, value in ctx.writes.items():
            self.store.put(key, value, block_height)
        return Receipt(txn.txn_id, COMMITTED, ctx.steps_used, written, None, output, block_height)

    def query(self, contract_id: str, method: str, args: Sequence[Any] = ()) -> Any:
        """
        Run a read-only call against the latest state.

        Raises:
            UnknownContract, UnknownMethod, StepBudgetExceeded, ContractRevert
        """
        contract = self.resolve(contract_id)
        fn = self._dispatch(contract, method, contract.query_methods)
        ctx = ContractContext(self.store, "query", self.store_height(), self.step_budget, read_only=True)
        return fn(ctx, *args)

    def store_height(self) -> int:
        return max(self.store.root_history) if self.store.root_history else 0

    def deployed_contracts(self) -> List[str]:
        raw = self.store.get_latest(DEPLOYED_LIST_KEY)
        return [c.decode("utf-8") for c in decode(raw)] if raw else []

    def end_block(self, height: int) -> int:
        """Run the block-end hook of every deployed contract kind once; returns steps used."""
        steps = 0
        hooked = set()
        for contract_id in self.deployed_contracts():
            contract = self.resolve(contract_id)
            if contract.kind in hooked or type(contract).on_block_end is Contract.on_block_end:
                continue
            hooked.add(contract.kind)
            ctx = ContractContext(self.store, SYSTEM_CONTRACT, height, self.step_budget)
            try:
                contract.on_block_end(ctx)
            except (ContractError, StateStoreError) as e:
                logger.error(f"Block-end hook of {contract_id} failed at height {height}: {e}")
                continue
            for key, value in ctx.writes.items():
                self.store.put(key, value, height)
            steps += ctx.steps_used
        return steps

    def execute_block(self, block: Block) -> List[Receipt]:
        """Invoke every transaction in order, run block-end hooks and record the state root."""
        receipts = [self.invoke(txn, block.height) for txn in block.txns]
        self.end_block(block.height)
        self.store.commit_block(block.height)
        return receipts


def write_receipts(receipts: Sequence[Receipt], path, mode: str = "a") -> int:
    with JsonLinesWriter(path, mode=mode) as writer:
        for receipt in receipts:
            writer.write(receipt.to_dict())
        return writer.count
