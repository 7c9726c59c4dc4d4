"""
builtin_contracts.py - The benchmark's workload contracts.
"""

import logging
from typing import Dict, List, Optional, Type

import numpy as np

from codec import pack_values, unpack_values
from constants import IOHEAVY_KEY_SIZE, IOHEAVY_VALUE_SIZE
from contracts import Contract, ContractContext, ContractRevert, InsufficientFunds
from state_store import TxnSummary, UnknownBlock, UnknownKey, block_key, decode_txn_list, encode_txn_list

logger = logging.getLogger(__name__)

CHECKSUM_MODULUS = 2 ** 64


def _get_int(ctx: ContractContext, key: bytes, default: int = 0) -> int:
    raw = ctx.get_state(key)
    return unpack_values(raw)[0] if raw is not None else default


def _put_int(ctx: ContractContext, key: bytes, value: int) -> None:
    ctx.put_state(key, pack_values([value]))


class DoNothing(Contract):
    """Accepts a transaction and returns; isolates consensus cost."""

    kind = "donothing"
    methods = ("invoke",)

    def invoke(self, ctx: ContractContext, *args):
        return None


class KVStore(Contract):
    """Key-value storage targeted by YCSB."""

    kind = "kvstore"
    methods = ("read", "write")
    query_methods = ("read",)

    @staticmethod
    def _key(key: str) -> bytes:
        return b"kv:" + key.encode("utf-8")

    def read(self, ctx: ContractContext, key: str) -> Optional[bytes]:
        return ctx.get_state(self._key(key))

    def write(self, ctx: ContractContext, key: str, value: bytes) -> None:
        ctx.put_state(self._key(key), value)


class Smallbank(Contract):
    """
    Banking procedures over checking and savings accounts.

    Accounts start with INITIAL_CHECKING / INITIAL_SAVINGS on first touch, so the
    total over a fixed account universe is constant under the conserving procedures
    (send_payment, amalgamate, balance reads).
    """

    kind = "smallbank"
    methods = ("amalgamate", "get_balance", "balance", "update_balance",
               "update_saving", "send_payment", "write_check")
    query_methods = ("balance", "get_balance")

    INITIAL_CHECKING = 10_000
    INITIAL_SAVINGS = 10_000
    OVERDRAFT_PENALTY = 1

    @staticmethod
    def checking_key(acct: str) -> bytes:
        return b"sb:c:" + acct.encode("utf-8")

    @staticmethod
    def savings_key(acct: str) -> bytes:
        return b"sb:s:" + acct.encode("utf-8")

    @staticmethod
    def account_of(key: bytes) -> Optional[str]:
        """Account whose checking or savings cell is stored under key."""
        if key[:5] in (b"sb:c:", b"sb:s:"):
            return key[5:].decode("utf-8")
        return None

    def _checking(self, ctx, acct):
        return _get_int(ctx, self.checking_key(acct), self.INITIAL_CHECKING)

    def _savings(self, ctx, acct):
        return _get_int(ctx, self.savings_key(acct), self.INITIAL_SAVINGS)

    def balance(self, ctx: ContractContext, acct: str) -> int:
        return self._checking(ctx, acct) + self._savings(ctx, acct)

    def get_balance(self, ctx: ContractContext, acct: str) -> int:
        return self.balance(ctx, acct)

    def send_payment(self, ctx: ContractContext, src: str, dst: str, amount: int) -> None:
        if amount < 0:
            raise ContractRevert("Negative payment")
        src_checking = self._checking(ctx, src)
        if src_checking < amount:
            raise InsufficientFunds(f"{src} has {src_checking}, needs {amount}")
        dst_checking = self._checking(ctx, dst)
        if src == dst:
            return
        _put_int(ctx, self.checking_key(src), src_checking - amount)
        _put_int(ctx, self.checking_key(dst), dst_checking + amount)

    def amalgamate(self, ctx: ContractContext, src: str, dst: str) -> None:
        if src == dst:
            raise ContractRevert("Cannot amalgamate an account into itself")
        total = self._checking(ctx, src) + self._savings(ctx, src)
        dst_checking = self._checking(ctx, dst)
        _put_int(ctx, self.checking_key(src), 0)
        _put_int(ctx, self.savings_key(src), 0)
        _put_int(ctx, self.checking_key(dst), dst_checking + total)

    def update_balance(self, ctx: ContractContext, acct: str, amount: int) -> None:
        checking = self._checking(ctx, acct)
        if checking + amount < 0:
            raise InsufficientFunds(f"{acct} checking would become negative")
        _put_int(ctx, self.checking_key(acct), checking + amount)

    def update_saving(self, ctx: ContractContext, acct: str, amount: int) -> None:
        savings = self._savings(ctx, acct)
        if savings + amount < 0:
            raise InsufficientFunds(f"{acct} savings would become negative")
        _put_int(ctx, self.savings_key(acct), savings + amount)

    def write_check(self, ctx: ContractContext, acct: str, amount: int) -> None:
        checking = self._checking(ctx, acct)
        total = checking + self._savings(ctx, acct)
        if total < amount:
            amount += self.OVERDRAFT_PENALTY
        _put_int(ctx, self.checking_key(acct), checking - amount)


def io_keys(n: int, seed: int) -> List[bytes]:
    data = np.random.default_rng(seed).bytes(IOHEAVY_KEY_SIZE * n)
    return [data[i * IOHEAVY_KEY_SIZE:(i + 1) * IOHEAVY_KEY_SIZE] for i in range(n)]


def io_values(n: int, seed: int) -> List[bytes]:
    data = np.random.default_rng([seed, 1]).bytes(IOHEAVY_VALUE_SIZE * n)
    return [data[i * IOHEAVY_VALUE_SIZE:(i + 1) * IOHEAVY_VALUE_SIZE] for i in range(n)]


class IOHeavy(Contract):
    """Random writes and reads of 20-byte keys with 100-byte values."""

    kind = "ioheavy"
    methods = ("write_batch", "read_batch")

    def write_batch(self, ctx: ContractContext, n: int, seed: int) -> int:
        for key, value in zip(io_keys(n, seed), io_values(n, seed)):
            ctx.put_state(b"io:" + key, value)
        return n

    def read_batch(self, ctx: ContractContext, n: int, seed: int) -> int:
        found = 0
        for key in io_keys(n, seed):
            if ctx.get_state(b"io:" + key) is not None:
                found += 1
        return found


def quicksort(values: List[int], ctx: Optional[ContractContext] = None) -> int:
    """
    Iterative in-place quicksort with a middle pivot.

    Returns:
        int: Number of comparisons; each is charged as one step when ctx is given
    """
    comparisons = 0
    stack = [(0, len(values) - 1)]
    while stack:
        lo, hi = stack.pop()
        if lo >= hi:
            continue
        pivot = values[(lo + hi) // 2]
        i, j = lo, hi
        charged = comparisons
        while i <= j:
            while values[i] < pivot:
                i += 1
                comparisons += 1
            comparisons += 1
            while values[j] > pivot:
                j -= 1
                comparisons += 1
            comparisons += 1
            if i <= j:
                values[i], values[j] = values[j], values[i]
                i += 1
                j -= 1
        if ctx is not None:
            ctx.step(comparisons - charged)
        stack.append((lo, j))
        stack.append((i, hi))
    return comparisons


def sequence_checksum(values) -> int:
    return sum((i + 1) * v for i, v in enumerate(values)) % CHECKSUM_MODULUS


class CPUHeavy(Contract):
    """Sorts a descending array of n integers in-contract."""

    kind = "cpuheavy"
    methods = ("sort",)

    def sort(self, ctx: ContractContext, n: int) -> int:
        if n < 0:
            raise ContractRevert("Array size must be non-negative")
        values = list(range(n, 0, -1))
        quicksort(values, ctx)
        return sequence_checksum(values)


class VersionKV(Contract):
    """
    Value transfers recorded for analytics.

    Each account's state cell holds (balance, value of the last transfer touching
    it); the store's version chain turns that into per-account history. Transfers
    of the current block accumulate in pending_list and are written under
    block:<height> when the block ends.
    """

    kind = "versionkv"
    methods = ("send_value", "q1", "q2")
    query_methods = ("q1", "q2", "account")

    PENDING_KEY = b"pending_list"

    @staticmethod
    def account_key(acct: str) -> bytes:
        return acct.encode("utf-8")

    def _account(self, ctx, acct):
        raw = ctx.get_state(self.account_key(acct))
        return unpack_values(raw) if raw is not None else (0, 0)

    def account(self, ctx: ContractContext, acct: str):
        return self._account(ctx, acct)

    def send_value(self, ctx: ContractContext, src: str, dst: str, value: int) -> None:
        if value < 0:
            raise ContractRevert("Negative transfer")
        src_balance, _ = self._account(ctx, src)
        ctx.put_state(self.account_key(src), pack_values([src_balance - value, value]))
        dst_balance, _ = self._account(ctx, dst)
        ctx.put_state(self.account_key(dst), pack_values([dst_balance + value, value]))
        raw = ctx.get_state(self.PENDING_KEY)
        pending = decode_txn_list(raw) if raw else []
        pending.append(TxnSummary(src, dst, value))
        ctx.put_state(self.PENDING_KEY, encode_txn_list(pending))

    def on_block_end(self, ctx: ContractContext) -> None:
        raw = ctx.get_state(self.PENDING_KEY)
        pending = decode_txn_list(raw) if raw else []
        ctx.put_state(block_key(ctx.block_height), encode_txn_list(pending))
        if pending:
            ctx.put_state(self.PENDING_KEY, encode_txn_list([]))

    def q1(self, ctx: ContractContext, start: int, end: int) -> int:
        """Total value transferred in blocks [start, end)."""
        total = 0
        for height in range(start, end):
            try:
                total += sum(s.value for s in ctx.query_block_txn_list(height))
            except UnknownBlock:
                continue
        return total

    def q2(self, ctx: ContractContext, acct: str, start: int, end: int) -> int:
        """Largest transfer touching acct in blocks [start, end)."""
        try:
            entries = ctx.query_account_block_range(self.account_key(acct), start, end)
        except UnknownKey:
            return 0
        return max((unpack_values(value)[1] for value, _ in entries), default=0)


class Doubler(Contract):
    """
    Pyramid scheme: each entrant is paid twice their amount once the pot exceeds it.
    """

    kind = "doubler"
    methods = ("enter",)
    query_methods = ("status", "paid")
    payable_methods = ("enter",)

    PAYOUT_MULTIPLIER = 2

    @staticmethod
    def _participant_key(index: int) -> bytes:
        return b"dbl:p:" + str(index).encode("ascii")

    @staticmethod
    def _paid_key(acct: str) -> bytes:
        return b"dbl:paid:" + acct.encode("utf-8")

    def enter(self, ctx: ContractContext, value: int) -> int:
        if value <= 0:
            raise ContractRevert("Entry value must be positive")
        count = _get_int(ctx, b"dbl:count")
        ctx.put_state(self._participant_key(count), pack_values([ctx.sender, value]))
        count += 1
        _put_int(ctx, b"dbl:count", count)
        balance = _get_int(ctx, b"dbl:balance") + value
        payout_idx = _get_int(ctx, b"dbl:payout_idx")
        paid_now = 0
        while payout_idx < count:
            who, amount = unpack_values(ctx.get_state(self._participant_key(payout_idx)))
            payout = self.PAYOUT_MULTIPLIER * amount
            if balance <= payout:
                break
            balance -= payout
            _put_int(ctx, self._paid_key(who), _get_int(ctx, self._paid_key(who)) + payout)
            payout_idx += 1
            paid_now += 1
        _put_int(ctx, b"dbl:balance", balance)
        _put_int(ctx, b"dbl:payout_idx", payout_idx)
        return paid_now

    def status(self, ctx: ContractContext):
        return {
            "participants": _get_int(ctx, b"dbl:count"),
            "balance": _get_int(ctx, b"dbl:balance"),
            "payout_idx": _get_int(ctx, b"dbl:payout_idx"),
        }

    def paid(self, ctx: ContractContext, acct: str) -> int:
        return _get_int(ctx, self._paid_key(acct))


BUILTIN_CONTRACTS: Dict[str, Type[Contract]] = {
    cls.kind: cls for cls in (DoNothing, KVStore, Smallbank, IOHeavy, CPUHeavy, VersionKV, Doubler)
}
