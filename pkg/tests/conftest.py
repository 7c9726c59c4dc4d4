import logging

import pytest

from codec import ZERO_HASH
from ledger import Transaction, make_block, make_genesis
from signatures import KeyRegistry


@pytest.fixture(autouse=True)
def isolated_dirs(tmp_path, monkeypatch):
    monkeypatch.setenv("CHAINBENCH_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.delenv("CHAINBENCH_OUT_DIR", raising=False)
    monkeypatch.delenv("CHAINBENCH_DEV", raising=False)
    root = logging.getLogger()
    before = list(root.handlers)
    yield
    # configure_logging attaches handlers to the root logger on every CLI call
    for handler in list(root.handlers):
        if handler not in before:
            root.removeHandler(handler)
            handler.close()


@pytest.fixture
def registry():
    return KeyRegistry(seed=7)


@pytest.fixture
def genesis():
    return make_genesis(ZERO_HASH)


def child_of(parent, proposer=0, nonce=0, txns=(), timestamp=None):
    """Build an uncertified block on top of parent."""
    return make_block(
        parent.height + 1,
        parent.hash,
        proposer,
        ZERO_HASH,
        txns,
        timestamp=parent.header.timestamp + 1 if timestamp is None else timestamp,
        nonce=nonce,
    )


def chain_of(parent, length, **kwargs):
    blocks = []
    for _ in range(length):
        parent = child_of(parent, **kwargs)
        blocks.append(parent)
    return blocks


def transfer(sender="client-0", nonce=0, amount=5):
    return Transaction(sender, "smallbank", "send_payment", ("acct0", "acct1", amount), 10, nonce)
