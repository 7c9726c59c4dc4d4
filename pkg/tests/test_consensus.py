from dataclasses import replace

import numpy as np
import pytest

from codec import ZERO_HASH
from conftest import child_of
from consensus import (
    NONCE_CHUNK,
    NONCE_SPACE,
    PBFT,
    POA,
    POW,
    SEQUENCER,
    STAKE_CONSTANT,
    STAKE_NXT,
    ConsensusConfig,
    ConsensusError,
    PuzzleError,
    StakeTable,
    UnknownMiner,
    central_sequence,
    poa_proposer,
    pos_check,
    pos_difficulty,
    pos_puzzle_digest,
    pow_difficulty,
    pow_search,
    pow_solve,
    pow_verify,
    puzzle_digest,
    puzzle_value,
    seal_block,
    verify_seal,
    with_nonce,
)
from constants import HASH_SPACE
from ledger import FINALIZED, LONGEST_CHAIN, BlockHeader


def header(height=1, proposer=0):
    return BlockHeader(height, ZERO_HASH, proposer, 0, ZERO_HASH, ZERO_HASH, 5)


def test_fault_threshold_and_mode():
    assert ConsensusConfig(n_nodes=4).f == 1
    assert ConsensusConfig(n_nodes=12).f == 3
    assert ConsensusConfig(n_nodes=16).f == 5
    assert ConsensusConfig(engine=PBFT).mode == FINALIZED
    assert ConsensusConfig(engine=SEQUENCER, authorities=(0,)).mode == FINALIZED
    assert ConsensusConfig(engine=POW).mode == LONGEST_CHAIN


@pytest.mark.parametrize("config", [
    ConsensusConfig(engine="raft"),
    ConsensusConfig(batch_size=0),
    ConsensusConfig(difficulty_t=0),
    ConsensusConfig(engine=POA),
    ConsensusConfig(engine=POA, authorities=(7,)),
    ConsensusConfig(step_duration=0),
])
def test_invalid_configs(config):
    with pytest.raises(ConsensusError):
        config.validate()


def test_pow_trivial_threshold_accepts_first_nonce():
    rng = np.random.default_rng(0)
    assert pow_search(header(), HASH_SPACE, rng).tries == 1


def test_pow_nonce_verifies():
    h = header()
    nonce = pow_solve(h, 2 ** 250, np.random.default_rng(1))
    solved = BlockHeader(h.height, h.parent_hash, h.proposer, nonce, h.state_root, h.txn_root, h.timestamp)
    assert pow_verify(solved, 2 ** 250)
    assert puzzle_value(nonce, puzzle_digest(h)) < 2 ** 250


def test_pow_rejects_non_positive_threshold():
    with pytest.raises(PuzzleError):
        pow_solve(header(), 0, np.random.default_rng(0))


def test_pow_try_count_matches_replay_of_the_same_stream():
    t = 2 ** 252
    base = puzzle_digest(header())
    solution = pow_search(header(), t, np.random.default_rng(42))
    replay = np.random.default_rng(42)
    tries = 0
    found = None
    while found is None:
        for nonce in replay.integers(0, NONCE_SPACE, NONCE_CHUNK).tolist():
            tries += 1
            if puzzle_value(nonce, base) < t:
                found = nonce
                break
    assert (found, tries) == (solution.nonce, solution.tries)


def test_pow_expected_tries_follow_difficulty():
    t = 2 ** 252
    tries = [pow_search(header(proposer=i), t, np.random.default_rng(i)).tries for i in range(400)]
    # Geometric with mean 16
    assert 13 < np.mean(tries) < 19


def test_difficulty_sets_block_interval():
    assert pow_difficulty(1000, 4) == HASH_SPACE // 4000
    assert pos_difficulty(1000, [10, 10], STAKE_CONSTANT) == HASH_SPACE // 20_000
    assert pos_difficulty(1000, [10, 10], STAKE_NXT) == HASH_SPACE // (10 * 1000 * 3)


def test_pos_threshold_scales_with_stake():
    stakes = StakeTable({0: 0, 1: 5}, STAKE_CONSTANT)
    h = header()
    assert not pos_check(h, HASH_SPACE, stakes, 0)
    # s(M) * t saturates at the hash space
    assert pos_check(h, HASH_SPACE, stakes, 1)
    with pytest.raises(UnknownMiner):
        pos_check(h, HASH_SPACE, stakes, 9)


def test_pos_hit_ignores_nonce_timestamp_and_txn_selection():
    h = header()
    base = pos_puzzle_digest(h)
    assert pos_puzzle_digest(replace(h, nonce=99, timestamp=12, txn_root=b"\x07" * 32)) == base
    assert pos_puzzle_digest(replace(h, proposer=1)) != base
    assert pos_puzzle_digest(replace(h, parent_hash=b"\x01" * 32)) != base
    assert pos_puzzle_digest(replace(h, state_root=b"\x02" * 32)) != base
    # The PoW digest keeps the body commitment
    assert puzzle_digest(replace(h, txn_root=b"\x07" * 32)) != puzzle_digest(h)


def test_nxt_stake_grows_with_age():
    stakes = StakeTable({0: 3}, STAKE_NXT)
    assert stakes.stake_of(0, age=0) == 0
    assert stakes.stake_of(0, age=10) == 30
    with pytest.raises(ConsensusError):
        StakeTable({0: -1})


def test_poa_round_robin():
    authorities = (2, 5, 7)
    slots = [poa_proposer(t, authorities, 1000) for t in range(0, 6000, 1000)]
    assert slots == [2, 5, 7, 2, 5, 7]
    assert poa_proposer(1999, authorities, 1000) == 5


def test_central_sequence_keeps_arrival_order():
    batches = central_sequence(list(range(7)), 3)
    assert batches == [(0, 1, 2), (3, 4, 5), (6,)]
    assert central_sequence([], 3) == []


def test_seal_verifies_only_for_expected_signer(genesis, registry):
    block = child_of(genesis, proposer=1)
    sealed = seal_block(block, 1, registry)
    assert verify_seal(sealed, 1, registry)
    assert not verify_seal(sealed, 2, registry)
    assert not verify_seal(block, 1, registry)
    # The seal signs the header digest, so a new nonce invalidates it
    assert not verify_seal(with_nonce(sealed, 99), 1, registry)


def test_pow_solutions_always_verify():
    t = 2 ** 252
    rng = np.random.default_rng(9)
    for i in range(1000):
        h = BlockHeader(i + 1, ZERO_HASH, i % 7, 0, ZERO_HASH, ZERO_HASH, i)
        nonce = pow_solve(h, t, rng)
        solved = BlockHeader(h.height, h.parent_hash, h.proposer, nonce, h.state_root, h.txn_root, h.timestamp)
        assert pow_verify(solved, t)


def test_pos_success_ratio_follows_stake():
    stakes = StakeTable({0: 1, 1: 8}, STAKE_CONSTANT)
    t = HASH_SPACE // 32
    wins = {0: 0, 1: 0}
    for i in range(20_000):
        h = BlockHeader(1, ZERO_HASH, 0, i, ZERO_HASH, ZERO_HASH, i)
        for miner in wins:
            wins[miner] += pos_check(h, t, stakes, miner)
    assert 0.8 * 8 <= wins[1] / wins[0] <= 1.2 * 8


def test_poa_slots_match_closed_form():
    authorities = (3, 1, 4, 0)
    step = 250
    for slot in range(10_000):
        t = slot * step + slot % step
        assert poa_proposer(t, authorities, step) == authorities[slot % len(authorities)]
