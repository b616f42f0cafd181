"""FIFO memory banks."""
from collections import deque

import numpy as np
import pytest

from app.errors import MemoryBankError
from app.membank import MemoryBank
from tests.conftest import unit_rows


def filled(capacity=8, dim=3, num_classes=4, counts=(4,), seed=0):
    rng = np.random.default_rng(seed)
    bank = MemoryBank(0, capacity, dim, num_classes)
    for b in counts:
        bank.enqueue(unit_rows(rng, b, dim), rng.integers(0, num_classes, size=b))
    return bank


# --- enqueue ---

def test_enqueue_preserves_order(rng):
    bank = MemoryBank(0, 8, 3, 4)
    keys = unit_rows(rng, 4, 3)
    bank.enqueue(keys, [0, 1, 2, 3])
    snap_keys, labels = bank.snapshot()
    assert len(bank) == 4
    assert np.array_equal(snap_keys, keys)
    assert labels.tolist() == [0, 1, 2, 3]
    assert bank.steps().tolist() == [0, 1, 2, 3]


def test_full_bank_evicts_oldest():
    bank = filled(capacity=8, counts=(8,))
    assert bank.steps().tolist() == list(range(8))
    bank.enqueue(unit_rows(np.random.default_rng(1), 3, 3), [0, 0, 0])
    assert bank.steps().tolist() == list(range(3, 11))
    assert bank.is_full


def test_oversized_batch_is_rejected_without_change():
    bank = filled(capacity=4, counts=(2,))
    before = bank.snapshot()
    with pytest.raises(MemoryBankError):
        bank.enqueue(unit_rows(np.random.default_rng(2), 5, 3), [0] * 5)
    after = bank.snapshot()
    assert np.array_equal(before[0], after[0]) and np.array_equal(before[1], after[1])
    assert bank.next_step == 2


def test_non_unit_keys_are_rejected():
    bank = MemoryBank(0, 4, 2, 3)
    with pytest.raises(MemoryBankError, match="unit-norm"):
        bank.enqueue(np.array([[1.0, 1.0]]), [0])
    bank.enqueue(np.array([[1.0 + 5e-7, 0.0]]), [0])
    assert len(bank) == 1


def test_labels_out_of_range_are_rejected():
    bank = MemoryBank(0, 4, 2, 3)
    with pytest.raises(MemoryBankError):
        bank.enqueue(np.array([[1.0, 0.0]]), [3])
    with pytest.raises(MemoryBankError):
        bank.enqueue(np.array([[1.0, 0.0]]), [-1])


def test_fifo_matches_reference_deque():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        capacity = int(rng.integers(1, 10))
        bank = MemoryBank(0, capacity, 2, 3)
        ref = deque(maxlen=capacity)
        step = 0
        for _ in range(int(rng.integers(0, 8))):
            b = int(rng.integers(0, capacity + 1))
            keys = unit_rows(rng, b, 2)
            labels = rng.integers(0, 3, size=b)
            bank.enqueue(keys, labels)
            for k, y in zip(keys, labels):
                ref.append((step, int(y), k))
                step += 1
        keys, labels = bank.snapshot()
        assert len(bank) == len(ref) <= capacity
        assert bank.steps().tolist() == [s for s, _, _ in ref]
        assert labels.tolist() == [y for _, y, _ in ref]
        assert all(np.array_equal(k, r[2]) for k, r in zip(keys, ref))


# --- selection / snapshots ---

def test_select_by_label():
    bank = MemoryBank(0, 8, 2, 6)
    k1, k2, k3 = np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([-1.0, 0.0])
    bank.enqueue(np.stack([k1, k2, k3]), [0, 1, 0])
    keys, count = bank.select_by_label(0)
    assert count == 2 and np.array_equal(keys, [k1, k3])
    keys, count = bank.select_by_label(0, positive=False)
    assert count == 1 and np.array_equal(keys, [k2])
    keys, count = bank.select_by_label(5)
    assert count == 0 and keys.shape == (0, 2)


def test_selection_partitions_snapshot():
    bank = filled(capacity=16, counts=(5, 5, 5), seed=3)
    keys, labels = bank.snapshot()
    for c in range(4):
        pos, n_pos = bank.select_by_label(c)
        neg, n_neg = bank.select_by_label(c, positive=False)
        assert n_pos + n_neg == len(bank)
        assert np.array_equal(pos, keys[labels == c])
        assert np.array_equal(neg, keys[labels != c])


def test_empty_snapshot():
    keys, labels = MemoryBank(0, 4, 3, 2).snapshot()
    assert keys.shape == (0, 3) and labels.shape == (0,)


def test_snapshot_is_a_copy():
    bank = filled(capacity=8, counts=(2, 2, 2))
    keys, labels = bank.snapshot()
    assert keys.shape == (6, 3)
    bank.enqueue(unit_rows(np.random.default_rng(4), 2, 3), [1, 1])
    assert keys.shape == (6, 3)
    keys[0] = 0.0
    assert np.linalg.norm(bank.snapshot()[0][0]) == pytest.approx(1.0)


def test_entries_follow_step_order():
    bank = filled(capacity=4, counts=(3, 3))
    entries = list(bank.entries())
    assert [e.step for e in entries] == [2, 3, 4, 5]
