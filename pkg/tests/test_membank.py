from collections import Counter

import numpy as np
import pytest

from bingo.membank import EmptyBankError, MemoryBank


def keys(*angles):
    return np.array([[np.cos(a), np.sin(a)] for a in angles])


def test_fifo_trace():
    bank = MemoryBank(4, 2)
    a, b, c, d, e, f = keys(0, 1, 2, 3, 4, 5)
    bank.enqueue_batch(np.stack([a, b]))
    bank.enqueue_batch(np.stack([c, d]))
    bank.enqueue_batch(np.stack([e, f]))
    np.testing.assert_array_equal(bank.negatives_view(), np.stack([e, f, c, d]))


def test_exact_capacity_wraps_cursor():
    bank = MemoryBank(4, 2)
    bank.enqueue_batch(keys(0, 1, 2, 3))
    assert bank.filled == 4 and bank.write_cursor == 0


def test_identical_sequences_identical_banks():
    rng = np.random.default_rng(0)
    batches = [keys(*rng.uniform(0, 6, 2)) for _ in range(7)]
    b1, b2 = MemoryBank(6, 2), MemoryBank(6, 2)
    for k in batches:
        b1.enqueue_batch(k)
        b2.enqueue_batch(k)
    assert b1.negatives_view().tobytes() == b2.negatives_view().tobytes()


def test_views_and_snapshots():
    bank = MemoryBank(8, 2)
    with pytest.raises(EmptyBankError):
        bank.negatives_view()
    bank.enqueue_batch(keys(0, 1))
    snap = bank.negatives_view()
    assert snap.shape == (2, 2)
    bank.enqueue_batch(keys(2, 3))
    np.testing.assert_array_equal(snap, keys(0, 1))
    with pytest.raises(ValueError):
        snap[0, 0] = 5.0
    bank.enqueue_batch(keys(4, 5, 6, 7))
    assert len(bank.negatives_view()) == 8


def test_rejects_bad_batches():
    bank = MemoryBank(6, 2)
    with pytest.raises(ValueError):
        bank.enqueue_batch(keys(0, 1, 2, 3))
    with pytest.raises(ValueError):
        bank.enqueue_batch(np.array([[1.0, 1.0], [0.0, 1.0]]))
    fixed = MemoryBank(8, 2, batch_size=4)
    with pytest.raises(ValueError):
        fixed.enqueue_batch(keys(0, 1))
    with pytest.raises(ValueError):
        MemoryBank(10, 2, batch_size=4)


def test_random_init_is_full_unit_and_seeded():
    a = MemoryBank.random_init(16, 3, seed=1)
    b = MemoryBank.random_init(16, 3, seed=1)
    assert a.filled == 16
    np.testing.assert_allclose(np.linalg.norm(a.negatives_view(), axis=1), 1, atol=1e-12)
    assert a.negatives_view().tobytes() == b.negatives_view().tobytes()


def run_fifo_trace(rng, capacity):
    divisors = [d for d in range(1, capacity + 1) if capacity % d == 0]
    bank = MemoryBank(capacity, 3)
    history = []
    while len(history) < capacity or rng.random() < 0.7:
        b = int(rng.choice(divisors))
        v = rng.normal(size=(b, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        bank.enqueue_batch(v)
        history.extend(map(tuple, v))
    got = Counter(map(tuple, bank.negatives_view()))
    return got == Counter(history[-capacity:])


def test_fifo_holds_most_recent_keys():
    rng = np.random.default_rng(7)
    assert all(run_fifo_trace(rng, int(rng.choice([4, 6, 12, 16]))) for _ in range(20))
