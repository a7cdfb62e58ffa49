import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bingo.bagging import BagTable, bag_knn
from bingo.dataio import gen_blobs
from bingo.metrics import (
    FinetuneConfig,
    ProbeConfig,
    bag_distance_from_embeddings,
    finetune_fraction,
    intra_class_distance,
    knn_eval,
    knn_predict,
    linear_probe,
    stratified_subset,
)
from bingo.nets import EncoderSpec


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def brute_force_knn_predict(train, labels, test, k):
    """Per test row: stable sort by (-cos, index), vote, smallest label wins ties."""
    out = []
    for row in test:
        sims = [float(row @ t) for t in train]
        ranked = sorted(range(len(train)), key=lambda i: (-sims[i], i))[:k]
        counts = {}
        for i in ranked:
            counts[int(labels[i])] = counts.get(int(labels[i]), 0) + 1
        best = max(counts.values())
        out.append(min(c for c, v in counts.items() if v == best))
    return np.array(out)


def test_knn_self_is_nearest():
    rng = np.random.default_rng(0)
    emb = unit_rows(rng, 50, 4)
    labels = rng.integers(0, 3, 50)
    assert knn_eval(emb, labels, emb, labels, 1) == 1.0


def test_knn_orthogonal_classes():
    train = np.eye(2)
    assert knn_predict(train, [0, 1], train[:1], 1).tolist() == [0]


def test_knn_chance_level():
    rng = np.random.default_rng(1)
    emb = unit_rows(rng, 2000, 16)
    labels = np.arange(2000) % 10
    test = unit_rows(rng, 2000, 16)
    acc = knn_eval(emb, labels, test, rng.permutation(labels), 10)
    assert abs(acc - 0.1) <= 0.03


def test_knn_matches_brute_force():
    rng = np.random.default_rng(2)
    train = unit_rows(rng, 300, 3)
    train[rng.integers(0, 300, 40)] = train[rng.integers(0, 300, 40)]
    labels = rng.integers(0, 4, 300)
    test = np.concatenate([unit_rows(rng, 60, 3), train[:20]])
    for k in (1, 4, 10):
        np.testing.assert_array_equal(knn_predict(train, labels, test, k, chunk=17),
                                      brute_force_knn_predict(train, labels, test, k))


def test_knn_errors():
    with pytest.raises(ValueError):
        knn_eval(np.eye(3), [0, 1], np.eye(3), [0, 1, 2])
    with pytest.raises(ValueError):
        knn_eval(np.eye(3), [0, 1, 2], np.eye(3), [0, 1])
    with pytest.raises(ValueError):
        knn_predict(np.eye(3), [0, 1, 2], np.eye(3), 4)


def test_probe_separable():
    rng = np.random.default_rng(3)
    x = unit_rows(rng, 200, 5)
    y = (x[:, 0] > 0).astype(int)
    # keep a margin so a linear separator exists with room to spare
    keep = np.abs(x[:, 0]) > 0.2
    assert linear_probe(x[keep], y[keep], x[keep], y[keep], ProbeConfig(epochs=200)) == 1.0


def test_probe_shuffled_labels_is_chance():
    rng = np.random.default_rng(4)
    x = unit_rows(rng, 2000, 8)
    y = rng.integers(0, 2, 2000)
    test = unit_rows(rng, 2000, 8)
    test_y = rng.integers(0, 2, 2000)
    acc = linear_probe(x, y, test, test_y, ProbeConfig(epochs=20))
    # binomial(2000, 1/2) std is ~0.011
    assert abs(acc - 0.5) <= 3 * np.sqrt(0.25 / 2000)


def test_probe_zero_features_gives_majority():
    y = np.array([0] * 70 + [1] * 30)
    acc = linear_probe(np.zeros((100, 4)), y, np.zeros((100, 4)), y, ProbeConfig(epochs=50))
    assert acc == 0.7


def test_probe_single_class_errors():
    with pytest.raises(ValueError):
        linear_probe(np.eye(3), [1, 1, 1], np.eye(3), [1, 1, 1])


def test_stratified_subset():
    labels = np.repeat([0, 1, 2], [100, 50, 20])
    idx = stratified_subset(labels, 0.1, seed=3)
    assert np.bincount(labels[idx]).tolist() == [10, 5, 2]
    np.testing.assert_array_equal(idx, stratified_subset(labels, 0.1, seed=3))
    with pytest.raises(ValueError, match=r"\[2\]"):
        stratified_subset(labels, 0.04, seed=0)


def test_finetune_full_fraction_and_determinism():
    data = gen_blobs(400, 8, 4, class_sep=4.0, seed=0, val_fraction=0.25)
    spec = EncoderSpec(8, (16,), 16, 8)
    cfg = FinetuneConfig(epochs=5)
    a = finetune_fraction(None, data, 1.0, cfg, spec=spec)
    b = finetune_fraction(None, data, 1.0, cfg, spec=spec)
    assert a == b and a > 0.5
    with pytest.raises(ValueError):
        finetune_fraction(None, data, 0.001, cfg, spec=spec)
    with pytest.raises(ValueError):
        finetune_fraction(None, data, 0.5, cfg)


def test_bag_distance_cases():
    bags = BagTable("knn", 1, [[0, 1], [0, 1]])
    assert bag_distance_from_embeddings(np.eye(2), bags) == (pytest.approx(2.0), 0)
    same = np.tile([[0.6, 0.8]], (2, 1))
    assert bag_distance_from_embeddings(same, bags)[0] == 0
    mixed = BagTable("labels", 0, [[0, 1], [0, 1], [2]])
    assert bag_distance_from_embeddings(np.eye(3), mixed) == (pytest.approx(2.0), 1)
    with pytest.raises(ValueError):
        bag_distance_from_embeddings(np.eye(2), BagTable("labels", 0, [[0], [1]]))


def test_bag_distance_rotation_invariant():
    rng = np.random.default_rng(5)
    emb = unit_rows(rng, 100, 6)
    bags = bag_knn(emb, 4)
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    a = bag_distance_from_embeddings(emb, bags)[0]
    b = bag_distance_from_embeddings(emb @ q, bags)[0]
    assert abs(a - b) <= 1e-10


def test_intra_class_distance_cases():
    assert intra_class_distance(np.array([[1.0, 0.0], [-1.0, 0.0]]), [0, 0]) == pytest.approx(4.0)
    assert intra_class_distance(np.ones((5, 3)) / np.sqrt(3), [1] * 5) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        intra_class_distance(np.eye(3), [0, 1, 2])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 25))
def test_intra_class_distance_matches_pairwise(seed, n):
    rng = np.random.default_rng(seed)
    emb = unit_rows(rng, n, 3)
    labels = rng.integers(0, 3, n)
    pairs = [((emb[i] - emb[j]) ** 2).sum() for i in range(n) for j in range(i + 1, n) if labels[i] == labels[j]]
    if not pairs:
        return
    assert intra_class_distance(emb, labels) == pytest.approx(np.mean(pairs), abs=1e-12)
    perm = rng.permutation(n)
    assert intra_class_distance(emb[perm], labels[perm]) == pytest.approx(np.mean(pairs), abs=1e-12)
