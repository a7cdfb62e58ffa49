"""Representation quality metrics on frozen or fine-tuned encoders."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .bagging import BagTable, _top_k_rows, extract_embeddings
from .dataio import Dataset
from .nets import EncoderParams, add_encoder, encoder_forward, init_params
from .tensor import Graph, backpropagate, evaluate
from .train import cosine_lr, sgd_momentum_step

__all__ = [
    "knn_predict",
    "knn_eval",
    "ProbeConfig",
    "linear_probe",
    "FinetuneConfig",
    "stratified_subset",
    "finetune_fraction",
    "bag_distance",
    "bag_distance_from_embeddings",
    "intra_class_distance",
]

log = logging.getLogger(__name__)


def knn_predict(train_emb, train_labels, test_emb, k=10, chunk=512) -> np.ndarray:
    """Majority label among the ``k`` most cosine-similar training rows.

    Neighbor ties go to the lower training index, vote ties to the smaller
    label.
    """
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if len(train_emb) != len(train_labels):
        raise ValueError("train embeddings and labels differ in length")
    if not 1 <= k <= len(train_emb):
        raise ValueError(f"k={k} must lie in [1, {len(train_emb)}]")
    n_labels = int(train_labels.max()) + 1
    preds = np.empty(len(test_emb), dtype=np.int64)
    for start in range(0, len(test_emb), chunk):
        sims = test_emb[start:start + chunk] @ train_emb.T
        top = _top_k_rows(sims, k)
        votes = np.zeros((len(top), n_labels), dtype=np.int64)
        np.add.at(votes, (np.arange(len(top))[:, None], train_labels[top]), 1)
        preds[start:start + len(top)] = votes.argmax(axis=1)
    return preds


def knn_eval(train_emb, train_labels, test_emb, test_labels, k=10) -> float:
    test_labels = np.asarray(test_labels)
    if len(test_emb) != len(test_labels):
        raise ValueError("test embeddings and labels differ in length")
    return float(np.mean(knn_predict(train_emb, train_labels, test_emb, k) == test_labels))


@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 1.0
    batch_size: int = 256
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0


def _linear_graph(x, y, w, b):
    g, feed = Graph(), {}
    xi = g.input(x.shape, name="x")
    ones = g.input((len(x), 1), name="ones")
    wi = g.input(w.shape, name="W", requires_grad=True)
    bi = g.input(b.shape, name="b", requires_grad=True)
    feed.update({xi: x, ones: np.ones((len(x), 1)), wi: w, bi: b})
    logits = g.add(g.matmul(xi, wi), g.matmul(ones, bi))
    loss = g.log_softmax_nll(logits, y)
    return g, feed, loss, (wi, bi)


def linear_probe(train_emb, train_labels, test_emb, test_labels, config: ProbeConfig | None = None) -> float:
    """Softmax regression on frozen features; returns test accuracy."""
    config = config or ProbeConfig()
    x = np.asarray(train_emb, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("linear probe needs at least two classes")
    n_cls = int(max(y.max(), np.max(test_labels))) + 1
    rng = np.random.default_rng(config.seed)
    w = np.zeros((x.shape[1], n_cls))
    b = np.zeros((1, n_cls))
    vel = [np.zeros_like(w), np.zeros_like(b)]
    steps_per_epoch = max(1, -(-len(x) // config.batch_size))
    total = config.epochs * steps_per_epoch
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            g, feed, loss, (wi, bi) = _linear_graph(x[idx], y[idx], w, b)
            grads = backpropagate(g, evaluate(g, feed), loss)
            lr = cosine_lr(step, total, config.lr)
            (w, b), vel = sgd_momentum_step([w, b], [grads[wi], grads[bi]], lr, config.momentum,
                                            config.weight_decay, vel)
            step += 1
    pred = np.argmax(np.asarray(test_emb) @ w + b, axis=1)
    return float(np.mean(pred == np.asarray(test_labels)))


@dataclass
class FinetuneConfig:
    epochs: int = 60
    lr: float = 0.01
    head_lr_mult: float = 10.0
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0


def stratified_subset(labels, fraction, seed) -> np.ndarray:
    """Seeded per-class sample of ``floor(fraction * class_size)`` indices."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    picked, uncovered = [], []
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        take = int(np.floor(fraction * len(rows) + 1e-9))
        if take == 0:
            uncovered.append(int(c))
            continue
        picked.append(np.sort(rng.choice(rows, size=take, replace=False)))
    if uncovered:
        raise ValueError(f"label fraction {fraction} leaves classes {uncovered} without examples")
    return np.sort(np.concatenate(picked))


def finetune_fraction(student: EncoderParams | None, data: Dataset, label_fraction: float,
                      config: FinetuneConfig | None = None, spec=None) -> float:
    """Fine-tune backbone plus a fresh linear head on a labeled subset.

    The head replaces the projection head and reads backbone features; its
    learning rate is ``head_lr_mult`` times the backbone's. ``student=None``
    starts from random weights of ``spec``. Accuracy is measured on the
    ``val`` split.
    """
    config = config or FinetuneConfig()
    train, test = data.train(), data.val()
    if train.y is None or test.n == 0:
        raise ValueError("fine-tuning needs labels and a val split")
    idx = stratified_subset(train.y, label_fraction, config.seed)
    x, y = train.X[idx], train.y[idx]
    n_cls = int(data.y.max()) + 1
    if student is None:
        if spec is None:
            raise ValueError("random-init fine-tuning needs an encoder spec")
        student = init_params(spec, config.seed)
    params = student.copy()
    n_back = params.n_backbone()
    feat_dim = params.layers[n_back - 1][0].shape[1] if n_back else params.spec.input_dim
    rng = np.random.default_rng([config.seed, 17])
    s = np.sqrt(6.0 / (feat_dim + n_cls))
    head = [rng.uniform(-s, s, (feat_dim, n_cls)), np.zeros((1, n_cls))]
    backbone = [a for layer in params.layers[:n_back] for a in layer]
    vel_b = [np.zeros_like(a) for a in backbone]
    vel_h = [np.zeros_like(a) for a in head]
    total = config.epochs * max(1, -(-len(x) // config.batch_size))
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            bi = order[start:start + config.batch_size]
            g, feed = Graph(), {}
            xi = g.input((len(bi), x.shape[1]), name="x")
            feed[xi] = x[bi]
            enc = add_encoder(g, feed, params, xi, "enc")
            wi = g.input(head[0].shape, name="head/W", requires_grad=True)
            hb = g.input(head[1].shape, name="head/b", requires_grad=True)
            ones = g.input((len(bi), 1), name="head/ones")
            feed.update({wi: head[0], hb: head[1], ones: np.ones((len(bi), 1))})
            logits = g.add(g.matmul(enc.backbone, wi), g.matmul(ones, hb))
            loss = g.log_softmax_nll(logits, y[bi])
            grads = backpropagate(g, evaluate(g, feed), loss)
            lr = cosine_lr(step, total, config.lr)
            if n_back:
                bnodes = [i for pair in enc.params[:n_back] for i in pair]
                backbone, vel_b = sgd_momentum_step(backbone, [grads[i] for i in bnodes], lr, config.momentum,
                                                    config.weight_decay, vel_b)
                layers = [(backbone[2 * i], backbone[2 * i + 1]) for i in range(n_back)] + params.layers[n_back:]
                params = EncoderParams(params.spec, layers, params.role)
            head, vel_h = sgd_momentum_step(head, [grads[wi], grads[hb]], lr * config.head_lr_mult,
                                            config.momentum, config.weight_decay, vel_h)
            step += 1
    feats = _backbone_features(params, test.X)
    pred = np.argmax(feats @ head[0] + head[1], axis=1)
    return float(np.mean(pred == test.y))


def _backbone_features(params: EncoderParams, X) -> np.ndarray:
    g, feed = Graph(), {}
    xi = g.input(X.shape, name="x")
    feed[xi] = X
    enc = add_encoder(g, feed, params, xi, "enc", trainable=False)
    return evaluate(g, feed)[enc.backbone]


def bag_distance_from_embeddings(emb, bags: BagTable) -> tuple[float, int]:
    """Mean over anchors of the mean squared distance to their bag-mates.

    Returns ``(value, skipped)`` where ``skipped`` counts singleton bags.
    """
    emb = np.asarray(emb, dtype=np.float64)
    if len(emb) != len(bags):
        raise ValueError(f"{len(emb)} embeddings for {len(bags)} bags")
    offsets, flat = bags.others()
    counts = np.diff(offsets)
    keep = counts > 0
    if not keep.any():
        raise ValueError("every bag is a singleton; bag distance is undefined")
    anchors = np.repeat(np.arange(len(bags)), counts)
    d = ((emb[anchors] - emb[flat]) ** 2).sum(axis=1)
    per_anchor = np.add.reduceat(d, offsets[:-1][keep]) / counts[keep]
    return float(per_anchor.mean()), int((~keep).sum())


def bag_distance(params: EncoderParams, bags: BagTable, X) -> float:
    """Bag compactness of an encoder on un-augmented inputs."""
    value, skipped = bag_distance_from_embeddings(extract_embeddings(params, X), bags)
    if skipped:
        log.info("bag_distance skipped %d singleton bags", skipped)
    return value


def intra_class_distance(emb, labels) -> float:
    """Mean squared distance over unordered same-label pairs."""
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    total, pairs = 0.0, 0
    for c in np.unique(labels):
        rows = emb[labels == c]
        m = len(rows)
        if m < 2:
            continue
        s = rows.sum(axis=0)
        total += m * float((rows * rows).sum()) - float(s @ s)
        pairs += m * (m - 1) // 2
    if pairs == 0:
        raise ValueError("no same-label pair to measure")
    return total / pairs
