"""Distillation objectives built as compute-graph nodes.

Graph builders take ``(g, feed, ...)``: nodes are appended to ``g`` and the
values of any constant inputs they create are stored in ``feed``. Teacher
keys and bank negatives always enter as constants, so no gradient reaches
the teacher.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import augment
from .augment import AugmentationPolicy
from .nets import DegenerateRowError, EncoderParams, add_encoder, encoder_forward
from .tensor import Graph, Values, evaluate

__all__ = [
    "add_info_nce",
    "info_nce",
    "teacher_keys",
    "StepLoss",
    "intra_loss",
    "inter_loss",
    "bingo_step_loss",
    "add_kd_l2",
    "kd_l2",
    "add_rkd_graph",
    "rkd_graph",
]


def add_info_nce(g: Graph, feed: dict, q: int, k_pos, negatives, tau: float, prefix: str = "nce") -> int:
    """Mean over query rows of the InfoNCE loss with a constant key set.

    The softmax runs over the positive logit followed by one logit per
    negative, all divided by ``tau``.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.ndim != 2 or len(negatives) == 0:
        raise ValueError("info_nce needs at least one negative key")
    k_pos = np.atleast_2d(np.asarray(k_pos, dtype=np.float64))
    kp = g.input(k_pos.shape, name=f"{prefix}/k_pos")
    kn = g.input(negatives.T.shape, name=f"{prefix}/negatives_t")
    feed[kp] = k_pos
    feed[kn] = np.ascontiguousarray(negatives.T)
    pos = g.dot_rows(q, kp)
    neg = g.matmul(q, kn)
    logits = g.scale(g.concat_rows([pos, neg], axis=1), 1.0 / tau, name=f"{prefix}/logits")
    rows = g.nodes[q].shape[0]
    return g.log_softmax_nll(logits, np.zeros(rows, dtype=np.int64), name=f"{prefix}/loss")


def info_nce(q, k_pos, negatives, tau: float) -> float:
    """Numeric InfoNCE for constant queries (mean over rows)."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    g, feed = Graph(), {}
    qi = g.input(q.shape, name="q")
    feed[qi] = q
    loss = add_info_nce(g, feed, qi, k_pos, negatives, tau)
    return float(evaluate(g, feed)[loss][0, 0])


def teacher_keys(teacher: EncoderParams, x_a, anchors, policy: AugmentationPolicy, step: int) -> np.ndarray:
    """Constant keys ``f_T(t2(x_a))``, shared by the intra and inter terms."""
    return encoder_forward(teacher, augment.augment_batch(x_a, anchors, policy, step, augment.T2))


@dataclass
class StepLoss:
    """A built loss graph plus the bookkeeping needed to train on it."""

    graph: Graph
    feed: dict
    loss: int
    params: list[tuple[int, int]]
    keys: np.ndarray
    parts: dict[str, int] = field(default_factory=dict)
    values: Values | None = None

    def evaluate(self) -> Values:
        vals = evaluate(self.graph, self.feed)
        for nid, rows in vals.degenerate.items():
            raise DegenerateRowError(f"{self.graph.nodes[nid].name}: degenerate rows {rows.tolist()}")
        self.values = vals
        return vals

    def value(self, part: str | None = None) -> float:
        if self.values is None:
            self.evaluate()
        return float(self.values[self.loss if part is None else self.parts[part]][0, 0])


def _as_batch(x):
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def _indices(idx, n):
    return np.arange(n) if idx is None else np.asarray(idx, dtype=np.int64).reshape(-1)


def _student_query(g, feed, student, x, idx, policy, step, draw, prefix, shared=None):
    view = augment.augment_batch(x, idx, policy, step, draw)
    xi = g.input(view.shape, name=f"{prefix}/x")
    feed[xi] = view
    return add_encoder(g, feed, student, xi, prefix, trainable=True, shared=shared)


def intra_loss(student, teacher, x_a, policy, negatives, tau, step, anchors=None, keys=None) -> StepLoss:
    """InfoNCE of ``f_S(t1(x_a))`` against ``f_T(t2(x_a))``."""
    x_a = _as_batch(x_a)
    anchors = _indices(anchors, len(x_a))
    if keys is None:
        keys = teacher_keys(teacher, x_a, anchors, policy, step)
    g, feed = Graph(), {}
    enc = _student_query(g, feed, student, x_a, anchors, policy, step, augment.T1, "student/a")
    loss = add_info_nce(g, feed, enc.output, keys, negatives, tau, prefix="intra")
    return StepLoss(g, feed, loss, enc.params, keys, {"intra": loss})


def inter_loss(student, teacher, x_p, x_a, policy, negatives, tau, step,
               positives=None, anchors=None, keys=None) -> StepLoss:
    """InfoNCE of ``f_S(t3(x_p))`` against the anchor key ``f_T(t2(x_a))``."""
    x_a, x_p = _as_batch(x_a), _as_batch(x_p)
    anchors = _indices(anchors, len(x_a))
    positives = _indices(positives, len(x_p))
    if keys is None:
        keys = teacher_keys(teacher, x_a, anchors, policy, step)
    g, feed = Graph(), {}
    enc = _student_query(g, feed, student, x_p, positives, policy, step, augment.T3, "student/p")
    loss = add_info_nce(g, feed, enc.output, keys, negatives, tau, prefix="inter")
    return StepLoss(g, feed, loss, enc.params, keys, {"inter": loss})


def bingo_step_loss(student, teacher, x_a, x_p, policy, negatives, tau, step, lam_inter=1.0,
                    anchors=None, positives=None, keys=None) -> StepLoss:
    """``L_intra + lam_inter * L_inter`` over one batch of anchors and positives.

    Both student passes share one set of weight nodes; with
    ``lam_inter == 0`` the positive pass is left out of the graph entirely.
    """
    x_a, x_p = _as_batch(x_a), _as_batch(x_p)
    anchors = _indices(anchors, len(x_a))
    positives = _indices(positives, len(x_p))
    if keys is None:
        keys = teacher_keys(teacher, x_a, anchors, policy, step)
    g, feed = Graph(), {}
    enc_a = _student_query(g, feed, student, x_a, anchors, policy, step, augment.T1, "student/a")
    intra = add_info_nce(g, feed, enc_a.output, keys, negatives, tau, prefix="intra")
    parts = {"intra": intra}
    if lam_inter == 0:
        return StepLoss(g, feed, intra, enc_a.params, keys, parts)
    enc_p = _student_query(g, feed, student, x_p, positives, policy, step, augment.T3, "student/p",
                           shared=enc_a.params)
    inter = add_info_nce(g, feed, enc_p.output, keys, negatives, tau, prefix="inter")
    parts["inter"] = inter
    total = g.add(intra, inter if lam_inter == 1 else g.scale(inter, lam_inter), name="bingo/loss")
    return StepLoss(g, feed, total, enc_a.params, keys, parts)


def add_kd_l2(g: Graph, feed: dict, s: int, t_emb) -> int:
    """Mean squared L2 distance between student rows and constant teacher rows."""
    t_emb = np.atleast_2d(np.asarray(t_emb, dtype=np.float64))
    if g.nodes[s].shape != t_emb.shape:
        raise ValueError(f"student {g.nodes[s].shape} and teacher {t_emb.shape} shapes differ")
    ti = g.input(t_emb.shape, name="kd/teacher")
    feed[ti] = -t_emb
    diff = g.add(s, ti)
    return g.scale(g.sum(g.mul(diff, diff)), 1.0 / t_emb.shape[0], name="kd/loss")


def kd_l2(student_emb, teacher_emb) -> float:
    s = np.atleast_2d(np.asarray(student_emb, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher_emb, dtype=np.float64))
    if s.shape != t.shape:
        raise ValueError(f"shapes {s.shape} and {t.shape} differ")
    return float(((s - t) ** 2).sum() / len(s))


def _off_diagonal_mask(b):
    return 1.0 - np.eye(b)


def add_rkd_graph(g: Graph, feed: dict, s: int, t_emb) -> int:
    """Mean squared difference of off-diagonal cosine similarities."""
    t_emb = np.atleast_2d(np.asarray(t_emb, dtype=np.float64))
    b = t_emb.shape[0]
    if b < 2:
        raise ValueError("relation loss needs at least two rows")
    if g.nodes[s].shape != t_emb.shape:
        raise ValueError(f"student {g.nodes[s].shape} and teacher {t_emb.shape} shapes differ")
    gram = g.matmul(s, g.transpose(s))
    ti = g.input((b, b), name="rkd/teacher_gram")
    mask = g.input((b, b), name="rkd/mask")
    feed[ti] = -(t_emb @ t_emb.T)
    feed[mask] = _off_diagonal_mask(b)
    diff = g.mul(g.add(gram, ti), mask)
    return g.scale(g.sum(g.mul(diff, diff)), 1.0 / (b * (b - 1)), name="rkd/loss")


def rkd_graph(student_batch, teacher_batch) -> float:
    s = np.atleast_2d(np.asarray(student_batch, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher_batch, dtype=np.float64))
    if s.shape[0] < 2:
        raise ValueError("relation loss needs at least two rows")
    if s.shape[0] != t.shape[0]:
        raise ValueError("student and teacher batches differ in size")
    b = len(s)
    d = (s @ s.T - t @ t.T) * _off_diagonal_mask(b)
    return float((d ** 2).sum() / (b * (b - 1)))
