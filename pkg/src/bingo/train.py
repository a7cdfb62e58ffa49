"""Training loops: contrastive teacher pretraining and bag-aggregation distillation."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import augment, bagging, losses
from .augment import AugmentationPolicy
from .dataio import Checkpoint, Dataset, fingerprint
from .membank import MemoryBank
from .nets import EncoderParams, EncoderSpec, add_encoder, encoder_forward, init_params, momentum_update
from .tensor import Graph, NonFiniteError, backpropagate

__all__ = [
    "TrainConfig",
    "NumericError",
    "cosine_lr",
    "sgd_momentum_step",
    "pretrain_teacher",
    "distill",
    "config_text",
]

log = logging.getLogger(__name__)

RELATION_SOURCES = ("teacher", "student-online", "none")
TEACHER_MODES = ("pretrained", "momentum-of-student")
DISTILL_LOSSES = ("bingo", "kd-l2", "rkd")


class NumericError(ArithmeticError):
    """Non-finite loss or gradient during training."""

    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    mode: str = "distill"
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    tau: float = 0.2
    bank_capacity: int = 1024
    momentum_m: float = 0.999
    seed: int = 0
    bag_strategy: str = "knn"
    bag_param: int = 5
    relation_source: str = "teacher"
    teacher_params_mode: str = "pretrained"
    rebag_period_epochs: int = 5
    lam_inter: float = 1.0
    distill_loss: str = "bingo"
    noise_sigma: float = 0.1
    mask_prob: float = 0.1
    scale_lo: float = 0.8
    scale_hi: float = 1.2
    student_hidden: tuple[int, ...] = (128,)
    teacher_hidden: tuple[int, ...] = (512, 512)
    proj_hidden: int = 128
    embed_dim: int = 64
    bag_features: str = "embedding"
    log_every: int = 50

    def __post_init__(self):
        self.student_hidden = tuple(int(h) for h in self.student_hidden)
        self.teacher_hidden = tuple(int(h) for h in self.teacher_hidden)
        if self.mode not in ("pretrain-teacher", "distill"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.base_lr <= 0 or self.tau <= 0:
            raise ValueError("base_lr and tau must be positive")
        if self.batch_size < 1 or self.bank_capacity % self.batch_size:
            raise ValueError("batch_size must divide bank_capacity")
        if self.relation_source not in RELATION_SOURCES:
            raise ValueError(f"relation_source must be one of {RELATION_SOURCES}")
        if self.teacher_params_mode not in TEACHER_MODES:
            raise ValueError(f"teacher_params_mode must be one of {TEACHER_MODES}")
        if self.distill_loss not in DISTILL_LOSSES:
            raise ValueError(f"distill_loss must be one of {DISTILL_LOSSES}")
        if self.epochs < 0 or self.rebag_period_epochs < 1:
            raise ValueError("epochs must be >= 0 and rebag_period_epochs >= 1")

    @property
    def policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(self.noise_sigma, self.mask_prob, (self.scale_lo, self.scale_hi), self.seed)

    def encoder_spec(self, input_dim: int, arch: str) -> EncoderSpec:
        hidden = self.teacher_hidden if arch == "teacher" else self.student_hidden
        return EncoderSpec(input_dim, hidden, self.proj_hidden, self.embed_dim)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def config_text(config: TrainConfig) -> str:
    """Flat ``key = value`` rendering, sorted by key."""
    lines = []
    for f in sorted(dataclasses.fields(config), key=lambda f: f.name):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(i) for i in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        return base_lr
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_momentum_step(params, grads, lr, momentum, weight_decay, velocity):
    """``v <- momentum*v + g + wd*theta``; ``theta <- theta - lr*v``.

    Works on parallel lists of arrays; returns new ``(params, velocity)``.
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise ValueError("params, grads and velocity must have equal length")
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch {p.shape}/{g.shape}/{v.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
        v = momentum * v + g + weight_decay * p
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


class _Optimizer:
    def __init__(self, params: EncoderParams, config: TrainConfig, total_steps: int):
        self.params = params
        self.config = config
        self.total = total_steps
        self.velocity = [np.zeros_like(a) for a in params.arrays()]

    def step(self, step: int, grads: list[np.ndarray]) -> float:
        lr = cosine_lr(step, self.total, self.config.base_lr)
        try:
            flat, self.velocity = sgd_momentum_step(self.params.arrays(), grads, lr, self.config.sgd_momentum,
                                                    self.config.weight_decay, self.velocity)
        except FloatingPointError:
            raise NumericError(step, "non-finite gradient") from None
        layers = [(flat[2 * i], flat[2 * i + 1]) for i in range(len(self.params.layers))]
        self.params = EncoderParams(self.params.spec, layers, self.params.role)
        return lr


def _grads(loss: losses.StepLoss | tuple, param_nodes, vals, graph, loss_node):
    g = backpropagate(graph, vals, loss_node)
    return [g[i] for pair in param_nodes for i in pair]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start:start + batch_size]


def _evaluate(sl, step):
    vals = sl.evaluate()
    value = sl.value()
    _check_loss(value, step)
    return vals, value


def _check_loss(value, step):
    if not np.isfinite(value):
        raise NumericError(step, f"non-finite loss {value}")


def _checkpoint(params, config, role, steps, data_n, mode):
    meta = {"mode": mode, "steps": str(steps), "epochs": str(config.epochs), "seed": str(config.seed),
            "n_train": str(data_n)}
    return Checkpoint(params.copy(role=role), fingerprint(config_text(config)), meta)


def _record(history, on_step, config, step, entry):
    if history is not None:
        history.append(entry)
    if on_step is not None and (step % config.log_every == 0):
        on_step(entry)


def pretrain_teacher(config: TrainConfig, data: Dataset, arch: str = "teacher",
                     history: list | None = None, on_step: Callable | None = None) -> Checkpoint:
    """Contrastive pretraining with an online encoder and a momentum key encoder.

    Each instance yields two views; the online encoder embeds the first,
    the momentum encoder the second, and the keys then enter the FIFO bank.
    ``arch="student"`` trains the small architecture without a teacher.
    """
    X = data.X
    n = len(X)
    spec = config.encoder_spec(data.input_dim, arch)
    role = "teacher" if arch == "teacher" else "student"
    online = init_params(spec, config.seed, role)
    key_enc = online.copy(role="momentum-key")
    bank = MemoryBank.random_init(config.bank_capacity, spec.embed_dim, config.seed + 1, config.batch_size)
    steps_per_epoch = n // config.batch_size
    total = config.epochs * steps_per_epoch
    opt = _Optimizer(online, config, total)
    policy = config.policy
    rng = np.random.default_rng([config.seed, 11])
    step = 0
    try:
        for epoch in range(config.epochs):
            for idx in _batches(n, config.batch_size, rng):
                xb = X[idx]
                keys = encoder_forward(key_enc, augment.augment_batch(xb, idx, policy, step, augment.T2))
                sl = losses.intra_loss(opt.params, None, xb, policy, bank.negatives_view(), config.tau, step,
                                       anchors=idx, keys=keys)
                vals, value = _evaluate(sl, step)
                grads = _grads(sl, sl.params, vals, sl.graph, sl.loss)
                lr = opt.step(step, grads)
                key_enc = momentum_update(opt.params, key_enc, config.momentum_m)
                bank.enqueue_batch(keys)
                _record(history, on_step, config, step,
                        {"step": step, "epoch": epoch, "lr": lr, "loss": value, "loss_intra": value, "loss_inter": 0.0})
                step += 1
    except NonFiniteError as exc:
        raise NumericError(step, str(exc)) from exc
    return _checkpoint(opt.params, config, role, step, n, f"pretrain-{arch}")


def _bags_for(params, X, config):
    emb = bagging.extract_embeddings(params, X, output=config.bag_features)
    if config.bag_strategy == "knn":
        return bagging.bag_knn(emb, config.bag_param)
    if config.bag_strategy == "kmeans":
        return bagging.bag_kmeans(emb, config.bag_param, seed=config.seed)[1]
    raise ValueError(f"online bagging does not support strategy {config.bag_strategy!r}")


def _kd_step(config, student, teacher, xb, idx, policy, step):
    view = augment.augment_batch(xb, idx, policy, step, augment.T1)
    target = encoder_forward(teacher, view)
    g, feed = Graph(), {}
    xi = g.input(view.shape, name="student/x")
    feed[xi] = view
    enc = add_encoder(g, feed, student, xi, "student")
    if config.distill_loss == "kd-l2":
        loss = losses.add_kd_l2(g, feed, enc.output, target)
    else:
        loss = losses.add_rkd_graph(g, feed, enc.output, target)
    keys = encoder_forward(teacher, augment.augment_batch(xb, idx, policy, step, augment.T2))
    sl = losses.StepLoss(g, feed, loss, enc.params, keys, {config.distill_loss: loss})
    return sl


def distill(config: TrainConfig, teacher_ckpt: Checkpoint | None, bags: bagging.BagTable | None, data: Dataset,
            history: list | None = None, on_step: Callable | None = None) -> Checkpoint:
    """Train a student against a frozen (or momentum) teacher.

    Per step: sample one positive per anchor from its bag, build
    ``L_intra + lam_inter * L_inter``, update the student with SGD, then push
    the teacher keys ``f_T(t2(x_a))`` into the bank.

    Ablation switches: ``relation_source="none"`` forces ``lam_inter=0``;
    ``"student-online"`` rebuilds bags from the current student every
    ``rebag_period_epochs``; ``teacher_params_mode="momentum-of-student"``
    replaces the teacher by an EMA copy of the student.
    """
    X = data.X
    n = len(X)
    lam = 0.0 if config.relation_source == "none" else config.lam_inter
    spec = config.encoder_spec(data.input_dim, "student")
    student = init_params(spec, config.seed, "student")
    if config.teacher_params_mode == "pretrained":
        if teacher_ckpt is None:
            raise ValueError("pretrained teacher mode needs a teacher checkpoint")
        teacher = teacher_ckpt.params
        if teacher.spec.input_dim != data.input_dim or teacher.spec.embed_dim != spec.embed_dim:
            raise ValueError("teacher checkpoint does not match data width or embedding size")
    else:
        teacher = student.copy(role="momentum-key")
    if config.relation_source == "teacher" and lam != 0 and config.distill_loss == "bingo":
        if bags is None or len(bags) != n:
            raise ValueError(f"bag table covers {0 if bags is None else len(bags)} anchors, data has {n}")
    bank = MemoryBank.random_init(config.bank_capacity, spec.embed_dim, config.seed + 1, config.batch_size)
    steps_per_epoch = n // config.batch_size
    total = config.epochs * steps_per_epoch
    opt = _Optimizer(student, config, total)
    policy = config.policy
    rng = np.random.default_rng([config.seed, 11])
    pos_rng = np.random.default_rng([config.seed, 13])
    step = 0
    try:
        for epoch in range(config.epochs):
            if lam != 0 and config.relation_source == "student-online" and epoch % config.rebag_period_epochs == 0:
                bags = _bags_for(opt.params, X, config)
            for idx in _batches(n, config.batch_size, rng):
                xb = X[idx]
                if config.distill_loss == "bingo":
                    if lam != 0:
                        pos, _ = bagging.sample_positives(bags, idx, pos_rng)
                    else:
                        pos = idx
                    sl = losses.bingo_step_loss(opt.params, teacher, xb, X[pos], policy, bank.negatives_view(),
                                                config.tau, step, lam, anchors=idx, positives=pos)
                else:
                    sl = _kd_step(config, opt.params, teacher, xb, idx, policy, step)
                vals, value = _evaluate(sl, step)
                grads = _grads(sl, sl.params, vals, sl.graph, sl.loss)
                lr = opt.step(step, grads)
                if config.teacher_params_mode == "momentum-of-student":
                    teacher = momentum_update(opt.params, teacher, config.momentum_m)
                bank.enqueue_batch(sl.keys)
                entry = {"step": step, "epoch": epoch, "lr": lr, "loss": value,
                         "loss_intra": sl.value("intra") if "intra" in sl.parts else value,
                         "loss_inter": sl.value("inter") if "inter" in sl.parts else 0.0}
                _record(history, on_step, config, step, entry)
                step += 1
    except NonFiniteError as exc:
        raise NumericError(step, str(exc)) from exc
    return _checkpoint(opt.params, config, "student", step, n, "distill")
