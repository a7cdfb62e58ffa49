"""Desk-scale comparison of distillation arms on Gaussian blobs.

One call trains a teacher, builds its kNN bags, then trains each student
arm from the same seed and reports 10-NN accuracy on the held-out split,
bag distance on the training bags and intra-class distance on held-out rows.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import bagging, metrics
from .dataio import Checkpoint, gen_blobs
from .train import TrainConfig, distill, pretrain_teacher

ARMS = ("no-distill", "intra", "bingo", "student-online", "kd-l2")


@dataclass(frozen=True)
class DeskSetup:
    n: int = 5000
    dim: int = 32
    classes: int = 10
    class_sep: float = 2.5
    noise: float = 1.0
    val_fraction: float = 0.2
    teacher_epochs: int = 60
    teacher_noise_sigma: float = 1.0
    student_epochs: int = 5
    bag_k: int = 10
    knn_k: int = 10
    base: TrainConfig = field(default_factory=lambda: TrainConfig(
        student_hidden=(64,), teacher_hidden=(256, 256), noise_sigma=0.1))

    def teacher_config(self, seed: int) -> TrainConfig:
        return self.base.replace(mode="pretrain-teacher", epochs=self.teacher_epochs, seed=seed,
                                 noise_sigma=self.teacher_noise_sigma)

    def student_config(self, seed: int) -> TrainConfig:
        return self.base.replace(mode="distill", epochs=self.student_epochs, seed=seed, bag_param=self.bag_k)


@dataclass
class ArmResult:
    knn: float
    bagdis: float
    icd: float
    checkpoint: Checkpoint
    seconds: float


@dataclass
class DeskRun:
    seed: int
    teacher: ArmResult
    bag_purity: float
    arms: dict[str, ArmResult]


def _measure(ckpt, train, val, bags, knn_k, seconds):
    tr_emb = bagging.extract_embeddings(ckpt.params, train.X)
    va_emb = bagging.extract_embeddings(ckpt.params, val.X)
    return ArmResult(
        knn=metrics.knn_eval(tr_emb, train.y, va_emb, val.y, knn_k),
        bagdis=metrics.bag_distance_from_embeddings(tr_emb, bags)[0],
        icd=metrics.intra_class_distance(va_emb, val.y),
        checkpoint=ckpt,
        seconds=seconds,
    )


def train_arm(arm: str, cfg: TrainConfig, teacher: Checkpoint, bags, train) -> Checkpoint:
    if arm == "no-distill":
        return pretrain_teacher(cfg.replace(mode="pretrain-teacher"), train, arch="student")
    if arm == "intra":
        return distill(cfg.replace(relation_source="none"), teacher, None, train)
    if arm == "bingo":
        return distill(cfg, teacher, bags, train)
    if arm == "student-online":
        return distill(cfg.replace(relation_source="student-online"), teacher, None, train)
    if arm == "kd-l2":
        return distill(cfg.replace(distill_loss="kd-l2"), teacher, None, train)
    raise ValueError(f"unknown arm {arm!r}")


def run_desk(setup: DeskSetup, seed: int, arms=ARMS) -> DeskRun:
    data = gen_blobs(setup.n, setup.dim, setup.classes, setup.class_sep, setup.noise, seed, setup.val_fraction)
    train, val = data.train(), data.val()
    t0 = time.perf_counter()
    teacher = pretrain_teacher(setup.teacher_config(seed), train)
    t_teacher = time.perf_counter() - t0
    bags = bagging.bag_knn(bagging.extract_embeddings(teacher.params, train.X), setup.bag_k)
    purity = float(np.mean([np.mean(train.y[m] == train.y[a]) for a, m in enumerate(bags.members)]))
    results = {}
    cfg = setup.student_config(seed)
    for arm in arms:
        t0 = time.perf_counter()
        ckpt = train_arm(arm, cfg, teacher, bags, train)
        results[arm] = _measure(ckpt, train, val, bags, setup.knn_k, time.perf_counter() - t0)
    return DeskRun(seed, _measure(teacher, train, val, bags, setup.knn_k, t_teacher), purity, results)


def medians(runs: list[DeskRun], metric: str) -> dict[str, float]:
    """Per-arm median of ``metric`` (``knn``, ``bagdis`` or ``icd``) across runs."""
    return {arm: float(np.median([getattr(r.arms[arm], metric) for r in runs])) for arm in runs[0].arms}
