"""Stochastic views of feature rows: additive noise, coordinate masking, scaling.

Randomness is counter based: every draw is a pure hash of
``(seed, instance, step, draw_id, stream, coordinate)``, so any view can be
regenerated in isolation and batching order never changes results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["AugmentationPolicy", "IDENTITY", "sample_view", "augment_batch", "sample_three_views"]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# per-draw streams
_NOISE_A, _NOISE_B, _MASK, _SCALE = 1, 2, 3, 4

# draw ids of the three operators applied per training step
T1, T2, T3 = 0, 1, 2


def _mix(z):
    # splitmix64 finalizer; uint64 arithmetic wraps mod 2**64
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _uniform(*fields):
    """Uniform [0, 1) values hashed from broadcastable integer fields."""
    h = np.zeros((), dtype=np.uint64)
    for f in fields:
        f = np.asarray(f).astype(np.uint64)
        with np.errstate(over="ignore"):
            f = f + _GOLDEN
        h = _mix(h ^ f)
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53


@dataclass(frozen=True)
class AugmentationPolicy:
    noise_sigma: float = 0.1
    mask_prob: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.2)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in [0, 1]")
        if not 0 < lo <= hi:
            raise ValueError("scale_range needs 0 < lo <= hi")
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))

    @property
    def is_identity(self) -> bool:
        return self.noise_sigma == 0 and self.mask_prob == 0 and self.scale_range == (1.0, 1.0)


IDENTITY = AugmentationPolicy(0.0, 0.0, (1.0, 1.0))


def augment_batch(x: np.ndarray, instances, policy: AugmentationPolicy, step: int, draw_id: int) -> np.ndarray:
    """Apply one draw of the policy to each row of ``x``.

    ``instances`` gives the dataset index of each row; it keys the random
    stream together with ``step`` and ``draw_id``.
    """
    x = np.asarray(x, dtype=np.float64)
    if policy.is_identity:
        return x.copy()
    inst = np.asarray(instances, dtype=np.int64).reshape(-1, 1)
    coords = np.arange(x.shape[1]).reshape(1, -1)
    key = (policy.seed, inst, step, draw_id)
    out = x
    if policy.noise_sigma > 0:
        u1 = 1.0 - _uniform(*key, _NOISE_A, coords)
        u2 = _uniform(*key, _NOISE_B, coords)
        eps = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        out = out + policy.noise_sigma * eps
    lo, hi = policy.scale_range
    if hi > lo:
        out = out * (lo + (hi - lo) * _uniform(*key, _SCALE, 0))
    elif lo != 1.0:
        out = out * lo
    if policy.mask_prob > 0:
        out = np.where(_uniform(*key, _MASK, coords) < policy.mask_prob, 0.0, out)
    return np.array(out, dtype=np.float64)


def sample_view(x, policy: AugmentationPolicy, draw_id: int, instance: int = 0, step: int = 0) -> np.ndarray:
    """One augmented copy of a single feature row."""
    x = np.asarray(x, dtype=np.float64)
    return augment_batch(x.reshape(1, -1), [instance], policy, step, draw_id).reshape(x.shape)


def sample_three_views(x_anchor, x_positive, policy: AugmentationPolicy, step: int,
                       anchor_index: int = 0, positive_index: int = 0):
    """``(t1(x_a), t2(x_a), t3(x_p))`` for one training step."""
    return (
        sample_view(x_anchor, policy, T1, anchor_index, step),
        sample_view(x_anchor, policy, T2, anchor_index, step),
        sample_view(x_positive, policy, T3, positive_index, step),
    )
