"""Fixed-capacity FIFO queue of unit-norm negative keys."""

from __future__ import annotations

import numpy as np

__all__ = ["MemoryBank", "EmptyBankError"]


class EmptyBankError(RuntimeError):
    pass


class MemoryBank:
    """Ring buffer of keys; the oldest batch is overwritten first.

    Keys are stored as plain arrays and only ever enter loss graphs as
    constant inputs, so they never carry gradients.
    """

    def __init__(self, capacity: int, dim: int, batch_size: int | None = None):
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be positive")
        if batch_size is not None and capacity % batch_size:
            raise ValueError(f"batch size {batch_size} does not divide capacity {capacity}")
        self.capacity = capacity
        self.dim = dim
        self.batch_size = batch_size
        self.rows = np.zeros((capacity, dim))
        self.write_cursor = 0
        self.filled = 0

    @classmethod
    def random_init(cls, capacity, dim, seed, batch_size=None) -> "MemoryBank":
        """A full bank of seeded random unit vectors."""
        bank = cls(capacity, dim, batch_size)
        keys = np.random.default_rng(seed).standard_normal((capacity, dim))
        bank.rows[:] = keys / np.linalg.norm(keys, axis=1, keepdims=True)
        bank.filled = capacity
        return bank

    def enqueue_batch(self, keys) -> None:
        keys = np.asarray(keys, dtype=np.float64)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ValueError(f"keys must be (B, {self.dim}), got {keys.shape}")
        b = len(keys)
        if b == 0 or self.capacity % b:
            raise ValueError(f"batch size {b} does not divide capacity {self.capacity}")
        if self.batch_size is not None and b != self.batch_size:
            raise ValueError(f"bank expects batches of {self.batch_size}, got {b}")
        norms = np.linalg.norm(keys, axis=1)
        if not np.all(np.isfinite(keys)) or np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("keys must be finite unit-norm rows")
        slots = (self.write_cursor + np.arange(b)) % self.capacity
        self.rows[slots] = keys
        self.write_cursor = int((self.write_cursor + b) % self.capacity)
        self.filled = min(self.capacity, self.filled + b)

    def negatives_view(self) -> np.ndarray:
        """Read-only copy of the current keys, in storage order."""
        if self.filled == 0:
            raise EmptyBankError("memory bank is empty")
        snap = self.rows[:self.filled].copy()
        snap.setflags(write=False)
        return snap

    def __len__(self):
        return self.filled
