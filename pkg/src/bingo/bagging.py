"""Bag construction: group each anchor with related instances.

Three strategies share one output type, :class:`BagTable`:

* ``knn``: the anchor plus its ``K`` most cosine-similar other instances,
* ``kmeans``: all members of the anchor's spherical k-means cluster,
* ``labels``: all instances sharing the anchor's ground-truth label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nets import EncoderParams, encoder_forward

__all__ = [
    "BagTable",
    "ClusterAssignment",
    "check_unit_rows",
    "extract_embeddings",
    "bag_knn",
    "bag_kmeans",
    "bag_labels",
    "sample_positive",
    "sample_positives",
    "kmeans_objective",
]

UNIT_TOL = 1e-5


def check_unit_rows(emb, tol=UNIT_TOL) -> np.ndarray:
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2:
        raise ValueError(f"embedding matrix must be 2-D, got shape {emb.shape}")
    if not np.all(np.isfinite(emb)):
        raise ValueError("embedding matrix has non-finite entries")
    norms = np.linalg.norm(emb, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise ValueError(f"rows {bad[:5].tolist()} are not unit norm")
    return emb


@dataclass
class BagTable:
    """Per-anchor member lists, each sorted ascending and containing the anchor."""

    strategy: str
    param: int
    members: list[np.ndarray]
    _others: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.members = [np.asarray(m, dtype=np.int64) for m in self.members]
        n = len(self.members)
        for a, m in enumerate(self.members):
            if m.size == 0 or np.any(np.diff(m) <= 0):
                raise ValueError(f"bag {a} must be non-empty, sorted and duplicate-free")
            if m[0] < 0 or m[-1] >= n:
                raise ValueError(f"bag {a} references an index outside [0, {n})")
            if not np.any(m == a):
                raise ValueError(f"bag {a} does not contain its anchor")

    def __len__(self):
        return len(self.members)

    def __eq__(self, other):
        if not isinstance(other, BagTable):
            return NotImplemented
        return (self.strategy, self.param, len(self)) == (other.strategy, other.param, len(other)) and all(
            np.array_equal(a, b) for a, b in zip(self.members, other.members)
        )

    def others(self):
        """CSR view ``(offsets, flat)`` of each bag with its anchor removed."""
        if self._others is None:
            rest = [m[m != a] for a, m in enumerate(self.members)]
            counts = np.array([len(r) for r in rest], dtype=np.int64)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            flat = np.concatenate(rest) if rest else np.zeros(0, dtype=np.int64)
            self._others = (offsets, flat)
        return self._others

    def singleton_count(self) -> int:
        return sum(1 for m in self.members if len(m) == 1)


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # 0-based cluster ids
    centroids: np.ndarray
    objective_trace: list[float]
    iterations: int
    converged: bool
    reseeded: list[tuple[int, int]] = field(default_factory=list)  # (iteration, cluster)

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]


def extract_embeddings(params: EncoderParams, X, chunk: int = 256, output: str = "embedding") -> np.ndarray:
    """Un-augmented encoder outputs for every row of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.spec.input_dim:
        raise ValueError(f"data shape {X.shape} does not match input_dim {params.spec.input_dim}")
    parts = [encoder_forward(params, X[i:i + chunk], output=output) for i in range(0, len(X), chunk)]
    if not parts:
        return np.zeros((0, params.spec.embed_dim))
    return np.concatenate(parts)


def _top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the ``k`` largest entries per row, ties to lower index.

    Returned per row in ascending index order.
    """
    kth = -np.partition(-scores, k - 1, axis=1)[:, k - 1:k]
    above = scores > kth
    tied = scores == kth
    need = k - above.sum(axis=1, keepdims=True)
    take = above | (tied & (np.cumsum(tied, axis=1) <= need))
    return np.nonzero(take)[1].reshape(len(scores), k)


def bag_knn(emb, k: int, chunk: int = 512) -> BagTable:
    """Each anchor plus its ``k`` nearest neighbors by cosine similarity."""
    emb = check_unit_rows(emb)
    n = len(emb)
    if not 1 <= k < n:
        raise ValueError(f"K must satisfy 1 <= K < N (K={k}, N={n})")
    members = []
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        scores = emb[rows] @ emb.T
        scores[np.arange(len(rows)), rows] = -np.inf
        top = _top_k_rows(scores, k)
        for a, nb in zip(rows, top):
            members.append(np.sort(np.append(nb, a)))
    return BagTable("knn", k, members)


def kmeans_objective(emb, labels, centroids) -> float:
    return float(-np.einsum("ij,ij->", emb, centroids[labels]) / len(emb))


def _groups(labels):
    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    groups = np.split(order, bounds)
    members = [None] * len(labels)
    for grp in groups:
        grp = np.sort(grp)
        for i in grp:
            members[i] = grp
    return members


def _spherical_means(emb, labels, c, previous):
    sums = np.zeros((c, emb.shape[1]))
    np.add.at(sums, labels, emb)
    norms = np.linalg.norm(sums, axis=1, keepdims=True)
    ok = norms[:, 0] > 1e-12
    return np.where(ok[:, None], sums / np.where(ok[:, None], norms, 1.0), previous)


def bag_kmeans(emb, c: int, max_iters: int = 100, seed: int = 0) -> tuple[ClusterAssignment, BagTable]:
    """Spherical Lloyd iterations; bags are cluster co-members.

    The objective ``mean(-v_i . c_{q_i})`` is recorded after every update and
    never increases. An emptied cluster is re-seeded at the point farthest
    from its nearest centroid; re-seeds are listed in ``reseeded``.
    """
    emb = check_unit_rows(emb)
    n = len(emb)
    if not 1 <= c <= n:
        raise ValueError(f"cluster count must satisfy 1 <= C <= N (C={c}, N={n})")
    rng = np.random.default_rng(seed)
    centroids = emb[np.sort(rng.choice(n, size=c, replace=False))].copy()
    labels = np.argmax(emb @ centroids.T, axis=1)
    trace = [kmeans_objective(emb, labels, centroids)]
    reseeded = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        centroids = _spherical_means(emb, labels, c, centroids)
        counts = np.bincount(labels, minlength=c)
        for q in np.flatnonzero(counts == 0):
            sims = emb @ centroids.T
            far = int(np.argmin(sims.max(axis=1)))
            centroids[q] = emb[far]
            reseeded.append((it, int(q)))
        trace.append(kmeans_objective(emb, labels, centroids))
        new_labels = np.argmax(emb @ centroids.T, axis=1)
        if np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
        trace.append(kmeans_objective(emb, labels, centroids))
    assignment = ClusterAssignment(labels, centroids, trace, it, converged, reseeded)
    return assignment, BagTable("kmeans", c, _groups(labels))


def bag_labels(labels) -> BagTable:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-D sequence")
    n_classes = len(np.unique(labels)) if labels.size else 0
    return BagTable("labels", n_classes, _groups(labels) if labels.size else [])


def sample_positive(bags: BagTable, anchor: int, rng: np.random.Generator) -> tuple[int, bool]:
    """Uniform draw from the anchor's bag minus the anchor.

    Returns ``(index, fallback)``; for a singleton bag the anchor itself is
    returned with ``fallback=True``.
    """
    offsets, flat = bags.others()
    lo, hi = offsets[anchor], offsets[anchor + 1]
    if hi == lo:
        return int(anchor), True
    return int(flat[lo + rng.integers(hi - lo)]), False


def sample_positives(bags: BagTable, anchors, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`sample_positive` over an index array."""
    anchors = np.asarray(anchors, dtype=np.int64)
    offsets, flat = bags.others()
    lo = offsets[anchors]
    counts = offsets[anchors + 1] - lo
    fallback = counts == 0
    pick = np.floor(rng.random(len(anchors)) * np.maximum(counts, 1)).astype(np.int64)
    out = np.where(fallback, anchors, flat[np.minimum(lo + pick, max(len(flat) - 1, 0))] if len(flat) else anchors)
    return out, fallback
