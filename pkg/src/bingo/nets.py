"""MLP encoders: relu backbone, 2-layer projection head, unit-norm output."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Graph, GraphError, evaluate

__all__ = [
    "EncoderSpec",
    "EncoderParams",
    "DegenerateRowError",
    "init_params",
    "add_encoder",
    "encoder_forward",
    "momentum_update",
    "ROLES",
]

ROLES = ("student", "teacher", "momentum-key")


class DegenerateRowError(GraphError):
    """An output row had (near) zero norm before normalization."""


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (128,)
    proj_hidden_dim: int = 128
    embed_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.proj_hidden_dim, self.embed_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all encoder dims must be >= 1, got {dims}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.proj_hidden_dim, self.embed_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class EncoderParams:
    """Weights ``(fan_in, fan_out)`` and biases ``(1, fan_out)`` per layer.

    The last two layers form the projection head; everything before them
    is the backbone.
    """

    spec: EncoderSpec
    layers: list[tuple[np.ndarray, np.ndarray]]
    role: str = "student"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        expected = self.spec.layer_dims
        if len(self.layers) != len(expected):
            raise ValueError(f"{len(self.layers)} layers, spec needs {len(expected)}")
        for (w, b), (fi, fo) in zip(self.layers, expected):
            if w.shape != (fi, fo) or b.shape != (1, fo):
                raise ValueError(f"layer shapes {w.shape}/{b.shape} do not match ({fi}, {fo})")

    def copy(self, role=None) -> "EncoderParams":
        return EncoderParams(self.spec, [(w.copy(), b.copy()) for w, b in self.layers], role or self.role)

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def n_backbone(self) -> int:
        return len(self.layers) - 2


def init_params(spec: EncoderSpec, seed: int, role: str = "student") -> EncoderParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in spec.layer_dims:
        s = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-s, s, size=(fan_in, fan_out)), np.zeros((1, fan_out))))
    return EncoderParams(spec, layers, role)


@dataclass
class EncoderNodes:
    """Node ids produced by :func:`add_encoder`."""

    output: int
    backbone: int
    params: list[tuple[int, int]] = field(default_factory=list)


def add_encoder(g: Graph, feed: dict, params: EncoderParams, x: int, prefix: str,
                trainable: bool = True, output: str = "embedding",
                shared: list[tuple[int, int]] | None = None) -> EncoderNodes:
    """Append the encoder applied to node ``x`` and register its weights in ``feed``.

    ``shared`` reuses weight nodes from an earlier call, so gradients of both
    passes accumulate on one set of parameters. ``output="backbone"``
    normalizes the backbone features instead of the projection-head output.
    """
    if output not in ("embedding", "backbone"):
        raise ValueError(f"unknown encoder output {output!r}")
    rows = g.nodes[x].shape[0]
    ones = g.input((rows, 1), name=f"{prefix}/ones")
    feed[ones] = np.ones((rows, 1))
    n_back = params.n_backbone()
    n_run = n_back if output == "backbone" else len(params.layers)
    h = backbone = x
    ids = []
    for li, (w, b) in enumerate(params.layers[:n_run]):
        if shared is not None:
            wi, bi = shared[li]
        else:
            wi = g.input(w.shape, name=f"{prefix}/W{li}", requires_grad=trainable)
            bi = g.input(b.shape, name=f"{prefix}/b{li}", requires_grad=trainable)
            feed[wi], feed[bi] = w, b
        ids.append((wi, bi))
        h = g.add(g.matmul(h, wi), g.matmul(ones, bi))
        if li != len(params.layers) - 1:
            h = g.relu(h)
        if li == n_back - 1:
            backbone = h
    return EncoderNodes(g.normalize_rows(h, name=f"{prefix}/out"), backbone, ids)


def encoder_forward(params: EncoderParams, batch: np.ndarray, output: str = "embedding") -> np.ndarray:
    """Unit-norm embeddings for a ``B x input_dim`` batch.

    Raises :class:`DegenerateRowError` when a row's pre-normalization norm is
    below the degenerate threshold.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[1] != params.spec.input_dim:
        raise ValueError(f"batch width {batch.shape[1]} != input_dim {params.spec.input_dim}")
    g = Graph()
    feed = {}
    x = g.input(batch.shape, name="x")
    feed[x] = batch
    nodes = add_encoder(g, feed, params, x, "enc", trainable=False, output=output)
    vals = evaluate(g, feed)
    if nodes.output in vals.degenerate:
        raise DegenerateRowError(f"degenerate embedding rows {vals.degenerate[nodes.output].tolist()}")
    return vals[nodes.output]


def momentum_update(online: EncoderParams, target: EncoderParams, m: float) -> EncoderParams:
    """EMA step ``target <- m*target + (1-m)*online``; returns new params."""
    if online.spec != target.spec:
        raise ValueError("momentum_update needs identical encoder specs")
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    layers = [
        (m * wt + (1.0 - m) * wo, m * bt + (1.0 - m) * bo)
        for (wo, bo), (wt, bt) in zip(online.layers, target.layers)
    ]
    return EncoderParams(target.spec, layers, target.role)
