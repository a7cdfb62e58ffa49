"""Minimal dense compute graph with reverse-mode differentiation.

A :class:`Graph` is a topologically ordered list of nodes. Every value is a
2-D ``float64`` array; scalars are ``(1, 1)``. There is no broadcasting: shape
agreement is checked when a node is added, so a graph that builds will
evaluate for any correctly shaped inputs.

>>> g = Graph()
>>> x = g.input((1, 2), name="x", requires_grad=True)
>>> loss = g.dot_rows(x, x)
>>> vals = evaluate(g, {"x": np.array([[1.0, 2.0]])})
>>> backpropagate(g, vals, loss)[x]
array([[2., 4.]])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "KINDS",
    "GraphError",
    "ShapeError",
    "NonFiniteError",
    "NotEvaluatedError",
    "Node",
    "Graph",
    "Values",
    "evaluate",
    "backpropagate",
    "finite_difference_check",
]

KINDS = (
    "input",
    "matmul",
    "add",
    "mul",
    "relu",
    "exp",
    "log",
    "sum",
    "scale",
    "concat-rows",
    "rowwise-l2-normalize",
    "dot-rows",
    "log-softmax-nll",
    "transpose",
)

# rows below this norm are passed through unchanged by rowwise-l2-normalize
DEGENERATE_NORM = 1e-8


class GraphError(Exception):
    """Base class for compute-graph failures."""


class ShapeError(GraphError):
    def __init__(self, node: str, message: str):
        super().__init__(f"node {node!r}: {message}")
        self.node = node


class NonFiniteError(GraphError):
    def __init__(self, node: str, index: tuple[int, ...]):
        super().__init__(f"node {node!r}: non-finite value at index {index}")
        self.node = node
        self.index = index


class NotEvaluatedError(GraphError):
    pass


@dataclass(frozen=True)
class Node:
    kind: str
    inputs: tuple[int, ...]
    shape: tuple[int, int]
    name: str
    requires_grad: bool = False
    attrs: Mapping = field(default_factory=dict)


class Graph:
    """Append-only graph builder.

    Node constructors return integer ids; ids always refer to earlier nodes,
    so the node list is its own topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._names: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def node_id(self, key) -> int:
        if isinstance(key, str):
            return self._names[key]
        return int(key)

    def _add(self, kind, inputs, shape, name=None, requires_grad=False, **attrs):
        nid = len(self.nodes)
        for i in inputs:
            if not 0 <= i < nid:
                raise GraphError(f"{kind} input {i} does not reference an earlier node")
        name = name or f"{kind}#{nid}"
        if name in self._names:
            raise GraphError(f"duplicate node name {name!r}")
        if requires_grad is False:
            requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(Node(kind, tuple(inputs), tuple(shape), name, requires_grad, attrs))
        self._names[name] = nid
        return nid

    def _shape(self, i):
        if not 0 <= i < len(self.nodes):
            raise GraphError(f"node {i} does not exist")
        return self.nodes[i].shape

    def _same(self, kind, a, b, name):
        if self._shape(a) != self._shape(b):
            raise ShapeError(name or kind, f"shapes {self._shape(a)} and {self._shape(b)} differ")
        return self._shape(a)

    def input(self, shape, name=None, requires_grad=False):
        shape = tuple(int(s) for s in shape)
        if len(shape) != 2 or min(shape) < 1:
            raise ShapeError(name or "input", f"bad input shape {shape}")
        return self._add("input", (), shape, name, requires_grad)

    def matmul(self, a, b, name=None):
        (m, k), (k2, n) = self._shape(a), self._shape(b)
        if k != k2:
            raise ShapeError(name or "matmul", f"inner dims {k} and {k2} differ")
        return self._add("matmul", (a, b), (m, n), name)

    def add(self, a, b, name=None):
        return self._add("add", (a, b), self._same("add", a, b, name), name)

    def mul(self, a, b, name=None):
        return self._add("mul", (a, b), self._same("mul", a, b, name), name)

    def relu(self, a, name=None):
        return self._add("relu", (a,), self._shape(a), name)

    def exp(self, a, name=None):
        return self._add("exp", (a,), self._shape(a), name)

    def log(self, a, name=None):
        return self._add("log", (a,), self._shape(a), name)

    def sum(self, a, name=None):
        return self._add("sum", (a,), (1, 1), name)

    def scale(self, a, factor: float, name=None):
        return self._add("scale", (a,), self._shape(a), name, factor=float(factor))

    def concat_rows(self, parts: Sequence[int], axis: int = 0, name=None):
        """Stack along rows (``axis=0``) or columns (``axis=1``)."""
        if axis not in (0, 1):
            raise ShapeError(name or "concat-rows", f"axis must be 0 or 1, got {axis}")
        shapes = [self._shape(p) for p in parts]
        if not shapes:
            raise ShapeError(name or "concat-rows", "nothing to concatenate")
        other = 1 - axis
        if len({s[other] for s in shapes}) != 1:
            raise ShapeError(name or "concat-rows", f"incompatible shapes {shapes}")
        shape = [0, 0]
        shape[other] = shapes[0][other]
        shape[axis] = sum(s[axis] for s in shapes)
        return self._add("concat-rows", tuple(parts), shape, name, axis=axis)

    def normalize_rows(self, a, name=None):
        return self._add("rowwise-l2-normalize", (a,), self._shape(a), name)

    def dot_rows(self, a, b, name=None):
        rows, _ = self._same("dot-rows", a, b, name)
        return self._add("dot-rows", (a, b), (rows, 1), name)

    def transpose(self, a, name=None):
        m, n = self._shape(a)
        return self._add("transpose", (a,), (n, m), name)

    def log_softmax_nll(self, logits, targets, name=None):
        """Mean over rows of ``-log softmax(logits)[row, target]``."""
        rows, cols = self._shape(logits)
        targets = np.asarray(targets, dtype=np.int64).reshape(-1)
        if targets.shape[0] != rows:
            raise ShapeError(name or "log-softmax-nll", f"{targets.shape[0]} targets for {rows} rows")
        if targets.size and (targets.min() < 0 or targets.max() >= cols):
            raise ShapeError(name or "log-softmax-nll", "target index out of range")
        targets.setflags(write=False)
        return self._add("log-softmax-nll", (logits,), (1, 1), name, targets=targets)


class Values(dict):
    """Node outputs from :func:`evaluate`, keyed by node id.

    ``degenerate`` maps each normalize node id to the row indices whose norm
    fell below ``DEGENERATE_NORM`` (those rows were passed through unchanged).
    """

    def __init__(self, graph):
        super().__init__()
        self.graph = graph
        self.degenerate: dict[int, np.ndarray] = {}
        self.aux: dict[int, np.ndarray] = {}


def _check_finite(node, value):
    if not np.all(np.isfinite(value)):
        bad = np.argwhere(~np.isfinite(value))[0]
        raise NonFiniteError(node.name, tuple(int(i) for i in bad))


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    # summing sorted terms makes the result independent of column order
    return shifted - np.log(np.sort(np.exp(shifted), axis=1).sum(axis=1, keepdims=True))


_ROW_BLOCK = 16


def _matmul(a, b):
    # BLAS picks kernels by row count, so a row's result can depend on its
    # batch. Padding to a fixed row multiple keeps each row bit-stable.
    m = a.shape[0]
    if m % _ROW_BLOCK == 0:
        return a @ b
    padded = np.zeros((m + _ROW_BLOCK - m % _ROW_BLOCK, a.shape[1]))
    padded[:m] = a
    return (padded @ b)[:m]


def evaluate(graph: Graph, inputs: Mapping) -> Values:
    """Compute every node output.

    ``inputs`` maps input node ids (or names) to arrays. Raises
    :class:`ShapeError` for unbound or mis-shaped inputs and
    :class:`NonFiniteError` at the first node producing inf/nan.
    """
    bound = {graph.node_id(k): v for k, v in inputs.items()}
    vals = Values(graph)
    with np.errstate(all="ignore"):
        for nid, node in enumerate(graph.nodes):
            x = [vals[i] for i in node.inputs]
            kind = node.kind
            if kind == "input":
                if nid not in bound:
                    raise ShapeError(node.name, "input not bound")
                out = np.asarray(bound[nid], dtype=np.float64)
                if out.shape != node.shape:
                    raise ShapeError(node.name, f"bound shape {out.shape}, expected {node.shape}")
            elif kind == "matmul":
                out = _matmul(x[0], x[1])
            elif kind == "add":
                out = x[0] + x[1]
            elif kind == "mul":
                out = x[0] * x[1]
            elif kind == "relu":
                out = np.maximum(x[0], 0.0)
            elif kind == "exp":
                out = np.exp(x[0])
            elif kind == "log":
                out = np.log(x[0])
            elif kind == "sum":
                out = np.array([[x[0].sum()]])
            elif kind == "scale":
                out = x[0] * node.attrs["factor"]
            elif kind == "concat-rows":
                out = np.concatenate(x, axis=node.attrs["axis"])
            elif kind == "rowwise-l2-normalize":
                norms = np.sqrt((x[0] * x[0]).sum(axis=1, keepdims=True))
                small = norms[:, 0] < DEGENERATE_NORM
                out = x[0] / np.where(small[:, None], 1.0, norms)
                vals.aux[nid] = norms
                if small.any():
                    vals.degenerate[nid] = np.flatnonzero(small)
            elif kind == "dot-rows":
                out = (x[0] * x[1]).sum(axis=1, keepdims=True)
            elif kind == "log-softmax-nll":
                logp = _log_softmax(x[0])
                vals.aux[nid] = logp
                t = node.attrs["targets"]
                out = np.array([[-logp[np.arange(len(t)), t].mean()]])
            elif kind == "transpose":
                out = np.ascontiguousarray(x[0].T)
            else:  # pragma: no cover
                raise GraphError(f"unknown kind {kind}")
            _check_finite(node, out)
            vals[nid] = out
    return vals


def backpropagate(graph: Graph, values: Values, loss_node) -> dict[int, np.ndarray]:
    """Gradients of a scalar node w.r.t. every ``requires_grad`` input.

    The returned dict also holds the loss node itself (gradient 1).
    """
    loss = graph.node_id(loss_node)
    if not isinstance(values, Values) or values.graph is not graph or loss not in values:
        raise NotEvaluatedError("graph has not been evaluated")
    if graph.nodes[loss].shape != (1, 1):
        raise GraphError(f"loss node {graph.nodes[loss].name!r} is not scalar")
    grads: dict[int, np.ndarray] = {loss: np.ones((1, 1))}

    def acc(i, g):
        if not graph.nodes[i].requires_grad:
            return
        if i in grads:
            grads[i] = grads[i] + g
        else:
            grads[i] = g

    for nid in range(loss, -1, -1):
        node = graph.nodes[nid]
        if nid not in grads or node.kind == "input":
            continue
        g = grads[nid]
        x = [values[i] for i in node.inputs]
        ins = node.inputs
        kind = node.kind
        if kind == "matmul":
            acc(ins[0], g @ x[1].T)
            acc(ins[1], x[0].T @ g)
        elif kind == "add":
            acc(ins[0], g)
            acc(ins[1], g)
        elif kind == "mul":
            acc(ins[0], g * x[1])
            acc(ins[1], g * x[0])
        elif kind == "relu":
            acc(ins[0], g * (x[0] > 0))
        elif kind == "exp":
            acc(ins[0], g * values[nid])
        elif kind == "log":
            acc(ins[0], g / x[0])
        elif kind == "sum":
            acc(ins[0], np.full(x[0].shape, g[0, 0]))
        elif kind == "scale":
            acc(ins[0], g * node.attrs["factor"])
        elif kind == "concat-rows":
            axis = node.attrs["axis"]
            cuts = np.cumsum([v.shape[axis] for v in x])[:-1]
            for i, part in zip(ins, np.split(g, cuts, axis=axis)):
                acc(i, part)
        elif kind == "rowwise-l2-normalize":
            y = values[nid]
            norms = values.aux[nid]
            small = norms < DEGENERATE_NORM
            proj = g - y * (g * y).sum(axis=1, keepdims=True)
            acc(ins[0], np.where(small, g, proj / np.where(small, 1.0, norms)))
        elif kind == "dot-rows":
            acc(ins[0], g * x[1])
            acc(ins[1], g * x[0])
        elif kind == "log-softmax-nll":
            t = node.attrs["targets"]
            p = np.exp(values.aux[nid])
            p[np.arange(len(t)), t] -= 1.0
            acc(ins[0], p * (g[0, 0] / len(t)))
        elif kind == "transpose":
            acc(ins[0], g.T)
        else:  # pragma: no cover
            raise GraphError(f"unknown kind {kind}")
    return {i: v for i, v in grads.items() if graph.nodes[i].kind == "input" or i == loss}


def finite_difference_check(graph: Graph, inputs: Mapping, loss_node, param, epsilon=1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Each component of ``param`` is perturbed by ``+-epsilon``; the error for a
    component is ``|analytic - numeric| / max(1e-12, |numeric|)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    loss = graph.node_id(loss_node)
    pid = graph.node_id(param)
    base = {graph.node_id(k): np.array(v, dtype=np.float64) for k, v in inputs.items()}
    analytic = backpropagate(graph, evaluate(graph, base), loss)
    if pid not in analytic:
        raise GraphError(f"no gradient reaches node {graph.nodes[pid].name!r}")
    analytic = analytic[pid]
    x = base[pid]
    worst = 0.0
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + epsilon
        hi = evaluate(graph, base)[loss][0, 0]
        x[idx] = orig - epsilon
        lo = evaluate(graph, base)[loss][0, 0]
        x[idx] = orig
        numeric = (hi - lo) / (2 * epsilon)
        worst = max(worst, abs(analytic[idx] - numeric) / max(1e-12, abs(numeric)))
    return worst
