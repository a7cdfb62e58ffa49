"""
Autodiff graph and contrastive loss, step by step
==================================================

Builds a small graph by hand, checks its gradient against central
differences, then evaluates InfoNCE on a few cases with known answers.
"""

import math

import numpy as np

from bingo.tensor import Graph, backpropagate, evaluate, finite_difference_check
from bingo.losses import info_nce

rng = np.random.default_rng(0)

# a two-layer expression: sum(normalize(relu(x @ w)) * target)
g = Graph()
x = g.input((4, 3), name="x")
w = g.input((3, 5), name="w", requires_grad=True)
target = g.input((4, 5), name="target")
h = g.normalize_rows(g.relu(g.matmul(x, w)))
loss = g.sum(g.mul(h, target))

feed = {x: rng.normal(size=(4, 3)), w: rng.normal(size=(3, 5)), target: rng.normal(size=(4, 5))}
values = evaluate(g, feed)
grads = backpropagate(g, values, loss)
print("loss", float(values[loss][0, 0]))
print("dL/dw shape", grads[w].shape)
print("max relative error vs finite differences", finite_difference_check(g, feed, loss, w))


def unit(v):
    v = np.atleast_2d(np.asarray(v, dtype=float))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# positive and negative equally similar to the query: loss is ln 2
print("symmetric", info_nce(unit([1, 0]), unit([0.6, 0.8]), unit([0.6, -0.8]), 0.2), math.log(2))

# one orthogonal negative at tau = 1: ln(1 + e^-1)
print("one negative", info_nce(unit([1, 0]), unit([1, 0]), unit([0, 1]), 1.0), math.log1p(math.exp(-1)))

# 1024 orthogonal negatives at tau = 0.2
negs = rng.normal(size=(1024, 8))
negs[:, 0] = 0.0
q = np.eye(8)[:1]
print("1024 negatives", info_nce(q, q, unit(negs), 0.2), math.log1p(1024 * math.exp(-5)))

# the loss ignores the order of the negatives
perm = rng.permutation(1024)
print("permuted", info_nce(q, q, unit(negs)[perm], 0.2))
