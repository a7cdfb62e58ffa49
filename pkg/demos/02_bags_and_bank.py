"""
Bags from embeddings and the negative memory bank
=================================================
"""

import numpy as np

from bingo.bagging import bag_kmeans, bag_knn, bag_labels, sample_positives
from bingo.dataio import bags_text
from bingo.membank import MemoryBank

rng = np.random.default_rng(1)

# three tight groups on the unit sphere
centers = np.eye(4)[:3]
emb = np.repeat(centers, 5, axis=0) + 0.1 * rng.normal(size=(15, 4))
emb /= np.linalg.norm(emb, axis=1, keepdims=True)
y = np.repeat([0, 1, 2], 5)

knn = bag_knn(emb, 3)
print("kNN bag of row 0:", knn.members[0])
print("kNN bag purity:", np.mean([np.mean(y[m] == y[a]) for a, m in enumerate(knn.members)]))

assignment, km = bag_kmeans(emb, 3, seed=0)
print("k-means labels:", assignment.labels)
print("objective per iteration:", np.round(assignment.objective_trace, 4))

print(bags_text(bag_labels(y)).splitlines()[0])

positives, fallback = sample_positives(knn, np.arange(5), np.random.default_rng(0))
print("sampled positives for anchors 0..4:", positives, "self-fallback:", fallback)

# FIFO: after three batches of 4 into a bank of 8, only the last two batches remain
bank = MemoryBank(8, 4)
for step in range(3):
    keys = np.zeros((4, 4))
    keys[:, step] = 1.0
    bank.enqueue_batch(keys)
print("bank contents (one-hot column per batch):")
print(bank.negatives_view())
