"""Relation-guided self-supervised distillation at desk scale.

Modules
-------
tensor    dense compute graph with reverse-mode differentiation
nets      MLP encoders with a projection head
augment   counter-based stochastic views of feature rows
bagging   kNN / k-means / label bags from teacher embeddings
membank   FIFO queue of negative keys
losses    InfoNCE, intra/inter-sample distillation, KD and RKD baselines
train     teacher pretraining and student distillation loops
metrics   kNN, linear probe, fine-tuning, bag and intra-class distances
dataio    datasets and file formats
cli       command-line pipeline driver
"""

__version__ = "0.1.0"
