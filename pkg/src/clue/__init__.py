"""Calibrated latent-space intrinsic rewards for offline RL.

Learns a calibrated CVAE embedding over expert and unlabeled transitions,
labels intrinsic rewards from latent distance to the expert anchor, and
trains offline IQL policies on the relabeled data. Covers sparse-reward
relabeling, offline imitation, and unsupervised skill discovery.
"""

__version__ = "0.1.0"
