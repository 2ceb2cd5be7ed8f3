"""Intrinsic rewards from latent distance to the expert anchor.

A frozen encoder plus the mean expert embedding define a pure function
(s, a) -> exp(-temperature * ||anchor - z(s, a)||^2) in (0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import cvae
from .dataset import from_trajectories


@dataclass(frozen=True)
class RewardLabeler:
    model: object  # frozen CvaeModel
    anchor: np.ndarray
    temperature: float
    sampling_mode: str = "mean"  # mean | sample

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.sampling_mode not in ("mean", "sample"):
            raise ValueError("sampling_mode must be 'mean' or 'sample'")
        if np.asarray(self.anchor).shape != (self.model.latent_dim,):
            raise ValueError("anchor length must equal the model latent dim")


def expert_anchor(model, expert):
    """Mean posterior mean over every expert transition."""
    flat = expert.flat()
    if len(flat) == 0:
        raise ValueError("expert dataset is empty")
    return cvae.encode(model, flat.states, flat.actions).mean.mean(axis=0)


def make_labeler(model, expert, temperature=6.0, sampling_mode="mean"):
    return RewardLabeler(model, expert_anchor(model, expert), temperature, sampling_mode)


def _latent_point(labeler, s, a, rng):
    g = cvae.encode(labeler.model, s, a)
    if labeler.sampling_mode == "mean":
        return g.mean
    if rng is None:
        raise ValueError("sample mode needs an rng")
    return cvae.reparameterize(g, rng)


def intrinsic_reward(labeler, s, a, rng=None):
    """Reward in (0, 1]; exactly 1 when the embedding hits the anchor."""
    z = _latent_point(labeler, s, a, rng)
    sq_dist = np.sum((z - labeler.anchor) ** 2, axis=-1)
    out = np.exp(-labeler.temperature * sq_dist)
    return float(out) if np.ndim(out) == 0 else out


def relabel(labeler, dataset, rng=None):
    """Replace every reward with the intrinsic reward.

    States, actions, terminals, ordering, and success flags are untouched;
    the previous rewards (when present) move to the original_rewards side
    channel so ablations can compare against ground truth.
    """
    trajs = []
    for traj in dataset.trajectories:
        rewards = intrinsic_reward(labeler, traj.states, traj.actions, rng)
        trajs.append(
            replace(
                traj,
                rewards=np.atleast_1d(rewards),
                original_rewards=traj.rewards if traj.original_rewards is None else traj.original_rewards,
            )
        )
    return from_trajectories(trajs)
