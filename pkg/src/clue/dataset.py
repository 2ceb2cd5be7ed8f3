"""Trajectory containers, the line-delimited dataset file format, expert
filtering, return computation, and state normalization."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

STD_FLOOR = 1e-6


class DatasetError(Exception):
    pass


class DatasetParseError(DatasetError):
    pass


class DatasetValidationError(DatasetError):
    pass


class MissingRewardsError(DatasetError):
    pass


class NoExpertFoundError(DatasetError):
    pass


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float | None
    next_state: np.ndarray
    terminal: bool


@dataclass
class Trajectory:
    """One episode. observations has one more row than actions: the final
    next_state is observations[-1]."""

    observations: np.ndarray  # (T+1, state_dim)
    actions: np.ndarray  # (T, action_dim)
    rewards: np.ndarray | None  # (T,) or None for reward-free data
    terminals: np.ndarray  # (T,) bool
    success: bool | None = None
    original_rewards: np.ndarray | None = None

    def __len__(self):
        return self.actions.shape[0]

    @property
    def states(self):
        return self.observations[:-1]

    @property
    def next_states(self):
        return self.observations[1:]

    def transitions(self):
        rew = self.rewards
        return [
            Transition(
                self.observations[t],
                self.actions[t],
                None if rew is None else float(rew[t]),
                self.observations[t + 1],
                bool(self.terminals[t]),
            )
            for t in range(len(self))
        ]

    def episode_return(self):
        if self.rewards is None:
            raise MissingRewardsError("trajectory has no rewards")
        return float(np.sum(self.rewards))

    def validate(self, line=None):
        where = "" if line is None else f" (line {line})"
        n = self.actions.shape[0]
        if n < 1:
            raise DatasetValidationError(f"empty trajectory{where}")
        if self.observations.shape[0] != n + 1:
            raise DatasetValidationError(
                f"observations length {self.observations.shape[0]} != actions+1 ({n + 1}){where}"
            )
        if self.rewards is not None and self.rewards.shape[0] != n:
            raise DatasetValidationError(f"rewards length != actions length{where}")
        if self.terminals.shape[0] != n:
            raise DatasetValidationError(f"terminals length != actions length{where}")
        if np.any(self.terminals[:-1]):
            raise DatasetValidationError(f"terminal=true before the final transition{where}")
        for name, arr in (("observations", self.observations), ("actions", self.actions)):
            if not np.all(np.isfinite(arr)):
                raise DatasetValidationError(f"non-finite {name}{where}")
        if self.rewards is not None and not np.all(np.isfinite(self.rewards)):
            raise DatasetValidationError(f"non-finite rewards{where}")


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class FlatTransitions:
    """Whole dataset stacked into contiguous arrays, in trajectory order."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray | None
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self):
        return self.states.shape[0]


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    state_dim: int
    action_dim: int
    normalization: NormalizationStats | None = None
    _flat: FlatTransitions | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.trajectories)

    @property
    def n_transitions(self):
        return sum(len(t) for t in self.trajectories)

    @property
    def is_labeled(self):
        return all(t.rewards is not None for t in self.trajectories)

    def flat(self):
        if self._flat is None:
            states = np.concatenate([t.states for t in self.trajectories])
            actions = np.concatenate([t.actions for t in self.trajectories])
            next_states = np.concatenate([t.next_states for t in self.trajectories])
            terminals = np.concatenate([t.terminals for t in self.trajectories])
            rewards = None
            if self.is_labeled:
                rewards = np.concatenate([t.rewards for t in self.trajectories])
            self._flat = FlatTransitions(states, actions, rewards, next_states, terminals)
        return self._flat

    def validate(self):
        if not self.trajectories:
            raise DatasetValidationError("dataset has no trajectories")
        labeled = [t.rewards is not None for t in self.trajectories]
        if any(labeled) and not all(labeled):
            raise DatasetValidationError("rewards present on some trajectories but not all")
        for i, traj in enumerate(self.trajectories):
            traj.validate()
            if traj.observations.shape[1] != self.state_dim:
                raise DatasetValidationError(
                    f"trajectory {i}: state dim {traj.observations.shape[1]} != {self.state_dim}"
                )
            if traj.actions.shape[1] != self.action_dim:
                raise DatasetValidationError(
                    f"trajectory {i}: action dim {traj.actions.shape[1]} != {self.action_dim}"
                )
        return self

    def save(self, path):
        save(self, path)


def from_trajectories(trajectories, normalization=None):
    if not trajectories:
        raise DatasetValidationError("dataset has no trajectories")
    state_dim = trajectories[0].observations.shape[1]
    action_dim = trajectories[0].actions.shape[1]
    return Dataset(list(trajectories), state_dim, action_dim, normalization).validate()


def concat(datasets):
    """Concatenate datasets in order; dims must agree."""
    trajs = [t for ds in datasets for t in ds.trajectories]
    return from_trajectories(trajs)


def _traj_to_record(traj, with_original):
    record = {
        "observations": traj.observations.tolist(),
        "actions": traj.actions.tolist(),
        "rewards": None if traj.rewards is None else traj.rewards.tolist(),
        "terminals": [bool(x) for x in traj.terminals],
        "success": traj.success,
    }
    if with_original:
        record["original_rewards"] = (
            None if traj.original_rewards is None else traj.original_rewards.tolist()
        )
    return record


def save(dataset, path):
    """Write one JSON object per line, one line per trajectory."""
    dataset.validate()
    with_original = any(t.original_rewards is not None for t in dataset.trajectories)
    with open(path, "w", encoding="utf-8") as f:
        for traj in dataset.trajectories:
            f.write(json.dumps(_traj_to_record(traj, with_original), separators=(",", ":")))
            f.write("\n")


def _record_to_traj(obj, line):
    for key in ("observations", "actions", "rewards", "terminals"):
        if key not in obj:
            raise DatasetParseError(f"line {line}: missing field {key!r}")
    try:
        observations = np.asarray(obj["observations"], dtype=np.float64)
        actions = np.asarray(obj["actions"], dtype=np.float64)
        rewards = None if obj["rewards"] is None else np.asarray(obj["rewards"], dtype=np.float64)
        terminals = np.asarray(obj["terminals"], dtype=bool)
    except (TypeError, ValueError) as exc:
        raise DatasetParseError(f"line {line}: {exc}") from exc
    if observations.ndim != 2 or actions.ndim != 2:
        raise DatasetParseError(f"line {line}: observations/actions must be 2-D arrays")
    original = obj.get("original_rewards")
    traj = Trajectory(
        observations,
        actions,
        rewards,
        terminals,
        success=obj.get("success"),
        original_rewards=None if original is None else np.asarray(original, dtype=np.float64),
    )
    traj.validate(line=line)
    return traj


def load(path):
    """Parse a dataset file; errors name the offending line."""
    trajectories = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"line {line_no}: invalid JSON at column {exc.colno}") from exc
            if not isinstance(obj, dict):
                raise DatasetParseError(f"line {line_no}: expected a JSON object")
            trajectories.append(_record_to_traj(obj, line_no))
    if not trajectories:
        raise DatasetValidationError(f"{path}: no trajectories")
    return from_trajectories(trajectories)


def is_successful(traj):
    """Explicit success flag wins; otherwise sparse goal-reached semantics."""
    if traj.success is not None:
        return bool(traj.success)
    if traj.rewards is None:
        raise DatasetValidationError("trajectory has neither rewards nor a success flag")
    return bool(np.any(traj.rewards > 0.0))


def filter_expert_by_success(dataset, k, strip_rest_rewards=False):
    """Split off the k highest-return successful trajectories as expert data.

    Returns (expert, rest). If fewer than k successes exist, all of them are
    taken. Ties in return break toward the earlier trajectory. Rewards in the
    rest split are kept unless strip_rest_rewards is set (relabeling ignores
    them either way, but ablations can compare against ground truth).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    flags = [is_successful(t) for t in dataset.trajectories]
    if not any(flags):
        raise NoExpertFoundError("no successful trajectories in dataset")
    winners = [i for i, ok in enumerate(flags) if ok]
    if dataset.is_labeled:
        winners.sort(key=lambda i: (-dataset.trajectories[i].episode_return(), i))
    chosen = set(winners[:k])
    expert = [dataset.trajectories[i] for i in sorted(chosen)]
    rest = []
    for i, traj in enumerate(dataset.trajectories):
        if i in chosen:
            continue
        if strip_rest_rewards and traj.rewards is not None:
            traj = replace(traj, rewards=None)
        rest.append(traj)
    expert_ds = from_trajectories(expert)
    rest_ds = from_trajectories(rest) if rest else Dataset([], dataset.state_dim, dataset.action_dim)
    return expert_ds, rest_ds


def compute_returns(dataset):
    """Undiscounted per-trajectory return sums plus their min/max."""
    if not dataset.is_labeled:
        raise MissingRewardsError("dataset is not reward-labeled")
    returns = np.array([t.episode_return() for t in dataset.trajectories])
    return returns, float(returns.min()), float(returns.max())


def state_stats(dataset):
    """Per-dimension mean/std over every observation row (std floored)."""
    obs = np.concatenate([t.observations for t in dataset.trajectories])
    if obs.shape[0] < 2:
        raise DatasetValidationError("need at least 2 observations to compute stats")
    mean = obs.mean(axis=0)
    std = obs.std(axis=0)
    constant = std < STD_FLOOR
    if np.any(constant):
        warnings.warn(
            f"constant state dimensions {np.flatnonzero(constant).tolist()}; std floored at {STD_FLOOR}"
        )
        std = np.maximum(std, STD_FLOOR)
    return NormalizationStats(mean, std)


def normalize_states(dataset):
    """Return a dataset whose observations are z-scored, plus the stats."""
    stats = state_stats(dataset)
    trajs = [
        replace(t, observations=(t.observations - stats.mean) / stats.std)
        for t in dataset.trajectories
    ]
    return from_trajectories(trajs, normalization=stats), stats


def denormalize_states(dataset, stats=None):
    """Invert normalize_states."""
    stats = stats or dataset.normalization
    if stats is None:
        raise ValueError("dataset carries no normalization stats")
    trajs = [
        replace(t, observations=t.observations * stats.std + stats.mean)
        for t in dataset.trajectories
    ]
    return from_trajectories(trajs)


def subsample_trajectories(dataset, fraction, rng):
    """Keep a random fraction of trajectories (at least one), dataset order preserved."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    n = len(dataset.trajectories)
    keep = max(1, int(round(fraction * n)))
    idx = sorted(rng.choice(n, size=keep, replace=False).tolist())
    return from_trajectories([dataset.trajectories[i] for i in idx])
