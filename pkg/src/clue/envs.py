"""Desk-scale pointmass mazes and scripted behavior policies.

The arena is the unit square. Dynamics: s' = clip(s + 0.1 * a) with movement
stopped at the first wall intersection (no sliding). Sparse reward 1 on
entering the goal region, 0 elsewhere; a dense mode (negative distance to
the goal center) is available for ground-truth-reward experiments.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Trajectory, from_trajectories

STEP_GAIN = 0.1
GRID_RES = 0.05


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate rectangle {self}")

    @property
    def center(self):
        return np.array([(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0])

    def contains(self, p):
        return self.x0 <= p[0] <= self.x1 and self.y0 <= p[1] <= self.y1

    def strictly_contains(self, p):
        return self.x0 < p[0] < self.x1 and self.y0 < p[1] < self.y1

    def overlaps(self, other):
        return (
            self.x0 < other.x1
            and other.x0 < self.x1
            and self.y0 < other.y1
            and other.y0 < self.y1
        )


def _segment_rect_entry(p, q, rect):
    """Earliest t in [0, 1] where p + t*(q - p) enters the open rectangle, or None."""
    d = q - p
    t_lo, t_hi = 0.0, 1.0
    for axis, (lo, hi) in enumerate(((rect.x0, rect.x1), (rect.y0, rect.y1))):
        if d[axis] == 0.0:
            if not (lo < p[axis] < hi):
                return None
            continue
        t0 = (lo - p[axis]) / d[axis]
        t1 = (hi - p[axis]) / d[axis]
        if t0 > t1:
            t0, t1 = t1, t0
        t_lo = max(t_lo, t0)
        t_hi = min(t_hi, t1)
        if t_lo >= t_hi:
            return None
    return t_lo if t_hi > 0.0 else None


@dataclass
class PointMaze:
    walls: list
    start: Rect
    goal: Rect
    max_steps: int
    reward_mode: str = "sparse"  # sparse | dense

    def __post_init__(self):
        if self.reward_mode not in ("sparse", "dense"):
            raise ValueError("reward_mode must be 'sparse' or 'dense'")
        for name, region in (("start", self.start), ("goal", self.goal)):
            for wall in self.walls:
                if region.overlaps(wall):
                    raise ValueError(f"{name} region overlaps a wall")

    @property
    def state_dim(self):
        return 2

    @property
    def action_dim(self):
        return 2

    def reset(self, rng):
        return np.array(
            [
                rng.uniform(self.start.x0, self.start.x1),
                rng.uniform(self.start.y0, self.start.y1),
            ]
        )

    def in_goal(self, s):
        return self.goal.contains(s)

    def _resolve_collision(self, s, proposed):
        t_min = None
        for wall in self.walls:
            t = _segment_rect_entry(s, proposed, wall)
            if t is not None and (t_min is None or t < t_min):
                t_min = t
        if t_min is None:
            return proposed
        # back off a hair so the state sits strictly outside the wall
        t = max(0.0, t_min - 1e-9)
        return s + t * (proposed - s)

    def step(self, s, a):
        """One transition. Returns (next_state, reward, terminal, success).

        Stateless: terminal reflects goal entry only; rollout drivers add the
        step-limit cut.
        """
        s = np.asarray(s, dtype=np.float64)
        a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)
        proposed = np.clip(s + STEP_GAIN * a, 0.0, 1.0)
        nxt = self._resolve_collision(s, proposed)
        success = self.in_goal(nxt)
        if self.reward_mode == "dense":
            reward = -float(np.linalg.norm(nxt - self.goal.center))
        else:
            reward = 1.0 if success else 0.0
        return nxt, reward, success, success


def layout_to_dict(env):
    return {
        "walls": [[w.x0, w.y0, w.x1, w.y1] for w in env.walls],
        "start": [env.start.x0, env.start.y0, env.start.x1, env.start.y1],
        "goal": [env.goal.x0, env.goal.y0, env.goal.x1, env.goal.y1],
        "max_steps": env.max_steps,
    }


def maze_from_dict(obj, reward_mode="sparse"):
    return PointMaze(
        walls=[Rect(*w) for w in obj["walls"]],
        start=Rect(*obj["start"]),
        goal=Rect(*obj["goal"]),
        max_steps=int(obj["max_steps"]),
        reward_mode=reward_mode,
    )


BUILTIN_LAYOUTS = {
    # open arena, goal in the top-right corner
    "open": {
        "walls": [],
        "start": [0.4, 0.4, 0.6, 0.6],
        "goal": [0.8, 0.8, 0.95, 0.95],
        "max_steps": 60,
    },
    # one bar: run right along the bottom, around the gap, back left on top
    "umaze": {
        "walls": [[0.0, 0.45, 0.7, 0.55]],
        "start": [0.05, 0.08, 0.25, 0.25],
        "goal": [0.05, 0.75, 0.22, 0.92],
        "max_steps": 80,
    },
    # two bars forming an S-shaped corridor
    "medium": {
        "walls": [[0.3, 0.25, 1.0, 0.35], [0.0, 0.6, 0.7, 0.7]],
        "start": [0.05, 0.05, 0.2, 0.2],
        "goal": [0.8, 0.85, 0.95, 0.97],
        "max_steps": 120,
    },
    # three bars, longest detour
    "large": {
        "walls": [[0.2, 0.2, 1.0, 0.28], [0.0, 0.44, 0.8, 0.52], [0.2, 0.68, 1.0, 0.76]],
        "start": [0.05, 0.04, 0.15, 0.14],
        "goal": [0.85, 0.86, 0.95, 0.96],
        "max_steps": 200,
    },
}


def load_layout(name_or_path, reward_mode="sparse"):
    """Resolve a builtin layout name or parse a layout JSON file."""
    if name_or_path in BUILTIN_LAYOUTS:
        return maze_from_dict(BUILTIN_LAYOUTS[name_or_path], reward_mode)
    with open(name_or_path, "r", encoding="utf-8") as f:
        return maze_from_dict(json.load(f), reward_mode)


class RandomPolicy:
    kind = "random"

    def action(self, s, rng):
        return rng.uniform(-1.0, 1.0, size=2)


class WaypointExpert:
    """BFS over a coarse occupancy grid; steers toward the next-best cell center."""

    kind = "waypoint_expert"

    def __init__(self, env):
        self.env = env
        n = int(round(1.0 / GRID_RES))
        self.n = n
        blocked = np.zeros((n, n), dtype=bool)
        for i in range(n):
            for j in range(n):
                cell = Rect(i * GRID_RES, j * GRID_RES, (i + 1) * GRID_RES, (j + 1) * GRID_RES)
                blocked[i, j] = any(cell.overlaps(w) for w in env.walls)
        dist = np.full((n, n), np.inf)
        queue = deque()
        for i in range(n):
            for j in range(n):
                cell = Rect(i * GRID_RES, j * GRID_RES, (i + 1) * GRID_RES, (j + 1) * GRID_RES)
                if not blocked[i, j] and cell.overlaps(env.goal):
                    dist[i, j] = 0.0
                    queue.append((i, j))
        while queue:
            i, j = queue.popleft()
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if 0 <= ni < n and 0 <= nj < n and not blocked[ni, nj] and np.isinf(dist[ni, nj]):
                    dist[ni, nj] = dist[i, j] + 1.0
                    queue.append((ni, nj))
        self.blocked = blocked
        self.dist = dist

    def _cell(self, s):
        i = min(self.n - 1, max(0, int(s[0] / GRID_RES)))
        j = min(self.n - 1, max(0, int(s[1] / GRID_RES)))
        return i, j

    def _cell_center(self, i, j):
        return np.array([(i + 0.5) * GRID_RES, (j + 0.5) * GRID_RES])

    def action(self, s, rng):
        i, j = self._cell(s)
        if np.isinf(self.dist[i, j]):
            return np.zeros(2)
        if self.dist[i, j] == 0.0:
            target = self.env.goal.center
        else:
            best, target = self.dist[i, j], None
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if 0 <= ni < self.n and 0 <= nj < self.n and self.dist[ni, nj] < best:
                    best = self.dist[ni, nj]
                    target = self._cell_center(ni, nj)
            if target is None:
                target = self.env.goal.center
        return np.clip((target - s) / STEP_GAIN, -1.0, 1.0)


class NoisyExpert:
    """Waypoint expert that takes a uniform random action with probability epsilon."""

    kind = "noisy_expert"

    def __init__(self, env, epsilon):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        self.expert = WaypointExpert(env)
        self.epsilon = epsilon

    def action(self, s, rng):
        if rng.random() < self.epsilon:
            return rng.uniform(-1.0, 1.0, size=2)
        return self.expert.action(s, rng)


def make_policy(spec, env):
    """Parse a policy name: random | expert | waypoint_expert | noisy_expert(eps)."""
    if spec in ("random",):
        return RandomPolicy()
    if spec in ("expert", "waypoint_expert"):
        return WaypointExpert(env)
    if spec.startswith("noisy_expert(") and spec.endswith(")"):
        return NoisyExpert(env, float(spec[len("noisy_expert(") : -1]))
    raise ValueError(f"unknown policy {spec!r}")


def rollout(env, action_fn, rng):
    """One episode from a start-region reset; obeys env.max_steps."""
    s = env.reset(rng)
    observations = [s]
    actions, rewards, terminals = [], [], []
    success = False
    for t in range(env.max_steps):
        a = action_fn(s)
        s2, r, goal, _ = env.step(s, a)
        actions.append(np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0))
        rewards.append(r)
        done = goal or t == env.max_steps - 1
        terminals.append(done)
        observations.append(s2)
        s = s2
        if goal:
            success = True
            break
    return Trajectory(
        np.asarray(observations),
        np.asarray(actions),
        np.asarray(rewards, dtype=np.float64),
        np.asarray(terminals, dtype=bool),
        success=success,
    )


def generate_dataset(env, policy, episodes, rng):
    """Seeded rollouts of one behavior policy."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    trajs = [rollout(env, lambda s: policy.action(s, rng), rng) for _ in range(episodes)]
    return from_trajectories(trajs)


def generate_mixture(env, mix, episodes, rng):
    """Concatenate rollouts of several policies.

    mix: list of (policy, fraction); fractions are normalized and episode
    counts assigned by largest remainder, so the split is deterministic.
    """
    total_frac = sum(f for _, f in mix)
    fracs = [f / total_frac for _, f in mix]
    counts = [int(np.floor(f * episodes)) for f in fracs]
    remainders = [f * episodes - c for f, c in zip(fracs, counts)]
    for _ in range(episodes - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    parts = []
    for (policy, _), count in zip(mix, counts):
        if count > 0:
            parts.append(generate_dataset(env, policy, count, rng))
    trajs = [t for p in parts for t in p.trajectories]
    return from_trajectories(trajs)


@dataclass
class EvalResult:
    mean_return: float
    success_rate: float
    episodes: list = field(default_factory=list)


def evaluate(env, agent, episodes, rng, deterministic=True):
    """Roll a trained agent; per-episode records retained."""
    from .offline_rl import act

    records = []
    for _ in range(episodes):
        traj = rollout(env, lambda s: act(agent, s, deterministic=deterministic), rng)
        records.append(
            {
                "return": traj.episode_return(),
                "steps": len(traj),
                "success": bool(traj.success),
                "final_state": traj.observations[-1].tolist(),
            }
        )
    mean_return = float(np.mean([r["return"] for r in records]))
    success_rate = float(np.mean([r["success"] for r in records]))
    return EvalResult(mean_return, success_rate, records)
