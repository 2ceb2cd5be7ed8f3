"""Unsupervised skill discovery: cluster transitions, treat each cluster as
its own expert set, and run one relabel+IQL pipeline per cluster."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import cvae as cvae_mod
from . import envs, offline_rl, reward
from .dataset import Trajectory, from_trajectories
from .numerics import adam_init, adam_step
from .pipeline import STAGE_EVAL, RewardConfig, run_offline_il, spawn_rng, train_iql


@dataclass
class KmeansResult:
    centroids: np.ndarray  # (k, feature_dim)
    assignments: np.ndarray  # (n,)
    inertia: float
    inertia_history: list  # per Lloyd iteration of the winning init


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    inertia: float
    inertia_history: list

    @property
    def counts(self):
        return np.bincount(self.assignments, minlength=self.k)


@dataclass
class SkillsConfig:
    k: int = 8  # paper-scale runs use 100
    mode: str = "shared_finetune"  # shared_finetune | per_cluster
    pretrain_iterations: int | None = None  # defaults to cvae iterations
    finetune_iterations: int | None = None  # defaults to cvae iterations // 2
    min_cluster_fraction: float = 0.005
    kmeans_max_iter: int = 300
    kmeans_n_init: int = 1


def _sq_dists(points, centroids):
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)


def _kmeans_pp_seed(points, k, rng):
    n = points.shape[0]
    chosen = [int(rng.integers(0, n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=-1)
    for _ in range(k - 1):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass on already-chosen points (duplicates); take
            # the first unchosen index deterministically
            leftovers = [i for i in range(n) if i not in set(chosen)]
            nxt = leftovers[0]
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=-1))
    return points[chosen].copy()


def kmeans(points, k, max_iter=300, n_init=1, rng=None):
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are repaired by reseeding at the point farthest from its
    assigned centroid. Inertia is recorded once per Lloyd iteration (after
    assignment), and is non-increasing along the run.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-D array")
    if k < 2:
        raise ValueError("k must be >= 2")
    if points.shape[0] < k:
        raise ValueError(f"need at least k={k} points, got {points.shape[0]}")
    if rng is None:
        rng = np.random.default_rng(1)

    best = None
    for _ in range(max(1, n_init)):
        centroids = _kmeans_pp_seed(points, k, rng)
        assignments = np.zeros(points.shape[0], dtype=int)
        history = []
        for _ in range(max_iter):
            d2 = _sq_dists(points, centroids)
            new_assign = d2.argmin(axis=1)
            inertia = float(d2[np.arange(points.shape[0]), new_assign].sum())
            history.append(inertia)
            counts = np.bincount(new_assign, minlength=k)
            if np.any(counts == 0):
                # farthest point from its centroid reseeds each empty cluster
                dist_to_own = d2[np.arange(points.shape[0]), new_assign]
                order = np.argsort(-dist_to_own)
                used = 0
                for cid in np.flatnonzero(counts == 0):
                    centroids[cid] = points[order[used]]
                    used += 1
                continue
            if history and len(history) > 1 and np.array_equal(new_assign, assignments):
                assignments = new_assign
                break
            assignments = new_assign
            for cid in range(k):
                centroids[cid] = points[assignments == cid].mean(axis=0)
        result = KmeansResult(centroids.copy(), assignments.copy(), history[-1], history)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def transition_features(dataset):
    """z-scored concat(s, a, s') rows plus the stats used."""
    flat = dataset.flat()
    feats = np.concatenate([flat.states, flat.actions, flat.next_states], axis=-1)
    mean = feats.mean(axis=0)
    std = np.maximum(feats.std(axis=0), 1e-6)
    return (feats - mean) / std, mean, std


def cluster_transitions(dataset, k, config=None, rng=None):
    """K-means over normalized (s, a, s') features of every transition."""
    config = config or SkillsConfig(k=k)
    feats, mean, std = transition_features(dataset)
    result = kmeans(feats, k, max_iter=config.kmeans_max_iter, n_init=config.kmeans_n_init, rng=rng)
    return ClusterModel(
        k=k,
        centroids=result.centroids,
        assignments=result.assignments,
        feature_mean=mean,
        feature_std=std,
        inertia=result.inertia,
        inertia_history=result.inertia_history,
    )


def cluster_to_expert(cluster_model, dataset, cluster_id):
    """That cluster's transitions as single-transition trajectories, dataset order."""
    mask = cluster_model.assignments == cluster_id
    if not np.any(mask):
        raise ValueError(f"cluster {cluster_id} is empty")
    flat = dataset.flat()
    trajs = []
    for i in np.flatnonzero(mask):
        obs = np.stack([flat.states[i], flat.next_states[i]])
        acts = flat.actions[i][None, :]
        trajs.append(
            Trajectory(obs, acts, None, np.array([bool(flat.terminals[i])]), success=None)
        )
    return from_trajectories(trajs)


@dataclass
class SkillEntry:
    cluster_id: int
    labeler: object | None = None
    agent: object | None = None
    eval_result: object | None = None
    transition_count: int = 0
    error: str | None = None


@dataclass
class SkillLibrary:
    entries: list
    cluster_model: ClusterModel | None
    seed: int

    def successful(self):
        return [e for e in self.entries if e.error is None]


def _finetune_cvae(model, mixed, expert, cvae_cfg, iterations, rng):
    cfg = replace(cvae_cfg, iterations=iterations)
    return cvae_mod.train(model, mixed, expert, cfg, rng)


def learn_skills(dataset, k, cvae_cfg, reward_cfg, iql_cfg, seed, skills_cfg=None, eval_env=None, eval_episodes=10):
    """Cluster the reward-free data and train one skill per retained cluster.

    k=1 degenerates to plain offline IL with the whole dataset as expert
    (same seed, bit-identical rewards). Per-cluster failures are recorded and
    the remaining clusters proceed.
    """
    skills_cfg = skills_cfg or SkillsConfig(k=k)
    if k == 1:
        result = run_offline_il(dataset, dataset, cvae_cfg, reward_cfg, iql_cfg, seed, eval_env, eval_episodes)
        entry = SkillEntry(
            cluster_id=0,
            labeler=result.labeler,
            agent=result.agent,
            eval_result=result.eval_result,
            transition_count=dataset.n_transitions,
        )
        return SkillLibrary([entry], None, seed)

    cm = cluster_transitions(dataset, k, skills_cfg, spawn_rng(seed, 10))
    n = dataset.n_transitions
    min_count = max(1, int(np.ceil(skills_cfg.min_cluster_fraction * n)))

    shared_model = None
    if skills_cfg.mode == "shared_finetune":
        pretrain_iters = skills_cfg.pretrain_iterations or cvae_cfg.iterations
        pretrain_cfg = replace(cvae_cfg, calibration_weight=0.0, iterations=pretrain_iters)
        rng = spawn_rng(seed, 11)
        shared_model = cvae_mod.init_cvae(dataset.state_dim, dataset.action_dim, pretrain_cfg, rng)
        cvae_mod.train(shared_model, dataset, dataset, pretrain_cfg, rng)

    entries = []
    for cid in range(k):
        count = int(cm.counts[cid])
        if count < min_count:
            warnings.warn(f"cluster {cid} has {count} transitions (< {min_count}); skipped")
            continue
        entry = SkillEntry(cluster_id=cid, transition_count=count)
        try:
            expert = cluster_to_expert(cm, dataset, cid)
            if skills_cfg.mode == "shared_finetune":
                finetune_iters = skills_cfg.finetune_iterations or max(1, cvae_cfg.iterations // 2)
                model = shared_model.copy()
                _finetune_cvae(model, dataset, expert, cvae_cfg, finetune_iters, spawn_rng(seed, 12, cid))
                labeler = reward.make_labeler(
                    model, expert, temperature=reward_cfg.temperature, sampling_mode=reward_cfg.sampling_mode
                )
                relabeled = reward.relabel(labeler, dataset)
                agent, _, _ = train_iql(relabeled, iql_cfg, int(spawn_rng(seed, 13, cid).integers(0, 2**31)))
                eval_result = None
                if eval_env is not None:
                    eval_result = envs.evaluate(
                        eval_env, agent, eval_episodes, spawn_rng(seed, STAGE_EVAL, 100 + cid)
                    )
                entry.labeler = labeler
                entry.agent = agent
                entry.eval_result = eval_result
            else:  # per_cluster: the full IL pipeline from scratch
                result = run_offline_il(
                    dataset, expert, cvae_cfg, reward_cfg, iql_cfg,
                    int(spawn_rng(seed, 14, cid).integers(0, 2**31)), eval_env, eval_episodes,
                )
                entry.labeler = result.labeler
                entry.agent = result.agent
                entry.eval_result = result.eval_result
        except Exception as exc:  # noqa: BLE001 - per-cluster isolation is the contract
            entry.error = f"{type(exc).__name__}: {exc}"
            warnings.warn(f"cluster {cid} failed: {entry.error}")
        entries.append(entry)
    return SkillLibrary(entries, cm, seed)


def quadrant(point, center=(0.5, 0.5)):
    """Quadrant index 0..3 of a 2-D point around the arena center."""
    return int(point[0] >= center[0]) + 2 * int(point[1] >= center[1])


def terminal_quadrants(library):
    """Majority terminal quadrant per successful skill (2-D envs)."""
    out = {}
    for entry in library.successful():
        if entry.eval_result is None:
            continue
        quads = [quadrant(rec["final_state"]) for rec in entry.eval_result.episodes]
        values, counts = np.unique(quads, return_counts=True)
        out[entry.cluster_id] = int(values[counts.argmax()])
    return out


def diversity_matrix(library):
    """Pairwise distances between mean final states of the skills."""
    entries = [e for e in library.successful() if e.eval_result is not None]
    means = {
        e.cluster_id: np.mean([rec["final_state"] for rec in e.eval_result.episodes], axis=0)
        for e in entries
    }
    rows = []
    ids = sorted(means)
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            rows.append((a, b, float(np.linalg.norm(means[a] - means[b]))))
    return rows


def save_library(library, root):
    """Directory layout: <root>/<cluster_id>/{cvae.ckpt, agent.ckpt, anchor.json,
    eval.csv} plus <root>/clusters.json."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for entry in library.entries:
        sub = root / str(entry.cluster_id)
        sub.mkdir(parents=True, exist_ok=True)
        if entry.error is not None:
            (sub / "error.txt").write_text(entry.error + "\n", encoding="utf-8")
            continue
        cvae_mod.save_cvae(entry.labeler.model, sub / "cvae.ckpt",
                           default_temperature=entry.labeler.temperature)
        offline_rl.save_agent(entry.agent, sub / "agent.ckpt")
        anchor = {
            "anchor": entry.labeler.anchor.tolist(),
            "temperature": entry.labeler.temperature,
            "sampling_mode": entry.labeler.sampling_mode,
            "transition_count": entry.transition_count,
        }
        (sub / "anchor.json").write_text(json.dumps(anchor, sort_keys=True, indent=2) + "\n")
        with open(sub / "eval.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["episode", "return", "steps", "success", "final_state"])
            if entry.eval_result is not None:
                for i, rec in enumerate(entry.eval_result.episodes):
                    writer.writerow(
                        [i, repr(rec["return"]), rec["steps"], int(rec["success"]),
                         json.dumps(rec["final_state"])]
                    )
    clusters = {
        "k": library.cluster_model.k if library.cluster_model else 1,
        "seed": library.seed,
        "centroids": library.cluster_model.centroids.tolist() if library.cluster_model else [],
        "feature_mean": library.cluster_model.feature_mean.tolist() if library.cluster_model else [],
        "feature_std": library.cluster_model.feature_std.tolist() if library.cluster_model else [],
        "counts": library.cluster_model.counts.tolist() if library.cluster_model else [],
        "inertia": library.cluster_model.inertia if library.cluster_model else None,
    }
    (root / "clusters.json").write_text(json.dumps(clusters, sort_keys=True, indent=2) + "\n")
