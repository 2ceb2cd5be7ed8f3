"""End-to-end pipeline plumbing shared by the CLI, the skills module, and
the experiment scripts: CVAE training, labeler construction, relabeling,
IQL training, and the paired sparse-vs-relabeled harness."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import cvae as cvae_mod
from . import envs, offline_rl, reward
from .dataset import concat, filter_expert_by_success
from .offline_rl import DegenerateReturnRangeError, RewardScaler


def spawn_rng(seed, *path):
    """Deterministic child generator for a (seed, stage...) coordinate."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(p) for p in path]]))


# rng stage tags (keep stable: they define the reproducible stream layout)
STAGE_CVAE = 1
STAGE_IQL = 2
STAGE_EVAL = 3
STAGE_DATA = 4


@dataclass
class RewardConfig:
    temperature: float = 6.0
    sampling_mode: str = "mean"  # mean | sample


@dataclass
class PipelineResult:
    model: object
    train_report: object
    labeler: object
    relabeled: object
    agent: object
    curves: list
    eval_result: object | None = None


def train_cvae(mixed, expert, cvae_cfg, seed):
    """Init + train a CVAE on the mixed pool with expert calibration batches."""
    rng = spawn_rng(seed, STAGE_CVAE)
    if cvae_cfg.exclude_expert_from_mixed:
        expert_ids = {id(t) for t in expert.trajectories}
        kept = [t for t in mixed.trajectories if id(t) not in expert_ids]
        if kept:
            from .dataset import from_trajectories

            mixed = from_trajectories(kept)
    model = cvae_mod.init_cvae(mixed.state_dim, mixed.action_dim, cvae_cfg, rng)
    report = cvae_mod.train(model, mixed, expert, cvae_cfg, rng)
    return model, report


def train_iql(data, iql_cfg, seed, eval_env=None, eval_episodes=10, eval_every=None):
    """Fit the reward scaler per config, train IQL, optionally snapshot evals."""
    scaler = RewardScaler()
    if iql_cfg.reward_scale_mode == "return_range":
        try:
            scaler = offline_rl.fit_reward_scaler(data)
        except DegenerateReturnRangeError:
            warnings.warn("degenerate return range; training on unscaled rewards")
    agent = offline_rl.init_agent(data.state_dim, data.action_dim, iql_cfg, spawn_rng(seed, STAGE_IQL, 0))
    train_rng = spawn_rng(seed, STAGE_IQL, 1)
    eval_fn = None
    if eval_env is not None and eval_every:
        def eval_fn(agent_now, snapshot):
            result = envs.evaluate(eval_env, agent_now, eval_episodes, spawn_rng(seed, STAGE_EVAL, snapshot))
            return result.mean_return, result.success_rate

    curves = offline_rl.train(
        agent, data, iql_cfg.steps, train_rng, reward_scaler=scaler,
        eval_fn=eval_fn, eval_every=eval_every,
    )
    return agent, curves, scaler


def run_offline_il(mixed, expert, cvae_cfg, reward_cfg, iql_cfg, seed, eval_env=None, eval_episodes=10):
    """Full relabeling pipeline: CVAE -> anchor -> relabel -> IQL -> eval."""
    model, report = train_cvae(mixed, expert, cvae_cfg, seed)
    labeler = reward.make_labeler(
        model, expert, temperature=reward_cfg.temperature, sampling_mode=reward_cfg.sampling_mode
    )
    label_rng = spawn_rng(seed, STAGE_CVAE, 99) if reward_cfg.sampling_mode == "sample" else None
    relabeled = reward.relabel(labeler, mixed, label_rng)
    agent, curves, _ = train_iql(relabeled, iql_cfg, seed)
    eval_result = None
    if eval_env is not None:
        eval_result = envs.evaluate(eval_env, agent, eval_episodes, spawn_rng(seed, STAGE_EVAL, 0))
    return PipelineResult(model, report, labeler, relabeled, agent, curves, eval_result)


def run_sparse_baseline(data, iql_cfg, seed, eval_env=None, eval_episodes=10):
    """IQL straight on the dataset's own (sparse) rewards; rng layout matches
    run_offline_il so paired comparisons share seeds stage-for-stage."""
    agent, curves, _ = train_iql(data, iql_cfg, seed)
    eval_result = None
    if eval_env is not None:
        eval_result = envs.evaluate(eval_env, agent, eval_episodes, spawn_rng(seed, STAGE_EVAL, 0))
    return agent, curves, eval_result


def uplift_pair(data, expert_k, cvae_cfg, reward_cfg, iql_cfg, seed, eval_env, eval_episodes=10):
    """One paired {sparse IQL} vs {relabeled IQL} run on the same data/seed."""
    expert, _ = filter_expert_by_success(data, expert_k)
    relabeled_run = run_offline_il(
        data, expert, cvae_cfg, reward_cfg, iql_cfg, seed, eval_env, eval_episodes
    )
    _, _, sparse_eval = run_sparse_baseline(data, iql_cfg, seed, eval_env, eval_episodes)
    return {
        "seed": seed,
        "sparse_return": sparse_eval.mean_return,
        "sparse_success": sparse_eval.success_rate,
        "relabeled_return": relabeled_run.eval_result.mean_return,
        "relabeled_success": relabeled_run.eval_result.success_rate,
    }


def generate_mixture_dataset(env, mix_spec, episodes, seed):
    """Parse 'name:frac,name:frac' and roll the mixture deterministically."""
    mix = []
    for part in mix_spec.split(","):
        name, _, frac = part.rpartition(":")
        if not name:
            raise ValueError(f"mix entry {part!r} must be policy:fraction")
        mix.append((envs.make_policy(name.strip(), env), float(frac)))
    return envs.generate_mixture(env, mix, episodes, spawn_rng(seed, STAGE_DATA))
