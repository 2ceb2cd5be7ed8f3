"""Implicit Q-Learning on flat transition batches.

Update order per step: (1) value net via expectile regression of the min
target-Q onto V(s); (2) twin Q nets toward r + discount * (1 - terminal) *
V(s'); (3) policy via advantage-weighted regression with clipped weights;
(4) polyak target update. Single-threaded and seed-deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .dataset import compute_returns
from .numerics import Mlp, TrainingDivergedError, adam_init, adam_step, init_mlp

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)


class DegenerateReturnRangeError(ValueError):
    pass


@dataclass
class IqlConfig:
    expectile: float = 0.7
    awr_temperature: float = 3.0
    discount: float = 0.99
    polyak: float = 0.005
    learning_rate: float = 3e-4
    batch_size: int = 256
    hidden: tuple = (256, 256)
    dropout: float = 0.0
    steps: int = 20_000  # paper-scale runs use 1M
    awr_weight_clip: float = 100.0
    reward_scale_mode: str = "return_range"  # none | return_range
    # added after scaling; -1 reproduces the reference IQL maze-task shift that
    # makes goal termination attractive under nonnegative rewards
    reward_shift: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.expectile < 1.0:
            raise ValueError("expectile must lie in (0, 1)")
        if self.awr_temperature <= 0.0:
            raise ValueError("awr_temperature must be positive")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if not 0.0 < self.polyak < 1.0:
            raise ValueError("polyak rate must lie in (0, 1)")


@dataclass
class RewardScaler:
    scale: float = 1.0
    mode: str = "none"  # none | return_range

    def apply(self, rewards):
        if self.mode == "none":
            return rewards
        return rewards * self.scale


def fit_reward_scaler(dataset):
    """scale = 1000 / (max_return - min_return); degenerate range raises."""
    _, rmin, rmax = compute_returns(dataset)
    if rmax <= rmin:
        raise DegenerateReturnRangeError(
            f"all returns equal ({rmin}); fall back to RewardScaler(mode='none')"
        )
    return RewardScaler(scale=1000.0 / (rmax - rmin), mode="return_range")


def expectile_loss(u, expectile):
    """|tau - 1(u < 0)| * u^2, elementwise."""
    u = np.asarray(u, dtype=np.float64)
    weight = np.abs(expectile - (u < 0.0).astype(np.float64))
    out = weight * u * u
    return float(out) if out.ndim == 0 else out


@dataclass
class IqlAgent:
    value_net: Mlp
    q1: Mlp
    q2: Mlp
    target_q1: Mlp
    target_q2: Mlp
    policy: Mlp  # tanh-squashed action mean
    policy_log_std: np.ndarray  # state-independent, clamped
    config: IqlConfig
    state_dim: int
    action_dim: int
    opt_v: object = field(default=None, repr=False)
    opt_q1: object = field(default=None, repr=False)
    opt_q2: object = field(default=None, repr=False)
    opt_pi: object = field(default=None, repr=False)


def init_agent(state_dim, action_dim, config, rng):
    hidden = list(config.hidden)
    value_net = init_mlp([state_dim, *hidden, 1], rng)
    q1 = init_mlp([state_dim + action_dim, *hidden, 1], rng)
    q2 = init_mlp([state_dim + action_dim, *hidden, 1], rng)
    policy = init_mlp([state_dim, *hidden, action_dim], rng, output_activation="tanh")
    agent = IqlAgent(
        value_net=value_net,
        q1=q1,
        q2=q2,
        target_q1=q1.copy(),
        target_q2=q2.copy(),
        policy=policy,
        policy_log_std=np.zeros(action_dim),
        config=config,
        state_dim=state_dim,
        action_dim=action_dim,
    )
    agent.opt_v = adam_init(value_net.params(), config.learning_rate)
    agent.opt_q1 = adam_init(q1.params(), config.learning_rate)
    agent.opt_q2 = adam_init(q2.params(), config.learning_rate)
    agent.opt_pi = adam_init(policy.params() + [agent.policy_log_std], config.learning_rate)
    return agent


def _sa(states, actions):
    return np.concatenate([states, actions], axis=-1)


def min_target_q(agent, states, actions):
    """Clipped double-Q estimate from the target networks."""
    sa = _sa(states, actions)
    q1 = agent.target_q1.forward(sa)[:, 0]
    q2 = agent.target_q2.forward(sa)[:, 0]
    return np.minimum(q1, q2)


def td_target(agent, rewards, next_states, terminals):
    """r + discount * (1 - terminal) * V(s'), with V from the online value net."""
    v_next = agent.value_net.forward(next_states)[:, 0]
    keep = 1.0 - terminals.astype(np.float64)
    return rewards + agent.config.discount * keep * v_next


def awr_weights(agent, states, actions):
    """exp(temperature * advantage) clipped at awr_weight_clip, overflow-safe."""
    adv = min_target_q(agent, states, actions) - agent.value_net.forward(states)[:, 0]
    capped = np.minimum(
        agent.config.awr_temperature * adv, math.log(agent.config.awr_weight_clip)
    )
    return np.exp(capped)


def gaussian_log_prob(actions, mean, std):
    """Diagonal Gaussian log-density of dataset actions under the policy."""
    z = (actions - mean) / std
    return -0.5 * np.sum(z * z + 2.0 * np.log(std) + LOG_2PI, axis=-1)


def _policy_log_std(agent):
    return np.clip(agent.policy_log_std, LOG_STD_MIN, LOG_STD_MAX)


def train_step(agent, batch, rng=None):
    """One IQL update on a batch dict; returns the three losses."""
    cfg = agent.config
    states, actions = batch["states"], batch["actions"]
    rewards, next_states = batch["rewards"], batch["next_states"]
    terminals = batch["terminals"]
    n = states.shape[0]

    # (1) value: expectile-regress min target-Q onto V
    q_min = min_target_q(agent, states, actions)
    v, v_cache = agent.value_net.forward_cached(states)
    u = q_min - v[:, 0]
    asym = np.abs(cfg.expectile - (u < 0.0).astype(np.float64))
    v_loss = float(np.mean(asym * u * u))
    gv = (-2.0 * asym * u / n)[:, None]
    v_grads, _ = agent.value_net.backward_from_cache(v_cache, gv)
    adam_step(agent.value_net.params(), v_grads, agent.opt_v)

    # (2) twin Q toward the TD target (updated V, fixed while fitting Q)
    y = td_target(agent, rewards, next_states, terminals)
    sa = _sa(states, actions)
    q_losses = []
    for net, opt in ((agent.q1, agent.opt_q1), (agent.q2, agent.opt_q2)):
        q, cache = net.forward_cached(sa)
        diff = q[:, 0] - y
        q_losses.append(float(np.mean(diff**2)))
        grads, _ = net.backward_from_cache(cache, (2.0 * diff / n)[:, None])
        adam_step(net.params(), grads, opt)
    q_loss = float(np.mean(q_losses))

    # (3) policy: advantage-weighted regression (weights are stop-grad)
    w = awr_weights(agent, states, actions)
    masks = None
    if cfg.dropout > 0.0:
        if rng is None:
            raise ValueError("dropout needs an rng")
        keep = 1.0 - cfg.dropout
        masks = [
            (rng.random((n, width)) < keep).astype(np.float64) / keep
            for width in agent.policy.layer_sizes[1:-1]
        ]
    mean, pi_cache = agent.policy.forward_cached(states, hidden_masks=masks)
    log_std = _policy_log_std(agent)
    std = np.exp(log_std)
    z = (actions - mean) / std
    log_prob = -0.5 * np.sum(z * z + 2.0 * log_std + LOG_2PI, axis=-1)
    pi_loss = float(np.mean(-w * log_prob))
    g_mean = (w[:, None] * (mean - actions) / (std**2)) / n
    pi_grads, _ = agent.policy.backward_from_cache(pi_cache, g_mean)
    clamp = ((agent.policy_log_std > LOG_STD_MIN) & (agent.policy_log_std < LOG_STD_MAX)).astype(
        np.float64
    )
    g_log_std = np.mean(w[:, None] * (1.0 - z * z), axis=0) * clamp
    adam_step(agent.policy.params() + [agent.policy_log_std], pi_grads + [g_log_std], agent.opt_pi)

    # (4) polyak targets
    for online, target in ((agent.q1, agent.target_q1), (agent.q2, agent.target_q2)):
        for p, tp in zip(online.params(), target.params()):
            tp *= 1.0 - cfg.polyak
            tp += cfg.polyak * p

    losses = {"v_loss": v_loss, "q_loss": q_loss, "pi_loss": pi_loss}
    if not all(np.isfinite(v) for v in losses.values()):
        raise TrainingDivergedError(f"non-finite IQL loss: {losses}")
    return losses


def train(agent, dataset, steps, rng, reward_scaler=None, eval_fn=None, eval_every=None, log_every=500):
    """Run IQL for a step budget; returns the curve rows.

    eval_fn(agent, snapshot_index) -> (mean_return, success_rate) is called
    every eval_every steps when provided. Rows carry running-mean losses; the
    eval columns are None between snapshots.
    """
    flat = dataset.flat()
    if flat.rewards is None:
        raise ValueError("IQL needs a labeled (or relabeled) dataset")
    rewards = flat.rewards
    if reward_scaler is not None:
        rewards = reward_scaler.apply(rewards)
    if agent.config.reward_shift != 0.0:
        rewards = rewards + agent.config.reward_shift
    terminals = flat.terminals.astype(np.float64)

    curves = []
    acc = {"v_loss": 0.0, "q_loss": 0.0, "pi_loss": 0.0}
    acc_n = 0
    snapshots = 0
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(flat), size=agent.config.batch_size)
        batch = {
            "states": flat.states[idx],
            "actions": flat.actions[idx],
            "rewards": rewards[idx],
            "next_states": flat.next_states[idx],
            "terminals": terminals[idx],
        }
        try:
            losses = train_step(agent, batch, rng)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(str(exc), report=curves) from exc
        for k in acc:
            acc[k] += losses[k]
        acc_n += 1
        should_log = step % log_every == 0 or step == steps
        should_eval = eval_fn is not None and eval_every and (step % eval_every == 0 or step == steps)
        if should_log or should_eval:
            row = {"step": step}
            row.update({k: acc[k] / acc_n for k in acc})
            if should_eval:
                snapshots += 1
                ret, succ = eval_fn(agent, snapshots)
                row["eval_return"] = ret
                row["eval_success_rate"] = succ
            else:
                row["eval_return"] = None
                row["eval_success_rate"] = None
            curves.append(row)
            acc = {k: 0.0 for k in acc}
            acc_n = 0
    return curves


def act(agent, state, deterministic=True, rng=None):
    """Policy action clipped to the [-1, 1] bounds."""
    mean = agent.policy.forward(np.asarray(state, dtype=np.float64))
    if deterministic:
        return np.clip(mean, -1.0, 1.0)
    if rng is None:
        raise ValueError("stochastic act needs an rng")
    std = np.exp(_policy_log_std(agent))
    return np.clip(mean + std * rng.standard_normal(mean.shape), -1.0, 1.0)


def save_agent(agent, path):
    """Six-network binary checkpoint plus a JSON sidecar of hyperparameters."""
    numerics.save_mlps(
        path,
        [agent.value_net, agent.q1, agent.q2, agent.target_q1, agent.target_q2, agent.policy],
    )
    cfg = agent.config
    sidecar = {
        "state_dim": agent.state_dim,
        "action_dim": agent.action_dim,
        "expectile": cfg.expectile,
        "awr_temperature": cfg.awr_temperature,
        "discount": cfg.discount,
        "polyak": cfg.polyak,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "hidden": list(cfg.hidden),
        "dropout": cfg.dropout,
        "steps": cfg.steps,
        "awr_weight_clip": cfg.awr_weight_clip,
        "reward_scale_mode": cfg.reward_scale_mode,
        "reward_shift": cfg.reward_shift,
        "policy_log_std": agent.policy_log_std.tolist(),
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, sort_keys=True, indent=2)
        f.write("\n")


def load_agent(path):
    with open(str(path) + ".json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    acts = [("relu", "identity")] * 5 + [("relu", "tanh")]
    nets = numerics.load_mlps(path, activations=acts)
    config = IqlConfig(
        expectile=sidecar["expectile"],
        awr_temperature=sidecar["awr_temperature"],
        discount=sidecar["discount"],
        polyak=sidecar["polyak"],
        learning_rate=sidecar["learning_rate"],
        batch_size=sidecar["batch_size"],
        hidden=tuple(sidecar["hidden"]),
        dropout=sidecar["dropout"],
        steps=sidecar["steps"],
        awr_weight_clip=sidecar["awr_weight_clip"],
        reward_scale_mode=sidecar["reward_scale_mode"],
        reward_shift=sidecar.get("reward_shift", 0.0),
    )
    agent = IqlAgent(
        value_net=nets[0],
        q1=nets[1],
        q2=nets[2],
        target_q1=nets[3],
        target_q2=nets[4],
        policy=nets[5],
        policy_log_std=np.asarray(sidecar["policy_log_std"], dtype=np.float64),
        config=config,
        state_dim=int(sidecar["state_dim"]),
        action_dim=int(sidecar["action_dim"]),
    )
    agent.opt_v = adam_init(agent.value_net.params(), config.learning_rate)
    agent.opt_q1 = adam_init(agent.q1.params(), config.learning_rate)
    agent.opt_q2 = adam_init(agent.q2.params(), config.learning_rate)
    agent.opt_pi = adam_init(agent.policy.params() + [agent.policy_log_std], config.learning_rate)
    return agent
