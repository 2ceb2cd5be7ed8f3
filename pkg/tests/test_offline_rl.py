import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clue.dataset import Trajectory, from_trajectories
from clue.envs import evaluate
from clue.offline_rl import (
    DegenerateReturnRangeError,
    IqlConfig,
    RewardScaler,
    act,
    awr_weights,
    expectile_loss,
    fit_reward_scaler,
    init_agent,
    load_agent,
    min_target_q,
    save_agent,
    td_target,
    train,
    train_step,
)


def small_config(**kw):
    base = dict(hidden=(32, 32), batch_size=64, learning_rate=3e-3, steps=200)
    base.update(kw)
    return IqlConfig(**base)


# --- expectile loss -------------------------------------------------------


def test_expectile_symmetric_case():
    assert expectile_loss(2.0, 0.5) == 2.0


def test_expectile_downside():
    assert abs(expectile_loss(-1.0, 0.9) - 0.1) < 1e-15


def test_expectile_upside():
    assert abs(expectile_loss(1.0, 0.9) - 0.9) < 1e-15


@settings(max_examples=100, deadline=None)
@given(st.floats(-100, 100, allow_nan=False))
def test_expectile_half_is_half_square(u):
    assert expectile_loss(u, 0.5) == pytest.approx(u * u / 2.0, rel=1e-12, abs=1e-300)


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50), st.floats(0.01, 0.99))
def test_expectile_reflection_identity(u, tau):
    assert expectile_loss(u, tau) == pytest.approx(expectile_loss(-u, 1.0 - tau), rel=1e-12, abs=1e-300)


# --- reward scaling -------------------------------------------------------


def _return_dataset(returns):
    trajs = []
    for r in returns:
        obs = np.zeros((2, 1))
        acts = np.zeros((1, 1))
        trajs.append(Trajectory(obs, acts, np.array([float(r)]), np.array([True])))
    return from_trajectories(trajs)


def test_scaler_zero_to_ten():
    scaler = fit_reward_scaler(_return_dataset([0.0, 10.0, 3.0]))
    assert scaler.scale == 100.0
    assert scaler.mode == "return_range"


def test_scaler_symmetric_range():
    assert fit_reward_scaler(_return_dataset([-5.0, 5.0])).scale == 100.0


def test_scaler_matches_returns_oracle():
    rng = np.random.default_rng(0)
    trajs = []
    for _ in range(20):
        steps = int(rng.integers(2, 9))
        obs = rng.uniform(0, 1, (steps + 1, 2))
        acts = rng.uniform(-1, 1, (steps, 2))
        rewards = rng.standard_normal(steps)
        trajs.append(Trajectory(obs, acts, rewards, np.zeros(steps, dtype=bool)))
    data = from_trajectories(trajs)
    oracle = [float(t.rewards.sum()) for t in data.trajectories]
    expected = 1000.0 / (max(oracle) - min(oracle))
    assert fit_reward_scaler(data).scale == expected


def test_scaler_degenerate_range_raises():
    with pytest.raises(DegenerateReturnRangeError):
        fit_reward_scaler(_return_dataset([2.0, 2.0, 2.0]))


def test_scaler_apply_modes():
    r = np.array([1.0, 2.0])
    assert np.array_equal(RewardScaler(50.0, "return_range").apply(r), r * 50.0)
    assert np.array_equal(RewardScaler(50.0, "none").apply(r), r)


# --- single-step mechanics --------------------------------------------------


def _batch_from(dataset, scale=1.0):
    flat = dataset.flat()
    return {
        "states": flat.states,
        "actions": flat.actions,
        "rewards": flat.rewards * scale,
        "next_states": flat.next_states,
        "terminals": flat.terminals.astype(np.float64),
    }


def _three_transition_dataset():
    obs = np.array([[0.0, 0.0], [0.3, 0.1], [0.5, 0.5], [0.9, 0.9]])
    acts = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.5]])
    rewards = np.array([0.2, -0.4, 1.0])
    return from_trajectories([Trajectory(obs, acts, rewards, np.array([False, False, True]))])


def test_gamma_zero_q_converges_to_reward():
    data = _three_transition_dataset()
    cfg = small_config(discount=1e-12, expectile=0.5, polyak=0.05)
    # discount 0 exactly is outside (0, 1]; 1e-12 is numerically identical here
    agent = init_agent(2, 2, cfg, np.random.default_rng(0))
    batch = _batch_from(data)
    for _ in range(1500):
        train_step(agent, batch)
    flat = data.flat()
    q = agent.q1.forward(np.concatenate([flat.states, flat.actions], axis=-1))[:, 0]
    np.testing.assert_allclose(q, flat.rewards, atol=1e-2)


def test_td_target_excludes_value_on_terminal():
    agent = init_agent(2, 2, small_config(), np.random.default_rng(1))
    rewards = np.array([0.7, 0.7])
    next_states = np.array([[0.5, 0.5], [0.5, 0.5]])
    terminals = np.array([1.0, 0.0])
    y = td_target(agent, rewards, next_states, terminals)
    assert y[0] == 0.7
    v = agent.value_net.forward(next_states)[0, 0]
    assert y[1] == 0.7 + agent.config.discount * v


def test_awr_weight_is_one_when_q_equals_v():
    agent = init_agent(2, 2, small_config(), np.random.default_rng(2))
    for net in (agent.value_net, agent.target_q1, agent.target_q2):
        for p in net.params():
            p[:] = 0.0
    w = awr_weights(agent, np.zeros((4, 2)), np.zeros((4, 2)))
    np.testing.assert_array_equal(w, np.ones(4))


def test_awr_weight_clipped_at_100_without_overflow():
    agent = init_agent(2, 2, small_config(), np.random.default_rng(3))
    for net in (agent.value_net, agent.target_q2):
        for p in net.params():
            p[:] = 0.0
    # target q1 bias large -> huge advantage; min() picks q2=0 ... so zero q1 too
    for p in agent.target_q1.params():
        p[:] = 0.0
    agent.target_q1.biases[-1][:] = 1e6
    agent.target_q2.biases[-1][:] = 1e6
    w = awr_weights(agent, np.zeros((2, 2)), np.zeros((2, 2)))
    np.testing.assert_allclose(w, 100.0, rtol=1e-12)  # exp(log(100)) to the ulp


def test_min_target_q_is_min_of_both():
    rng = np.random.default_rng(4)
    agent = init_agent(2, 2, small_config(), rng)
    s = rng.uniform(0, 1, (16, 2))
    a = rng.uniform(-1, 1, (16, 2))
    sa = np.concatenate([s, a], axis=-1)
    q1 = agent.target_q1.forward(sa)[:, 0]
    q2 = agent.target_q2.forward(sa)[:, 0]
    qmin = min_target_q(agent, s, a)
    assert np.all(qmin <= q1) and np.all(qmin <= q2)
    assert np.array_equal(qmin, np.minimum(q1, q2))


def test_polyak_update_exact_arithmetic():
    data = _three_transition_dataset()
    cfg = small_config(polyak=0.25)
    agent = init_agent(2, 2, cfg, np.random.default_rng(5))
    before = [p.copy() for p in agent.target_q1.params()]
    train_step(agent, _batch_from(data))
    for tp, b, p in zip(agent.target_q1.params(), before, agent.q1.params()):
        expected = b.copy()
        expected *= 1.0 - 0.25
        expected += 0.25 * p
        assert np.array_equal(tp, expected)


def test_train_step_reports_finite_losses():
    agent = init_agent(2, 2, small_config(), np.random.default_rng(6))
    losses = train_step(agent, _batch_from(_three_transition_dataset()))
    assert set(losses) == {"v_loss", "q_loss", "pi_loss"}
    assert all(np.isfinite(v) for v in losses.values())


def test_dropout_flag_runs_and_needs_rng():
    agent = init_agent(2, 2, small_config(dropout=0.2), np.random.default_rng(7))
    batch = _batch_from(_three_transition_dataset())
    with pytest.raises(ValueError):
        train_step(agent, batch, rng=None)
    losses = train_step(agent, batch, rng=np.random.default_rng(0))
    assert np.isfinite(losses["pi_loss"])


# --- act -------------------------------------------------------------------


def test_act_zero_weight_policy_is_tanh_bias():
    agent = init_agent(2, 2, small_config(), np.random.default_rng(8))
    for p in agent.policy.params():
        p[:] = 0.0
    agent.policy.biases[-1][:] = [0.5, -0.3]
    out = act(agent, np.array([0.2, 0.9]))
    np.testing.assert_allclose(out, np.tanh([0.5, -0.3]), rtol=1e-15)


def test_act_deterministic_repeatable_and_bounded():
    rng = np.random.default_rng(9)
    agent = init_agent(2, 2, small_config(), rng)
    s = rng.uniform(0, 1, 2)
    a1, a2 = act(agent, s), act(agent, s)
    assert np.array_equal(a1, a2)
    assert np.all(a1 >= -1.0) and np.all(a1 <= 1.0)


def test_act_stochastic_seeded():
    agent = init_agent(2, 2, small_config(), np.random.default_rng(10))
    s = np.array([0.4, 0.6])
    with pytest.raises(ValueError):
        act(agent, s, deterministic=False)
    a1 = act(agent, s, deterministic=False, rng=np.random.default_rng(3))
    a2 = act(agent, s, deterministic=False, rng=np.random.default_rng(3))
    assert np.array_equal(a1, a2)
    assert np.all(np.abs(a1) <= 1.0)


# --- line-world end-to-end ----------------------------------------------------


class LineWorld:
    """1-D sanity env: start near 0.1, sparse reward once s >= 0.8."""

    max_steps = 40

    def reset(self, rng):
        return np.array([rng.uniform(0.05, 0.15)])

    def step(self, s, a):
        a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)
        nxt = np.clip(s + 0.1 * a, 0.0, 1.0)
        success = bool(nxt[0] >= 0.8)
        return nxt, (1.0 if success else 0.0), success, success


def _line_dataset(episodes, rng):
    from clue.envs import rollout

    env = LineWorld()
    trajs = []
    for i in range(episodes):
        if i % 5 == 0:  # noisy scripted expert heads right
            action_fn = lambda s: np.array([1.0]) if rng.random() > 0.3 else rng.uniform(-1, 1, 1)
        else:
            action_fn = lambda s: rng.uniform(-1, 1, 1)
        trajs.append(rollout(env, action_fn, rng))
    return from_trajectories(trajs)


@pytest.mark.slow
def test_line_world_policy_reaches_goal():
    rng = np.random.default_rng(11)
    data = _line_dataset(120, rng)
    cfg = small_config(steps=5000, batch_size=128)
    agent = init_agent(1, 1, cfg, np.random.default_rng(0))
    scaler = fit_reward_scaler(data)
    train(agent, data, cfg.steps, np.random.default_rng(1), reward_scaler=scaler)
    result = evaluate(LineWorld(), agent, 10, np.random.default_rng(2))
    assert result.success_rate == 1.0
    behavior_rate = np.mean([t.success for t in data.trajectories])
    assert result.success_rate > behavior_rate


def test_training_is_bit_deterministic():
    rng = np.random.default_rng(12)
    data = _line_dataset(30, rng)
    outs = []
    for _ in range(2):
        agent = init_agent(1, 1, small_config(steps=150, batch_size=32), np.random.default_rng(5))
        train(agent, data, 150, np.random.default_rng(6))
        result = evaluate(LineWorld(), agent, 5, np.random.default_rng(7))
        outs.append((result.mean_return, result.success_rate, act(agent, np.array([0.3]))[0]))
    assert outs[0] == outs[1]


def test_train_curves_structure():
    rng = np.random.default_rng(13)
    data = _line_dataset(20, rng)
    agent = init_agent(1, 1, small_config(steps=100, batch_size=32), np.random.default_rng(1))
    calls = []

    def eval_fn(agent, snapshot):
        calls.append(snapshot)
        return 1.5, 0.5

    curves = train(agent, data, 100, np.random.default_rng(2), eval_fn=eval_fn, eval_every=50, log_every=25)
    assert [row["step"] for row in curves] == [25, 50, 75, 100]
    assert calls == [1, 2]
    assert curves[1]["eval_return"] == 1.5
    assert curves[0]["eval_return"] is None


def test_unlabeled_dataset_rejected():
    obs = np.zeros((3, 1))
    acts = np.zeros((2, 1))
    data = from_trajectories([Trajectory(obs, acts, None, np.zeros(2, dtype=bool), success=False)])
    agent = init_agent(1, 1, small_config(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        train(agent, data, 10, np.random.default_rng(0))


def test_agent_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    agent = init_agent(2, 2, small_config(), rng)
    agent.policy_log_std[:] = [-0.5, 0.25]
    path = tmp_path / "agent.ckpt"
    save_agent(agent, path)
    back = load_agent(path)
    s = rng.uniform(0, 1, 2)
    assert np.array_equal(act(agent, s), act(back, s))
    assert np.array_equal(back.policy_log_std, agent.policy_log_std)
    assert back.config == agent.config
    # target nets preserved exactly
    sa = np.concatenate([s, np.zeros(2)])[None, :]
    assert np.array_equal(agent.target_q1.forward(sa), back.target_q1.forward(sa))
    # sidecar is deterministic
    save_agent(back, tmp_path / "agent2.ckpt")
    assert (tmp_path / "agent.ckpt.json").read_bytes() == (tmp_path / "agent2.ckpt.json").read_bytes()
    assert (tmp_path / "agent.ckpt").read_bytes() == (tmp_path / "agent2.ckpt").read_bytes()
