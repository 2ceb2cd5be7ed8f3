import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from clue import dataset as ds
from clue.dataset import (
    Dataset,
    DatasetParseError,
    DatasetValidationError,
    MissingRewardsError,
    NoExpertFoundError,
    Trajectory,
    compute_returns,
    filter_expert_by_success,
    from_trajectories,
    load,
    normalize_states,
    save,
)


def make_traj(rng, steps=5, state_dim=2, action_dim=2, rewards=True, success=None, terminal=False):
    obs = rng.standard_normal((steps + 1, state_dim))
    acts = rng.uniform(-1, 1, size=(steps, action_dim))
    rew = rng.standard_normal(steps) if rewards else None
    term = np.zeros(steps, dtype=bool)
    term[-1] = terminal
    return Trajectory(obs, acts, rew, term, success=success)


def make_dataset(rng, n=3, **kw):
    return from_trajectories([make_traj(rng, steps=2 + i, **kw) for i in range(n)])


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = make_dataset(rng)
    path = tmp_path / "data.jsonl"
    save(data, path)
    back = load(path)
    assert len(back) == len(data)
    assert back.state_dim == data.state_dim
    for a, b in zip(data.trajectories, back.trajectories):
        assert np.array_equal(a.observations, b.observations)
        assert np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.rewards, b.rewards)
        assert np.array_equal(a.terminals, b.terminals)
        assert a.success == b.success


def test_round_trip_bit_identical_bytes(tmp_path):
    rng = np.random.default_rng(1)
    data = make_dataset(rng, n=4)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save(data, p1)
    save(load(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1), st.booleans())
def test_round_trip_identity_property(seed, labeled):
    rng = np.random.default_rng(seed)
    data = make_dataset(rng, n=int(rng.integers(1, 4)), rewards=labeled, success=bool(rng.integers(2)))
    import io, tempfile, os

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "t.jsonl")
        save(data, path)
        back = load(path)
    for a, b in zip(data.trajectories, back.trajectories):
        assert a.observations.tobytes() == b.observations.tobytes()
        assert a.actions.tobytes() == b.actions.tobytes()
        if labeled:
            assert a.rewards.tobytes() == b.rewards.tobytes()
        else:
            assert b.rewards is None


def test_generated_dataset_returns_survive_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    trajs = []
    remaining = 1000
    while remaining > 0:
        steps = int(min(remaining, rng.integers(3, 40)))
        trajs.append(make_traj(rng, steps=steps))
        remaining -= steps
    data = from_trajectories(trajs)
    assert data.n_transitions == 1000
    path = tmp_path / "gen.jsonl"
    save(data, path)
    back = load(path)
    r1, _, _ = compute_returns(data)
    r2, _, _ = compute_returns(back)
    assert np.array_equal(r1, r2)


def test_load_reports_bad_json_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    rng = np.random.default_rng(2)
    good = json.dumps(
        {
            "observations": [[0.0], [1.0]],
            "actions": [[0.5]],
            "rewards": [1.0],
            "terminals": [True],
            "success": True,
        }
    )
    path.write_text(good + "\n{oops\n")
    with pytest.raises(DatasetParseError, match="line 2"):
        load(path)


def test_load_rejects_empty_trajectory(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text(
        json.dumps(
            {"observations": [[0.0]], "actions": [], "rewards": [], "terminals": [], "success": None}
        )
        + "\n"
    )
    with pytest.raises((DatasetValidationError, DatasetParseError)):
        load(path)


def test_load_rejects_empty_file(tmp_path):
    path = tmp_path / "none.jsonl"
    path.write_text("")
    with pytest.raises(DatasetValidationError):
        load(path)


def test_load_rejects_dim_mismatch(tmp_path):
    rec1 = {
        "observations": [[0.0, 0.0], [1.0, 1.0]],
        "actions": [[0.5]],
        "rewards": [0.0],
        "terminals": [False],
        "success": None,
    }
    rec2 = {
        "observations": [[0.0], [1.0]],
        "actions": [[0.5]],
        "rewards": [0.0],
        "terminals": [False],
        "success": None,
    }
    path = tmp_path / "dims.jsonl"
    path.write_text(json.dumps(rec1) + "\n" + json.dumps(rec2) + "\n")
    with pytest.raises(DatasetValidationError):
        load(path)


def test_load_rejects_mid_trajectory_terminal(tmp_path):
    rec = {
        "observations": [[0.0], [1.0], [2.0]],
        "actions": [[0.1], [0.2]],
        "rewards": [0.0, 0.0],
        "terminals": [True, False],
        "success": None,
    }
    path = tmp_path / "term.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(DatasetValidationError):
        load(path)


def _sparse_dataset(returns_and_success):
    """Build a 1-step-per-unit sparse dataset with prescribed returns."""
    trajs = []
    for ret, succ in returns_and_success:
        obs = np.zeros((3, 1))
        acts = np.zeros((2, 1))
        rew = np.array([0.0, float(ret)])
        trajs.append(Trajectory(obs, acts, rew, np.array([False, succ])))
    return from_trajectories(trajs)


def test_filter_expert_argmax_case():
    data = _sparse_dataset([(0, False), (1, True), (3, True), (0, False), (2, True)])
    expert, rest = filter_expert_by_success(data, k=1)
    assert len(expert) == 1
    assert expert.trajectories[0].episode_return() == 3.0
    assert len(rest) == 4


def test_filter_expert_fewer_successes_than_k():
    data = _sparse_dataset([(0, False), (1, True), (2, True), (0, False)])
    expert, rest = filter_expert_by_success(data, k=10)
    assert len(expert) == 2
    assert len(rest) == 2


def test_filter_expert_no_success_raises():
    data = _sparse_dataset([(0, False), (0, False)])
    with pytest.raises(NoExpertFoundError):
        filter_expert_by_success(data, k=1)


def test_filter_expert_tie_breaks_earliest():
    data = _sparse_dataset([(2, True), (2, True), (1, True)])
    expert, _ = filter_expert_by_success(data, k=1)
    assert expert.trajectories[0] is data.trajectories[0]


def test_filter_expert_planted_recovery():
    rng = np.random.default_rng(5)
    trajs = []
    planted = set()
    for i in range(30):
        succeed = rng.random() < 0.3
        if succeed:
            planted.add(i)
        steps = int(rng.integers(2, 8))
        obs = rng.standard_normal((steps + 1, 2))
        acts = rng.uniform(-1, 1, (steps, 2))
        rew = np.zeros(steps)
        if succeed:
            rew[-1] = 1.0
        trajs.append(Trajectory(obs, acts, rew, np.zeros(steps, dtype=bool)))
    data = from_trajectories(trajs)
    expert, rest = filter_expert_by_success(data, k=len(planted))
    got = {id(t) for t in expert.trajectories}
    assert got == {id(data.trajectories[i]) for i in sorted(planted)}
    # partition property
    assert len(expert) + len(rest) == len(data)
    assert expert.n_transitions + rest.n_transitions == data.n_transitions


def test_filter_expert_explicit_flag_wins_over_rewards():
    t = make_traj(np.random.default_rng(0), rewards=True, success=True)
    t.rewards[:] = 0.0
    data = from_trajectories([t])
    expert, _ = filter_expert_by_success(data, k=1)
    assert len(expert) == 1


def test_compute_returns_cases():
    data = _sparse_dataset([(1, True)])
    data.trajectories[0].rewards[:] = [1.0, 1.0]
    returns, rmin, rmax = compute_returns(data)
    assert returns[0] == 2.0

    zero = _sparse_dataset([(0, False)])
    returns, rmin, rmax = compute_returns(zero)
    assert returns[0] == 0.0 and rmin == 0.0 and rmax == 0.0


def test_compute_returns_matches_independent_sum():
    rng = np.random.default_rng(9)
    data = make_dataset(rng, n=6)
    returns, rmin, rmax = compute_returns(data)
    oracle = []
    for traj in data.trajectories:
        total = 0.0
        for tr in traj.transitions():
            total += tr.reward
        oracle.append(total)
    np.testing.assert_allclose(returns, oracle, rtol=1e-12)
    assert rmin == min(oracle) and rmax == max(oracle)


def test_compute_returns_requires_labels():
    rng = np.random.default_rng(3)
    data = make_dataset(rng, rewards=False, success=False)
    with pytest.raises(MissingRewardsError):
        compute_returns(data)


def test_normalize_two_point_case():
    obs = np.array([[0.0], [0.0], [2.0]])  # states seen: 0, 0, 2
    traj = Trajectory(obs, np.zeros((2, 1)), np.zeros(2), np.zeros(2, dtype=bool))
    data = from_trajectories([traj])
    normed, stats = normalize_states(data)
    got = normed.trajectories[0].observations.ravel()
    # mean 2/3, std sqrt(8)/3 over the three observation rows
    np.testing.assert_allclose(got * stats.std[0] + stats.mean[0], obs.ravel(), atol=1e-12)
    flat = np.concatenate([t.observations for t in normed.trajectories])
    np.testing.assert_allclose(flat.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(flat.std(axis=0), 1.0, atol=1e-12)


def test_normalize_already_normalized_is_roughly_identity():
    rng = np.random.default_rng(11)
    data = make_dataset(rng, n=5)
    once, _ = normalize_states(data)
    twice, _ = normalize_states(once)
    a = np.concatenate([t.observations for t in once.trajectories])
    b = np.concatenate([t.observations for t in twice.trajectories])
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_normalize_round_trip():
    rng = np.random.default_rng(12)
    data = make_dataset(rng, n=4)
    normed, stats = normalize_states(data)
    back = ds.denormalize_states(normed)
    for a, b in zip(data.trajectories, back.trajectories):
        np.testing.assert_allclose(a.observations, b.observations, atol=1e-12)


def test_normalize_constant_dimension_warns():
    obs = np.ones((4, 2))
    obs[:, 1] = [0.0, 1.0, 2.0, 3.0]
    traj = Trajectory(obs, np.zeros((3, 1)), None, np.zeros(3, dtype=bool), success=False)
    data = from_trajectories([traj])
    with pytest.warns(UserWarning, match="constant"):
        normed, stats = normalize_states(data)
    assert stats.std[0] == ds.STD_FLOOR


def test_flat_preserves_order_and_counts():
    rng = np.random.default_rng(13)
    data = make_dataset(rng, n=3)
    flat = data.flat()
    assert len(flat) == data.n_transitions
    assert np.array_equal(flat.states[: len(data.trajectories[0])], data.trajectories[0].states)


def test_mixed_labeling_rejected():
    rng = np.random.default_rng(14)
    t1 = make_traj(rng, rewards=True)
    t2 = make_traj(rng, rewards=False, success=False)
    with pytest.raises(DatasetValidationError):
        from_trajectories([t1, t2])


def test_relabeled_file_round_trips_original_rewards(tmp_path):
    rng = np.random.default_rng(15)
    traj = make_traj(rng, steps=3)
    traj.original_rewards = np.array([9.0, 8.0, 7.0])
    data = from_trajectories([traj])
    path = tmp_path / "relabel.jsonl"
    save(data, path)
    raw = json.loads(path.read_text().splitlines()[0])
    assert raw["original_rewards"] == [9.0, 8.0, 7.0]
    back = load(path)
    assert np.array_equal(back.trajectories[0].original_rewards, traj.original_rewards)
