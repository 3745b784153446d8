import numpy as np
import pytest
import torch

from b_types.config_types import CloneConfig, GeneratorSpec
from bats.dataset import Trajectory, TrajectoryDataset, build_m0
from bats.distance import Normalizer
from bats.errors import EmptyHarvestError, InputError, TrainingError, VersionError
from bats.mdp_core import greedy_policy, value_iteration
from bats.policy_cloning import (
    ClonedPolicy,
    behavior_clone,
    evaluate_policy,
    format_histogram,
    graph_returns,
    harvest_trajectories,
    load_policy,
    return_histogram,
    save_policy,
    value_residuals,
)
from conftest import dataset, trajectory
from envs.generate import generate_dataset
from envs.mountain_car import MountainCarEnv


def _rewarded_line():
    mdp = build_m0(dataset(trajectory([[0.0], [1.0], [2.0]], [[1.0], [1.0]], [0.0, 1.0], terminal=True)), 0.9)
    return mdp, greedy_policy(value_iteration(mdp), mdp)


def _pairs(states, actions) -> TrajectoryDataset:
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64).reshape(len(states), -1)
    trajs = [Trajectory(states=states[i:i + 1], actions=actions[i:i + 1], rewards=np.zeros(1),
                        next_states=states[i:i + 1] + 1.0, terminals=np.zeros(1, dtype=bool))
             for i in range(len(states))]
    return TrajectoryDataset.from_trajectories(trajs, states.shape[1], actions.shape[1])


def _zero_policy(state_dim=2, action_dim=1) -> ClonedPolicy:
    policy = ClonedPolicy(state_dim, action_dim, CloneConfig(hidden_sizes=[8]), Normalizer.identity(state_dim),
                          [-1.0] * action_dim, [1.0] * action_dim)
    with torch.no_grad():
        for p in policy.parameters():
            p.zero_()
    return policy.eval()


# ───── harvesting ─────
def test_harvest_everything_at_minus_infinity():
    mdp, policy = _rewarded_line()
    harvest = harvest_trajectories(mdp, policy, float("-inf"), horizon=10)
    assert len(harvest.trajectories) == 1
    traj = harvest.trajectories[0]
    assert len(traj) == 2
    assert traj.terminals.tolist() == [False, True]
    assert traj.rewards.sum() == 1.0


def test_harvest_threshold_too_high():
    mdp, policy = _rewarded_line()
    with pytest.raises(EmptyHarvestError):
        harvest_trajectories(mdp, policy, 5.0, horizon=10)


@pytest.mark.parametrize("threshold", [float("nan"), float("inf")])
def test_harvest_threshold_must_be_usable(threshold):
    mdp, policy = _rewarded_line()
    with pytest.raises(InputError):
        harvest_trajectories(mdp, policy, threshold, horizon=10)


def test_harvest_respects_horizon():
    mdp, policy = _rewarded_line()
    harvest = harvest_trajectories(mdp, policy, float("-inf"), horizon=1)
    assert len(harvest.trajectories[0]) == 1


def test_graph_returns_are_unpenalized_sums():
    mdp, policy = _rewarded_line()
    np.testing.assert_array_equal(graph_returns(mdp, policy.choice, 10), [1.0])


def test_histogram_counts_and_text():
    counts, edges = return_histogram([0.0, 1.0, 1.0, 2.0], bins=2)
    assert counts.sum() == 4
    assert "#" in format_histogram(counts, edges)
    assert format_histogram(*return_histogram([])) == "(no returns)"


# ───── cloning ─────
def test_single_pair_is_reproduced():
    harvest = _pairs([[0.2, -0.1]], [[0.3]])
    config = CloneConfig(hidden_sizes=[32, 32], batch_size=1, batch_updates=1000)
    policy = behavior_clone(harvest, config, seed=0, action_bounds=[[-1.0, 1.0]])
    assert abs(policy.act(np.array([0.2, -0.1]))[0] - 0.3) < 1e-2


def test_cloning_is_seed_deterministic():
    rng = np.random.default_rng(0)
    harvest = _pairs(rng.uniform(-1, 1, size=(40, 2)), rng.uniform(-1, 1, size=(40, 1)))
    config = CloneConfig(hidden_sizes=[16], batch_size=8, batch_updates=50)
    probe = rng.uniform(-1, 1, size=(5, 2))
    a = behavior_clone(harvest, config, seed=3, action_bounds=[[-1.0, 1.0]]).act_batch(probe)
    b = behavior_clone(harvest, config, seed=3, action_bounds=[[-1.0, 1.0]]).act_batch(probe)
    np.testing.assert_array_equal(a, b)


def test_runaway_loss_stops_cloning():
    rng = np.random.default_rng(4)
    harvest = _pairs(rng.uniform(-1, 1, size=(40, 2)), rng.uniform(-1, 1, size=(40, 1)))
    config = CloneConfig(hidden_sizes=[16], batch_size=8, batch_updates=20, learning_rate=1e4, divergence_window=1)
    with pytest.raises(TrainingError):
        behavior_clone(harvest, config, seed=0)


def test_steady_loss_passes_the_divergence_check():
    rng = np.random.default_rng(4)
    harvest = _pairs(rng.uniform(-1, 1, size=(40, 2)), rng.uniform(-1, 1, size=(40, 1)))
    config = CloneConfig(hidden_sizes=[16], batch_size=8, batch_updates=200, divergence_window=5)
    policy = behavior_clone(harvest, config, seed=0, action_bounds=[[-1.0, 1.0]])
    assert np.all(np.abs(policy.act_batch(rng.uniform(-1, 1, size=(5, 2)))) <= 1.0)


def test_empty_harvest_cannot_be_cloned():
    with pytest.raises(InputError):
        behavior_clone(TrajectoryDataset.from_trajectories([], 2, 1), CloneConfig(), seed=0)


def test_act_checks_state_shape():
    with pytest.raises(InputError):
        _zero_policy().act(np.zeros(3))


def test_policy_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    harvest = _pairs(rng.uniform(-1, 1, size=(20, 2)), rng.uniform(-1, 1, size=(20, 1)))
    policy = behavior_clone(harvest, CloneConfig(hidden_sizes=[16], batch_size=8, batch_updates=20), seed=0)
    path = tmp_path / "policy.pt"
    save_policy(policy, path)
    probe = rng.uniform(-1, 1, size=(4, 2))
    np.testing.assert_array_equal(load_policy(path).act_batch(probe), policy.act_batch(probe))


def test_bad_policy_checkpoint(tmp_path):
    path = tmp_path / "policy.pt"
    path.write_bytes(b"\x00\x01")
    with pytest.raises(VersionError):
        load_policy(path)


# ───── evaluation ─────
def test_idle_car_earns_nothing():
    report = evaluate_policy(_zero_policy(), MountainCarEnv(max_steps=200), n_episodes=3, seed=0)
    assert report["n_episodes"] == 3
    assert report["mean"] <= 0.0
    assert report["goal_fraction"] == 0.0
    assert report["solved_threshold"] == 90.0


def test_zero_episodes_report_no_statistics():
    report = evaluate_policy(_zero_policy(), MountainCarEnv(), n_episodes=0, seed=0)
    assert report["mean"] is None
    assert report["std"] is None


def test_evaluation_checks_dimensions():
    with pytest.raises(InputError):
        evaluate_policy(_zero_policy(state_dim=4, action_dim=2), MountainCarEnv(), n_episodes=1, seed=0)


def test_value_residual_table():
    env = MountainCarEnv()
    data = generate_dataset(env, GeneratorSpec(n_expert=2, n_random=0, seed=0, max_steps=999))
    mdp = build_m0(data, 0.99)
    choice = greedy_policy(value_iteration(mdp), mdp).choice
    frame = value_residuals(mdp, choice, _zero_policy(), env, horizon=50)
    assert list(frame.columns) == ["start", "s0", "s1", "graph_return", "env_return", "residual"]
    assert len(frame) == len(mdp.start_states)
    np.testing.assert_allclose(frame["residual"], frame["graph_return"] - frame["env_return"])


@pytest.mark.slow
def test_linear_controller_is_learned():
    rng = np.random.default_rng(2)
    states = rng.uniform(-1, 1, size=(500, 2))
    actions = 0.5 * states[:, :1] - 0.3 * states[:, 1:]
    policy = behavior_clone(_pairs(states, actions), CloneConfig(hidden_sizes=[64, 64], batch_size=64,
                                                                 batch_updates=3000), seed=0,
                            action_bounds=[[-1.0, 1.0]])
    probe = rng.uniform(-1, 1, size=(200, 2))
    target = 0.5 * probe[:, :1] - 0.3 * probe[:, 1:]
    assert float(np.sqrt(np.mean((policy.act_batch(probe) - target) ** 2))) < 0.05
