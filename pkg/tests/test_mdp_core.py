import itertools
import json
import math

import numpy as np
import pytest

from bats.errors import ConfigError, InputError, StructuralError, VersionError
from bats.mdp_core import (
    Edge,
    TabularMdp,
    ValueTable,
    boltzmann_policy,
    greedy_policy,
    load_mdp,
    mdp_to_dict,
    policy_evaluation,
    sample_occupancy,
    save_mdp,
    value_iteration,
)
from conftest import absorbing, edge, random_mdp, vec
from utils.config import build_config


def _exact_policy_values(mdp: TabularMdp, choice) -> np.ndarray:
    n = mdp.n_states
    p = np.zeros((n, n))
    r = np.zeros(n)
    for s in range(n):
        e = mdp.actions_per_state[s][choice[s]]
        p[s, e.next_state] = 1.0
        r[s] = e.effective_reward
    return np.linalg.solve(np.eye(n) - mdp.discount * p, r)


def _brute_force_optimum(mdp: TabularMdp) -> np.ndarray:
    best = np.full(mdp.n_states, -np.inf)
    for choice in itertools.product(*(range(len(a)) for a in mdp.actions_per_state)):
        best = np.maximum(best, _exact_policy_values(mdp, choice))
    return best


# ───── value iteration ─────
def test_single_self_loop_is_geometric_series():
    mdp = TabularMdp(states=[vec(0)], actions_per_state=[[edge(0, 1.0)]], discount=0.9, start_states=[0])
    values = value_iteration(mdp, tolerance=1e-12)
    assert values.converged
    assert values.values[0] == pytest.approx(10.0, abs=1e-9)


def test_three_state_chain():
    mdp = TabularMdp(
        states=[vec(0), vec(1), vec(2)],
        actions_per_state=[[edge(1, 0.0)], [edge(2, 1.0)], [absorbing(2)]],
        discount=0.5,
        start_states=[0],
        terminal_flags=[False, False, True],
    )
    v = value_iteration(mdp).values
    assert v.tolist() == [0.5, 1.0, 0.0]


def test_matches_policy_enumeration(rng):
    for _ in range(5):
        mdp = random_mdp(rng, n=6, max_actions=3, discount=0.9)
        v = value_iteration(mdp, tolerance=1e-12).values
        np.testing.assert_allclose(v, _brute_force_optimum(mdp), atol=1e-6)


def test_residual_history_is_recorded():
    mdp = random_mdp(np.random.default_rng(3), n=20, max_actions=4, discount=0.95)
    values = value_iteration(mdp, tolerance=1e-8)
    assert values.iterations_run == len(values.residual_history)
    assert values.residual_history[-1] <= 1e-8


def test_max_iters_reports_not_converged():
    mdp = TabularMdp(states=[vec(0)], actions_per_state=[[edge(0, 1.0)]], discount=0.99)
    values = value_iteration(mdp, tolerance=1e-12, max_iters=3)
    assert not values.converged
    assert values.iterations_run == 3


@pytest.mark.parametrize("max_iters", [0, -1])
def test_max_iters_must_allow_one_sweep(max_iters):
    mdp = TabularMdp(states=[vec(0)], actions_per_state=[[edge(0, 1.0)]], discount=0.9)
    with pytest.raises(ConfigError):
        value_iteration(mdp, max_iters=max_iters)


def test_config_rejects_zero_sweeps():
    with pytest.raises(ConfigError):
        build_config(None, None, ["bats.vi_max_iters=0"], {"seed": 0})


def test_empty_action_list_is_structural_error():
    mdp = TabularMdp(states=[vec(0), vec(1)], actions_per_state=[[edge(1)], []], discount=0.9)
    with pytest.raises(StructuralError):
        value_iteration(mdp)


def test_non_finite_reward_is_input_error():
    mdp = TabularMdp(states=[vec(0)], actions_per_state=[[edge(0, math.inf)]], discount=0.9)
    with pytest.raises(InputError):
        value_iteration(mdp)


def test_terminal_state_needs_zero_self_loop():
    mdp = TabularMdp(states=[vec(0)], actions_per_state=[[edge(0, 1.0)]], discount=0.9, terminal_flags=[True])
    with pytest.raises(StructuralError):
        mdp.validate()


# ───── policies ─────
def _one_state_table(q):
    q = np.asarray(q, dtype=np.float64)
    return ValueTable(values=np.array([q.max()]), q_values=q, offsets=np.array([0, len(q)]),
                      iterations_run=0, residual=0.0)


def test_greedy_tie_breaks_to_lowest_index():
    assert greedy_policy(_one_state_table([2.0, 2.0])).choice[0] == 0


def test_greedy_argmax():
    assert greedy_policy(_one_state_table([0.1, 0.3])).choice[0] == 1


def test_greedy_value_equals_optimum():
    mdp = random_mdp(np.random.default_rng(7), n=20, max_actions=4, discount=0.9)
    values = value_iteration(mdp, tolerance=1e-12)
    choice = greedy_policy(values, mdp).choice
    np.testing.assert_allclose(_exact_policy_values(mdp, choice), values.values, atol=1e-6)
    np.testing.assert_allclose(policy_evaluation(mdp, choice), values.values, atol=1e-6)


def test_greedy_rejects_mismatched_mdp():
    mdp = random_mdp(np.random.default_rng(1), n=4, max_actions=2, discount=0.9)
    with pytest.raises(InputError):
        greedy_policy(_one_state_table([1.0]), mdp)


def test_boltzmann_probabilities():
    policy = boltzmann_policy(_one_state_table([1.0, 0.0]), None, 0.25)
    expected = math.exp(4) / (math.exp(4) + 1)
    assert policy.probabilities(0)[0] == pytest.approx(expected)
    draws = np.random.default_rng(0)
    picks = [policy.act(0, draws) for _ in range(100_000)]
    assert abs(picks.count(0) / len(picks) - expected) < 0.01


def test_boltzmann_rejects_non_positive_temperature():
    with pytest.raises(InputError):
        boltzmann_policy(_one_state_table([1.0, 0.0]), None, 0.0)


# ───── occupancy ─────
def test_occupancy_of_absorbing_start():
    mdp = TabularMdp(states=[vec(0)], actions_per_state=[[absorbing(0)]], discount=0.9,
                     start_states=[0], terminal_flags=[True])
    policy = greedy_policy(value_iteration(mdp), mdp)
    assert set(sample_occupancy(mdp, policy, 500, 100, rng_seed=0)) == {0}


def test_occupancy_two_cycle_frequency():
    mdp = TabularMdp(states=[vec(0), vec(1)], actions_per_state=[[edge(1)], [edge(0)]],
                     discount=0.5, start_states=[0])
    policy = greedy_policy(value_iteration(mdp), mdp)
    samples = np.asarray(sample_occupancy(mdp, policy, 100_000, 1000, rng_seed=1))
    assert len(samples) == 100_000
    assert abs(np.mean(samples == 0) - 2 / 3) < 0.02


def test_occupancy_is_reproducible():
    mdp = random_mdp(np.random.default_rng(5), n=15, max_actions=3, discount=0.9)
    policy = boltzmann_policy(value_iteration(mdp), mdp, 0.25)
    a = sample_occupancy(mdp, policy, 300, 50, rng_seed=42)
    b = sample_occupancy(mdp, policy, 300, 50, rng_seed=42)
    assert a == b


def test_occupancy_needs_start_states():
    mdp = TabularMdp(states=[vec(0)], actions_per_state=[[edge(0)]], discount=0.9)
    policy = greedy_policy(value_iteration(mdp), mdp)
    with pytest.raises(InputError):
        sample_occupancy(mdp, policy, 10, 10, rng_seed=0)


# ───── persistence ─────
def test_save_then_load(tmp_path):
    mdp = random_mdp(np.random.default_rng(9), n=10, max_actions=3, discount=0.9, n_terminal=2)
    mdp.actions_per_state[0].append(Edge(action=np.array([0.5]), next_state=3, reward=0.2, is_stitch=True,
                                         penalty=0.4, distance=0.02, penalty_scale=1.0, stitch_id=0))
    mdp.stitch_keys["0->3:abc"] = 0
    mdp.next_stitch_id = 1
    path = tmp_path / "mdp.json"
    save_mdp(mdp, path)
    assert mdp_to_dict(load_mdp(path)) == mdp_to_dict(mdp)


def test_version_mismatch_is_refused(tmp_path):
    mdp = random_mdp(np.random.default_rng(2), n=3, max_actions=1, discount=0.9)
    doc = mdp_to_dict(mdp)
    doc["version"] = 99
    path = tmp_path / "mdp.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(VersionError):
        load_mdp(path)


def test_corrupt_file_is_refused(tmp_path):
    path = tmp_path / "mdp.json"
    path.write_text("{not json")
    with pytest.raises(VersionError):
        load_mdp(path)
