import numpy as np
import pytest

from b_types.config_types import CemConfig
from bats.dynamics import FunctionEnsemble
from bats.errors import ConfigError, InputError
from bats.planner import multi_start_test_edge, plan_stitch
from conftest import additive_ensemble
from utils.helpers import derive_seed

LINE_CEM = CemConfig(population=200, elite_fraction=0.1, iterations=5, action_bounds=[(-1.0, 1.0)])


def _double_integrator() -> FunctionEnsemble:
    def step(s, a):
        return np.stack([s[:, 0] + s[:, 1], s[:, 1] + a[:, 0]], axis=1)

    return FunctionEnsemble([step], lambda s, a: np.zeros(len(s)), 2, 1)


def test_one_step_line_finds_closed_form_action():
    result = plan_stitch(additive_ensemble(1), np.array([0.0]), np.array([0.5]), 1, 0.05, None, LINE_CEM, 0)
    assert result.accepted
    assert result.actions.shape == (1, 1)
    assert abs(result.actions[0, 0] - 0.5) < 0.02
    assert result.predicted_states.shape == (1, 1)
    assert len(result.score_history) == LINE_CEM.iterations


def test_unreachable_target_is_rejected():
    result = plan_stitch(additive_ensemble(1), np.array([0.0]), np.array([10.0]), 1, 0.05, None, LINE_CEM, 0)
    assert not result.accepted
    assert result.achieved_distance >= 9.0


def test_double_integrator_holds_its_fixed_point():
    cem = CemConfig(population=200, elite_fraction=0.1, iterations=10, action_bounds=[(-1.0, 1.0)])
    origin = np.zeros(2)
    result = plan_stitch(_double_integrator(), origin, origin, 1, 0.01, None, cem, 3)
    assert result.accepted
    assert result.achieved_distance < 1e-3


def test_multi_step_plan_reaches_far_target():
    cem = LINE_CEM.model_copy(update={"iterations": 10})
    result = plan_stitch(additive_ensemble(1), np.array([0.0]), np.array([2.5]), 3, 0.05, None, cem, 1)
    assert result.accepted
    assert result.k == 3


def test_score_history_never_increases():
    result = plan_stitch(additive_ensemble(2), np.zeros(2), np.array([0.3, -0.7]), 2, 0.05, None,
                         CemConfig(action_bounds=[(-1.0, 1.0), (-1.0, 1.0)]), 4)
    assert all(b <= a for a, b in zip(result.score_history, result.score_history[1:]))


def test_same_seed_same_plan():
    args = (additive_ensemble(1), np.array([0.0]), np.array([0.4]), 2, 0.05, None, LINE_CEM, 11)
    np.testing.assert_array_equal(plan_stitch(*args).actions, plan_stitch(*args).actions)


def test_single_attempt_equals_plan_stitch():
    ens = additive_ensemble(1)
    single = plan_stitch(ens, np.array([0.0]), np.array([0.5]), 1, 0.05, None, LINE_CEM, 7)
    multi = multi_start_test_edge(ens, np.array([0.0]), np.array([0.5]), 1, 1, 0.05, None, LINE_CEM, 7)
    np.testing.assert_array_equal(multi.actions, single.actions)
    assert multi.achieved_distance == single.achieved_distance


def test_more_attempts_never_worse():
    ens = additive_ensemble(1)
    cem = CemConfig(population=10, elite_fraction=0.2, iterations=1, action_bounds=[(-1.0, 1.0)])
    single = multi_start_test_edge(ens, np.array([0.0]), np.array([0.5]), 1, 1, 0.05, None, cem, 7)
    triple = multi_start_test_edge(ens, np.array([0.0]), np.array([0.5]), 1, 3, 0.05, None, cem, 7)
    assert triple.achieved_distance <= single.achieved_distance
    assert triple.attempts == 3


def test_attempts_take_the_best_of_their_seeds():
    ens = additive_ensemble(1)
    cem = CemConfig(population=10, elite_fraction=0.2, iterations=1, action_bounds=[(-1.0, 1.0)])
    src, dst = np.array([0.0]), np.array([0.5])
    seeds = [7] + [derive_seed(7, "attempt", i) for i in (1, 2, 3)]
    best = min(plan_stitch(ens, src, dst, 1, 0.01, None, cem, s).achieved_distance for s in seeds)
    result = multi_start_test_edge(ens, src, dst, 1, 4, 0.01, None, cem, 7)
    assert result.achieved_distance == best
    assert result.accepted == (best < 0.01)


def test_planner_needs_action_bounds():
    with pytest.raises(ConfigError):
        plan_stitch(additive_ensemble(1), np.array([0.0]), np.array([0.5]), 1, 0.05, None, CemConfig(), 0)


@pytest.mark.parametrize("k,delta", [(0, 0.05), (1, 0.0)])
def test_bad_planner_arguments(k, delta):
    with pytest.raises(InputError):
        plan_stitch(additive_ensemble(1), np.array([0.0]), np.array([0.5]), k, delta, None, LINE_CEM, 0)
