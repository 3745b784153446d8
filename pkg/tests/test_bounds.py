import numpy as np
import pytest

from bats.bounds import (
    StitchTuple,
    StitchTupleSet,
    build_m_minus_plus,
    calibrate_penalties,
    certify_improvement,
    certify_sandwich,
    exact_bisim_distance,
    generate_instance,
    hitting_time_expansion,
    lipschitz_gap,
    policy_values_exact,
    verify_bounds,
)
from bats.errors import ContractError, UnsupportedError
from bats.mdp_core import TabularMdp, boltzmann_policy, mdp_to_dict, value_iteration
from conftest import edge, vec


def _two_state_m0(discount=0.9):
    return TabularMdp(states=[vec(0), vec(1)], actions_per_state=[[edge(0)], [edge(1)]],
                      discount=discount, start_states=[0, 1])


def _hand_instance():
    """Stitching 0 → 1 with action 1 really leads to state 2, whose self-loop pays 1."""
    m_true = TabularMdp(
        states=[vec(0), vec(1), vec(2)],
        actions_per_state=[[edge(0, action=0.0), edge(2, action=1.0)], [edge(1)], [edge(2, 1.0)]],
        discount=0.9, start_states=[0, 1],
    )
    tuples = StitchTupleSet(tuples=[StitchTuple(source=0, target=1, action=(1.0,), true_reward=0.0)])
    return m_true, _two_state_m0(), tuples


# ───── M⁻ / M⁺ ─────
def test_no_tuples_leaves_m0_unchanged():
    m0 = _two_state_m0()
    m_minus, m_plus = build_m_minus_plus(m0, StitchTupleSet())
    assert mdp_to_dict(m_minus) == mdp_to_dict(m0)
    assert mdp_to_dict(m_plus) == mdp_to_dict(m0)


def test_single_tuple_rewards():
    tuples = StitchTupleSet(tuples=[StitchTuple(0, 1, (1.0,), 1.0)], penalties=[0.5])
    m_minus, m_plus = build_m_minus_plus(_two_state_m0(), tuples)
    assert m_minus.actions_per_state[0][-1].effective_reward == pytest.approx(0.55)
    assert m_plus.actions_per_state[0][-1].effective_reward == pytest.approx(1.45)


def test_logged_action_cannot_be_a_stitch():
    tuples = StitchTupleSet(tuples=[StitchTuple(0, 1, (0.0,), 1.0)], penalties=[0.5])
    with pytest.raises(ContractError):
        build_m_minus_plus(_two_state_m0(), tuples)


def test_missing_penalty_is_refused():
    with pytest.raises(ContractError):
        build_m_minus_plus(_two_state_m0(), StitchTupleSet(tuples=[StitchTuple(0, 1, (1.0,), 1.0)]))


def test_pessimistic_below_optimistic():
    inst = generate_instance(3)
    tuples = inst.stitch_sets[0].with_penalties([0.3] * len(inst.stitch_sets[0]))
    m_minus, m_plus = build_m_minus_plus(inst.m0, tuples)
    choice = np.zeros(m_minus.n_states, dtype=np.int64)
    for s, edges in enumerate(m_minus.actions_per_state):
        choice[s] = len(edges) - 1
    assert np.all(policy_values_exact(m_minus, choice) <= policy_values_exact(m_plus, choice) + 1e-12)


# ───── bisimulation ─────
def test_identical_states_are_at_distance_zero():
    mdp = TabularMdp(states=[vec(0), vec(1)], actions_per_state=[[edge(0, 0.5)], [edge(1, 0.5)]], discount=0.9)
    for method in ("solve", "iterate"):
        assert exact_bisim_distance(mdp, [0, 0], method)(0, 1) == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("method", ["solve", "iterate"])
def test_absorbing_pair_distance(method):
    mdp = TabularMdp(states=[vec(0), vec(1)], actions_per_state=[[edge(0, 0.2)], [edge(1, -0.3)]], discount=0.9)
    table = exact_bisim_distance(mdp, [0, 0], method)
    assert table(0, 1) == pytest.approx(0.5 / (1 - 0.9), abs=1e-6)
    assert table(1, 0) == pytest.approx(table(0, 1), abs=1e-9)


def test_values_are_lipschitz_in_bisimulation_distance():
    for seed in range(5):
        inst = generate_instance(seed)
        choice = np.zeros(inst.m_true.n_states, dtype=np.int64)
        values = policy_values_exact(inst.m_true, choice)
        assert lipschitz_gap(values, exact_bisim_distance(inst.m_true, choice)) <= 1e-9


def test_stochastic_policy_is_unsupported():
    mdp = _two_state_m0()
    policy = boltzmann_policy(value_iteration(mdp), mdp, 0.25)
    with pytest.raises(UnsupportedError):
        exact_bisim_distance(mdp, policy)


def test_expansion_matches_linear_solve():
    inst = generate_instance(11)
    tuples = inst.stitch_sets[0].with_penalties([0.2] * len(inst.stitch_sets[0]))
    m_minus, m_plus = build_m_minus_plus(inst.m0, tuples)
    choice = np.asarray([len(e) - 1 for e in m_minus.actions_per_state])
    np.testing.assert_allclose(hitting_time_expansion(m_minus, choice, -1),
                               policy_values_exact(m_minus, choice), atol=1e-9)
    np.testing.assert_allclose(hitting_time_expansion(m_minus, choice, +1),
                               policy_values_exact(m_plus, choice), atol=1e-9)


# ───── certificates ─────
def test_too_small_penalty_voids_the_certificate():
    m_true, m0, tuples = _hand_instance()
    report = certify_sandwich(m_true, m0, tuples.with_penalties([1.0]), policy_minus=[1, 0])
    assert report.min_penalties == pytest.approx([10.0])
    assert not report.assumptions_satisfied
    assert report.holds is None


def test_sufficient_penalty_certifies_the_sandwich():
    m_true, m0, tuples = _hand_instance()
    report = certify_sandwich(m_true, m0, tuples.with_penalties([10.0]), policy_minus=[1, 0])
    assert report.assumptions_satisfied
    assert report.holds is True
    assert report.v_minus[0] == pytest.approx(-9.0)
    assert report.v_true[0] == pytest.approx(9.0)
    assert report.v_plus[0] == pytest.approx(9.0)


def test_calibration_raises_penalty_to_the_gap():
    m_true, m0, tuples = _hand_instance()
    calibrated, _, rounds = calibrate_penalties(m0, m_true, tuples)
    assert calibrated.penalties == pytest.approx([10.0])
    assert rounds >= 2


def test_improvement_fires_where_lower_bound_beats_upper_bound():
    m0 = _two_state_m0()
    m0.actions_per_state[1] = [edge(1, 1.0)]
    m_true = TabularMdp(states=[vec(0), vec(1)],
                        actions_per_state=[[edge(0, action=0.0), edge(1, action=1.0)], [edge(1, 1.0)]],
                        discount=0.9, start_states=[0, 1])
    tuples = StitchTupleSet(tuples=[StitchTuple(0, 1, (1.0,), 0.0)], penalties=[0.0])
    _, m_plus = build_m_minus_plus(m0, StitchTupleSet())
    m_minus2, _ = build_m_minus_plus(m0, tuples)
    report = certify_improvement(m_plus, [0, 0], m_minus2, [1, 0], m_true)
    assert report.fired == [0]
    assert report.violations == []
    assert report.true_gain == pytest.approx([9.0])


def test_improvement_needs_matching_state_sets():
    m_true, m0, _ = _hand_instance()
    with pytest.raises(ContractError):
        certify_improvement(m0, [0, 0], m_true, [0, 0, 0], m_true)


def test_instances_are_seed_deterministic():
    a, b = generate_instance(5), generate_instance(5)
    assert mdp_to_dict(a.m_true) == mdp_to_dict(b.m_true)
    assert a.stitch_sets[0].tuples == b.stitch_sets[0].tuples


def test_small_verification_batch_passes():
    report = verify_bounds(0, n_instances=10)
    assert report["passed"]
    assert report["sandwich_violations"] == 0
    assert report["improvement_violations"] == 0
    assert len(report["instances"]) == 10


@pytest.mark.slow
def test_full_verification_batch_passes():
    assert verify_bounds(0, n_instances=100)["passed"]
