import math

import numpy as np
import pytest

from bats.dataset import NeighborGraph, build_neighbor_graph
from bats.errors import ContractError, InputError
from bats.mdp_core import TabularMdp, TabularPolicy, ValueTable
from bats.stitching import (
    StitchCandidate,
    StitchLog,
    StitchRecord,
    apply_stitch,
    filter_impactful,
    find_feasible,
    make_log_entry,
)
from conftest import additive_ensemble, edge, random_mdp, vec


def _graph(adjacency):
    return NeighborGraph(mode="radius", param=1.0, metric="euclidean",
                         adjacency=[np.asarray(a, dtype=np.int64) for a in adjacency])


def _hop_distances(mdp: TabularMdp) -> np.ndarray:
    n = mdp.n_states
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for s, edges in enumerate(mdp.actions_per_state):
        for e in edges:
            if not e.absorbing and e.next_state != s:
                d[s, e.next_state] = 1.0
    for m in range(n):
        d = np.minimum(d, d[:, m, None] + d[None, m, :])
    return d


def _oracle(mdp: TabularMdp, graph: NeighborGraph, s: int, K: int, hop: str):
    if mdp.terminal_flags[s]:
        return {}
    d = _hop_distances(mdp)
    best = {}
    for u in range(mdp.n_states):
        if d[s, u] > K:
            continue
        for w in graph.neighbors(u):
            ends = [(int(w), 0.0)] if hop == "last" else [(v, d[w, v]) for v in range(mdp.n_states)]
            for v, d2 in ends:
                total = d[s, u] + d2
                if total > K or v >= graph.n or mdp.imagined_flags[v]:
                    continue
                k = max(1, int(total))
                best[v] = min(best.get(v, k), k)
    return best


# ───── enumeration ─────
def test_single_hop_after_one_edge():
    mdp = TabularMdp(states=[vec(0), vec(1), vec(2)], actions_per_state=[[edge(1)], [edge(1)], [edge(2)]],
                     discount=0.9, start_states=[0])
    cands = find_feasible(mdp, _graph([[], [2], [1]]), 0, 1)
    assert [(c.source, c.target, c.k) for c in cands] == [(0, 2, 1)]
    assert cands[0].path_witness == (("mdp", 0, 1), ("neighbor", 1, 2))


def test_direct_neighbor_needs_one_planned_action():
    mdp = TabularMdp(states=[vec(0), vec(1)], actions_per_state=[[edge(0)], [edge(1)]], discount=0.9)
    cands = find_feasible(mdp, _graph([[1], [0]]), 0, 3)
    assert [(c.target, c.k) for c in cands] == [(1, 1)]


@pytest.mark.parametrize("hop", ["last", "anywhere"])
def test_enumeration_matches_exhaustive_search(hop):
    rng = np.random.default_rng(21)
    mdp = random_mdp(rng, n=50, max_actions=2, discount=0.9, n_terminal=5)
    graph = build_neighbor_graph(rng.uniform(size=(50, 2)), "radius", 0.15)
    for s in range(mdp.n_states):
        for K in (1, 2, 3):
            got = {c.target: c.k for c in find_feasible(mdp, graph, s, K, hop)}
            assert got == _oracle(mdp, graph, s, K, hop), (s, K)


def test_terminal_state_is_never_a_source():
    mdp = random_mdp(np.random.default_rng(0), n=6, max_actions=2, discount=0.9, n_terminal=1)
    graph = _graph([[5]] * 5 + [[0]])
    assert find_feasible(mdp, graph, 5, 3) == []


def test_imagined_states_are_not_targets():
    mdp = TabularMdp(states=[vec(0), vec(1)], actions_per_state=[[edge(1)], [edge(0)]], discount=0.9)
    extra = mdp.add_state(vec(1.5), imagined=True)
    mdp.add_edge(extra, edge(0))
    graph = _graph([[1], [0]])
    assert all(c.target != extra for c in find_feasible(mdp, graph, 0, 3, "anywhere"))


@pytest.mark.parametrize("state,K,hop", [(9, 1, "last"), (0, 0, "last"), (0, 1, "sideways")])
def test_bad_enumeration_arguments(state, K, hop):
    mdp = TabularMdp(states=[vec(0)], actions_per_state=[[edge(0)]], discount=0.9)
    with pytest.raises(InputError):
        find_feasible(mdp, _graph([[]]), state, K, hop)


# ───── impact filter ─────
def _chain_with_values(values):
    mdp = TabularMdp(states=[vec(0), vec(1), vec(2)],
                     actions_per_state=[[edge(1)], [edge(1)], [edge(2)]], discount=0.9, start_states=[0])
    offsets = np.arange(4)
    table = ValueTable(values=np.asarray(values, dtype=np.float64), q_values=np.asarray(values, dtype=np.float64),
                       offsets=offsets, iterations_run=0, residual=0.0)
    policy = TabularPolicy(mode="greedy", offsets=offsets, choice=np.zeros(3, dtype=np.int64))
    return mdp, table, policy


def test_filter_keeps_strictly_better_targets():
    mdp, table, policy = _chain_with_values([0.0, 1.0, 3.0])
    kept = filter_impactful([StitchCandidate(0, 2, 1)], table, policy, mdp)
    assert len(kept) == 1
    assert kept[0].advantage == pytest.approx(2.0)


def test_filter_rejects_equal_value():
    mdp, table, policy = _chain_with_values([0.0, 1.0, 1.0])
    assert filter_impactful([StitchCandidate(0, 2, 1)], table, policy, mdp) == []


def test_filter_compares_against_k_step_rollout():
    mdp, table, policy = _chain_with_values([5.0, 1.0, 3.0])
    # two steps from 0 still end at state 1, not back at 0
    assert len(filter_impactful([StitchCandidate(0, 2, 2)], table, policy, mdp)) == 1


# ───── commit ─────
def _two_point_mdp():
    return TabularMdp(states=[vec(0, 0), vec(1, 0)], actions_per_state=[
        [edge(0, action=0.0)], [edge(1, action=0.0)]
    ], discount=0.9, start_states=[0])


def _fix_action_dims(mdp):
    for edges in mdp.actions_per_state:
        for e in edges:
            e.action = np.zeros(2)
    return mdp


def _record(source, target, actions, predicted, accepted=True):
    actions = np.asarray(actions, dtype=np.float64)
    return StitchRecord(candidate=StitchCandidate(source, target, len(actions)), actions=actions,
                        predicted_states=np.asarray(predicted, dtype=np.float64),
                        achieved_distance=0.1, accepted=accepted)


def test_single_edge_penalty():
    mdp = _fix_action_dims(_two_point_mdp())
    rec = _record(0, 1, [[1.0, 0.0]], [[1.1, 0.0]])
    out = apply_stitch(mdp, rec, additive_ensemble(2, reward=0.5), 20.0)
    stitched = out.actions_per_state[0][-1]
    assert stitched.is_stitch and stitched.next_state == 1
    assert stitched.penalty == pytest.approx(2.0)
    assert stitched.effective_reward == pytest.approx(-1.5)
    assert rec.stitch_id == 0 and out.next_stitch_id == 1
    assert mdp.n_edges == 2
    out.validate()


def test_exact_landing_costs_nothing():
    mdp = _fix_action_dims(_two_point_mdp())
    out = apply_stitch(mdp, _record(0, 1, [[1.0, 0.0]], [[1.0, 0.0]]), additive_ensemble(2, reward=0.5), 20.0)
    assert out.actions_per_state[0][-1].penalty == 0.0
    assert out.actions_per_state[0][-1].effective_reward == pytest.approx(0.5)


def test_multi_step_chain_adds_imagined_states():
    mdp = _fix_action_dims(_two_point_mdp())
    rec = _record(0, 1, [[0.3, 0.0]] * 3, [[0.3, 0.0], [0.6, 0.0], [0.9, 0.0]])
    out = apply_stitch(mdp, rec, additive_ensemble(2), 1.0)
    assert out.n_states == 4
    assert out.imagined_flags == [False, False, True, True]
    assert out.n_edges == mdp.n_edges + 3
    chain = [0, 2, 3, 1]
    for a, b in zip(chain, chain[1:]):
        assert any(e.is_stitch and e.next_state == b for e in out.actions_per_state[a])
    assert all(p == pytest.approx(0.1) for p in rec.penalties)
    out.validate()


def test_final_gamma_penalizes_last_edge_only():
    mdp = _fix_action_dims(_two_point_mdp())
    rec = _record(0, 1, [[0.5, 0.0]] * 2, [[0.5, 0.0], [0.9, 0.0]])
    apply_stitch(mdp, rec, additive_ensemble(2), 10.0, penalty_mode="final_gamma")
    assert rec.penalties[0] == 0.0
    assert rec.penalties[1] == pytest.approx(0.9 * 10.0 * 0.1)


def test_unaccepted_record_is_refused():
    mdp = _fix_action_dims(_two_point_mdp())
    with pytest.raises(ContractError):
        apply_stitch(mdp, _record(0, 1, [[1.0, 0.0]], [[1.0, 0.0]], accepted=False), additive_ensemble(2), 1.0)


def test_imagined_target_is_refused():
    mdp = _fix_action_dims(_two_point_mdp())
    out = apply_stitch(mdp, _record(0, 1, [[0.5, 0.0]] * 2, [[0.5, 0.0], [1.0, 0.0]]), additive_ensemble(2), 1.0)
    with pytest.raises(ContractError):
        apply_stitch(out, _record(0, 2, [[0.5, 0.0]], [[0.5, 0.0]]), additive_ensemble(2), 1.0)


def test_applying_twice_is_a_no_op():
    mdp = _fix_action_dims(_two_point_mdp())
    rec = _record(0, 1, [[1.0, 0.0]], [[1.05, 0.0]])
    once = apply_stitch(mdp, rec, additive_ensemble(2), 1.0)
    twice = apply_stitch(once, rec, additive_ensemble(2), 1.0)
    assert twice.n_edges == once.n_edges
    assert twice.n_states == once.n_states
    assert twice.next_stitch_id == 1


# ───── audit log ─────
def test_log_round_trip(tmp_path):
    path = tmp_path / "stitch_log.jsonl"
    log = StitchLog(path)
    rec = _record(0, 1, [[1.0, 0.0]], [[1.0, 0.0]])
    rec.stitch_id = 4
    log.append(make_log_entry(rec))
    rejected = _record(0, 1, [[1.0, 0.0]], [[3.0, 0.0]], accepted=False)
    log.append(make_log_entry(rejected, terminal_distance=2.0))
    entries = StitchLog.read(path)
    assert [e["stitch_id"] for e in entries] == [4, -1]
    assert entries[0]["terminal_distance"] is None
    assert entries[1]["terminal_distance"] == 2.0
    assert not math.isnan(entries[1]["achieved_distance"])


def test_log_truncate_removes_file(tmp_path):
    path = tmp_path / "stitch_log.jsonl"
    log = StitchLog(path)
    log.append(make_log_entry(_record(0, 1, [[1.0, 0.0]], [[1.0, 0.0]])))
    log.truncate()
    assert not path.exists()
    assert log.entries == []
