import json

import numpy as np
import pytest

from b_types.config_types import GeneratorSpec, StartRegion
from bats.dataset import (
    build_m0,
    build_neighbor_graph,
    load_dataset,
    relabel_start_states,
    save_dataset,
)
from bats.distance import EuclideanMetric
from bats.errors import DatasetLoadError, InputError
from conftest import dataset, trajectory
from envs.generate import generate_dataset
from envs.mountain_car import MountainCarEnv


def _write(path, header, records):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header) + "\n")
        for r in records:
            f.write(json.dumps(r) + "\n")


def _rec(traj, t, s, a, r, s2, terminal=False):
    return {"traj": traj, "t": t, "s": s, "a": a, "r": r, "s2": s2, "terminal": terminal}


# ───── loading ─────
def test_load_single_trajectory(tmp_path):
    path = tmp_path / "d.jsonl"
    _write(path, {"state_dim": 1, "action_dim": 1}, [
        _rec(0, 0, [0.0], [1.0], 0.0, [1.0]),
        _rec(0, 1, [1.0], [1.0], 1.0, [2.0], True),
    ])
    data = load_dataset(path)
    assert len(data.trajectories) == 1
    assert len(data.trajectories[0]) == 2
    assert data.trajectories[0].terminals.tolist() == [False, True]


def test_broken_chaining_names_the_record(tmp_path):
    path = tmp_path / "d.jsonl"
    _write(path, {"state_dim": 1, "action_dim": 1}, [
        _rec(0, 0, [0.0], [1.0], 0.0, [1.0]),
        _rec(0, 1, [5.0], [1.0], 1.0, [6.0]),
    ])
    with pytest.raises(DatasetLoadError) as err:
        load_dataset(path)
    assert (err.value.traj, err.value.record) == (0, 0)


def test_dimension_mismatch(tmp_path):
    path = tmp_path / "d.jsonl"
    _write(path, {"state_dim": 2, "action_dim": 1}, [_rec(0, 0, [0.0], [1.0], 0.0, [1.0, 0.0])])
    with pytest.raises(DatasetLoadError) as err:
        load_dataset(path)
    assert err.value.traj == 0


def test_non_finite_value(tmp_path):
    path = tmp_path / "d.jsonl"
    _write(path, {"state_dim": 1, "action_dim": 1}, [_rec(0, 0, [0.0], [1.0], float("nan"), [1.0])])
    with pytest.raises(DatasetLoadError):
        load_dataset(path)


def test_unsorted_records(tmp_path):
    path = tmp_path / "d.jsonl"
    _write(path, {"state_dim": 1, "action_dim": 1}, [
        _rec(0, 1, [1.0], [1.0], 0.0, [2.0]),
        _rec(0, 0, [0.0], [1.0], 0.0, [1.0]),
    ])
    with pytest.raises(DatasetLoadError):
        load_dataset(path)


def test_generated_mountain_car_data_loads(tmp_path):
    env = MountainCarEnv()
    data = generate_dataset(env, GeneratorSpec(n_expert=5, n_random=100, seed=0, max_steps=60))
    path = tmp_path / "mc.jsonl"
    save_dataset(data, path)
    loaded = load_dataset(path)
    assert (loaded.state_dim, loaded.action_dim) == (2, 1)
    assert len(loaded.trajectories) == 105
    assert loaded.n_records == data.n_records


# ───── M0 ─────
def test_m0_counts():
    data = dataset(trajectory([[0.0], [1.0], [2.0], [3.0]], [[1.0]] * 3, [0.0, 0.0, 1.0]))
    mdp = build_m0(data, 0.9)
    assert mdp.n_states == 4
    assert sum(not e.absorbing for edges in mdp.actions_per_state for e in edges) == 3
    assert mdp.start_states == [0]
    mdp.validate()


def test_shared_state_gets_both_actions():
    a = trajectory([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]], [[1.0, 1.0], [1.0, -1.0]], [0.0, 0.0])
    b = trajectory([[0.0, 2.0], [1.0, 1.0], [2.0, 2.0]], [[1.0, -1.0], [1.0, 1.0]], [0.0, 0.0])
    mdp = build_m0(dataset(a, b), 0.9)
    shared = next(i for i, s in enumerate(mdp.states) if np.array_equal(s, [1.0, 1.0]))
    assert len(mdp.actions_per_state[shared]) == 2
    assert sorted(mdp.start_states) == sorted([0, 3])


def test_duplicate_transition_is_merged():
    t = trajectory([[0.0], [1.0], [2.0]], [[1.0]] * 2, [0.0, 1.0])
    single = build_m0(dataset(t), 0.9)
    double = build_m0(dataset(t, t), 0.9)
    assert double.n_edges == single.n_edges
    assert double.start_states == [0]


def test_terminal_next_state_is_absorbing():
    data = dataset(trajectory([[0.0], [1.0]], [[1.0]], [1.0], terminal=True))
    mdp = build_m0(data, 0.9)
    assert mdp.terminal_flags == [False, True]
    assert mdp.actions_per_state[1][0].absorbing


def test_m0_of_empty_dataset():
    from bats.dataset import TrajectoryDataset

    with pytest.raises(InputError):
        build_m0(TrajectoryDataset.from_trajectories([], 1, 1), 0.9)


# ───── neighbor graph ─────
def test_radius_pair_inside():
    graph = build_neighbor_graph(np.array([[0.0, 0.0], [0.1, 0.0]]), "radius", 0.2)
    assert graph.n_edges == 1
    assert graph.neighbors(0).tolist() == [1]
    assert graph.neighbors(1).tolist() == [0]


def test_radius_pair_outside():
    graph = build_neighbor_graph(np.array([[0.0, 0.0], [0.3, 0.0]]), "radius", 0.2)
    assert graph.n_edges == 0


def test_radius_matches_brute_force(rng):
    pts = rng.uniform(size=(1000, 2))
    graph = build_neighbor_graph(pts, "radius", 0.05, EuclideanMetric())
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    for i in range(len(pts)):
        expected = [j for j in np.flatnonzero(d[i] <= 0.05) if j != i]
        assert graph.neighbors(i).tolist() == expected


def test_knn_matches_brute_force(rng):
    pts = rng.uniform(size=(200, 3))
    graph = build_neighbor_graph(pts, "knn", 5)
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    for i in range(len(pts)):
        assert sorted(graph.neighbors(i).tolist()) == sorted(np.argsort(d[i])[:5].tolist())


def test_imagined_states_have_no_neighbors():
    graph = build_neighbor_graph(np.array([[0.0], [0.1]]), "radius", 0.2)
    assert graph.neighbors(7).tolist() == []


@pytest.mark.parametrize("mode,param", [("radius", 0.0), ("radius", -1.0), ("knn", 3), ("knn", 0), ("ball", 1)])
def test_bad_graph_parameters(mode, param):
    with pytest.raises(InputError):
        build_neighbor_graph(np.array([[0.0], [1.0], [2.0]]), mode, param)


# ───── start states ─────
def _line_data():
    return dataset(trajectory([[float(i), 0.0] for i in range(6)], [[1.0, 0.0]] * 5, [0.0] * 5))


def test_region_matching_nothing_keeps_starts():
    data = _line_data()
    mdp = build_m0(data, 0.9)
    region = StartRegion(kind="box", low=[100.0, 100.0], high=[101.0, 101.0])
    assert relabel_start_states(mdp, data, region).start_states == mdp.start_states


def test_region_covering_everything():
    data = _line_data()
    mdp = build_m0(data, 0.9)
    region = StartRegion(kind="box", low=[-1e9, -1e9], high=[1e9, 1e9])
    assert sorted(relabel_start_states(mdp, data, region).start_states) == list(range(mdp.n_states))


def test_mountain_car_start_box_matches_linear_scan():
    env = MountainCarEnv()
    data = generate_dataset(env, GeneratorSpec(n_expert=2, n_random=20, seed=3, max_steps=80))
    mdp = build_m0(data, 0.99)
    region = env.start_region()
    out = relabel_start_states(mdp, data, region)
    matching = {i for i, s in enumerate(mdp.states)
                if -0.6 <= s[0] <= -0.4 and abs(s[1]) <= 1e-3}
    assert set(out.start_states) == matching | set(mdp.start_states)
