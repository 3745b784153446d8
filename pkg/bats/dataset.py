# bats/dataset.py
"""
Trajectory logs → M₀ and the neighbor graph.

File format (UTF-8 JSON-lines): a header line {"state_dim", "action_dim"},
then one record per line {"traj", "t", "s", "a", "r", "s2", "terminal"}
sorted by (traj, t).
"""
from __future__ import annotations
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union
import json
import math

import numpy as np
from sklearn.neighbors import KDTree, NearestNeighbors

from b_types.bats_types import make_record
from b_types.config_types import StartRegion
from bats.distance import DistanceMetric, EuclideanMetric, Normalizer
from bats.errors import DatasetLoadError, InputError
from bats.mdp_core import Edge, TabularMdp
from utils.log import get_logger

logger = get_logger(__name__)

SIZE_WARNING_RECORDS = 1_000_000


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return int(self.rewards.shape[0])


@dataclass
class TrajectoryDataset:
    trajectories: List[Trajectory]
    state_dim: int
    action_dim: int
    normalization: Normalizer

    @classmethod
    def from_trajectories(cls, trajectories: List[Trajectory], state_dim: int, action_dim: int) -> "TrajectoryDataset":
        if trajectories:
            pts = np.concatenate([np.concatenate([t.states, t.next_states[-1:]]) for t in trajectories])
            norm = Normalizer.fit(pts)
        else:
            norm = Normalizer.identity(state_dim)
        data = cls(trajectories=trajectories, state_dim=state_dim, action_dim=action_dim, normalization=norm)
        data.validate()
        return data

    @property
    def n_records(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def flat(self) -> Dict[str, np.ndarray]:
        """All records concatenated: states, actions, rewards, next_states, terminals."""
        if not self.trajectories:
            return {
                "states": np.zeros((0, self.state_dim)),
                "actions": np.zeros((0, self.action_dim)),
                "rewards": np.zeros(0),
                "next_states": np.zeros((0, self.state_dim)),
                "terminals": np.zeros(0, dtype=bool),
            }
        return {
            "states": np.concatenate([t.states for t in self.trajectories]),
            "actions": np.concatenate([t.actions for t in self.trajectories]),
            "rewards": np.concatenate([t.rewards for t in self.trajectories]),
            "next_states": np.concatenate([t.next_states for t in self.trajectories]),
            "terminals": np.concatenate([t.terminals for t in self.trajectories]),
        }

    def validate(self) -> None:
        for j, traj in enumerate(self.trajectories):
            n = len(traj)
            if n == 0:
                raise DatasetLoadError("empty trajectory", traj=j)
            shapes = (
                (traj.states, (n, self.state_dim), "state"),
                (traj.actions, (n, self.action_dim), "action"),
                (traj.next_states, (n, self.state_dim), "next_state"),
            )
            for arr, shape, what in shapes:
                if arr.shape != shape:
                    raise DatasetLoadError(f"{what} dim mismatch: {arr.shape} vs {shape}", traj=j)
            for i in range(n):
                if not (np.all(np.isfinite(traj.states[i])) and np.all(np.isfinite(traj.actions[i]))
                        and np.all(np.isfinite(traj.next_states[i])) and math.isfinite(traj.rewards[i])):
                    raise DatasetLoadError("non-finite value", traj=j, record=i)
                if i + 1 < n:
                    if traj.terminals[i]:
                        raise DatasetLoadError("terminal record before the end of the trajectory", traj=j, record=i)
                    if not np.array_equal(traj.next_states[i], traj.states[i + 1]):
                        raise DatasetLoadError("next_state does not match the following state", traj=j, record=i)


# ───────────────────────── file I/O ─────────────────────────
def _vec(rec: dict, key: str, dim: int, j: int, i: int) -> np.ndarray:
    try:
        v = np.asarray(rec[key], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetLoadError(f"bad field {key!r}: {e}", traj=j, record=i) from e
    if v.shape != (dim,):
        raise DatasetLoadError(f"{key!r} has shape {v.shape}, expected ({dim},)", traj=j, record=i)
    return v


def load_dataset(path: Union[str, Path]) -> TrajectoryDataset:
    path = Path(path)
    if not path.exists():
        raise DatasetLoadError(f"dataset file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in f if ln.strip()]
    if not lines:
        raise DatasetLoadError("empty dataset file")
    try:
        header = json.loads(lines[0])
        state_dim, action_dim = int(header["state_dim"]), int(header["action_dim"])
    except Exception as e:
        raise DatasetLoadError(f"bad header line: {e}") from e

    grouped: List[List[dict]] = []
    last_key: Optional[Tuple[int, int]] = None
    for lineno, ln in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(ln)
            key = (int(rec["traj"]), int(rec["t"]))
        except Exception as e:
            raise DatasetLoadError(f"line {lineno}: cannot parse record: {e}") from e
        if last_key is None or key[0] != last_key[0]:
            if last_key is not None and key[0] < last_key[0]:
                raise DatasetLoadError(f"line {lineno}: records not sorted by (traj, t)")
            grouped.append([])
        elif key[1] <= last_key[1]:
            raise DatasetLoadError(f"line {lineno}: records not sorted by (traj, t)")
        grouped[-1].append(rec)
        last_key = key

    trajectories = []
    for j, recs in enumerate(grouped):
        trajectories.append(Trajectory(
            states=np.stack([_vec(r, "s", state_dim, j, i) for i, r in enumerate(recs)]),
            actions=np.stack([_vec(r, "a", action_dim, j, i) for i, r in enumerate(recs)]),
            rewards=np.asarray([float(r.get("r", float("nan"))) for r in recs], dtype=np.float64),
            next_states=np.stack([_vec(r, "s2", state_dim, j, i) for i, r in enumerate(recs)]),
            terminals=np.asarray([bool(r.get("terminal", False)) for r in recs], dtype=bool),
        ))
    data = TrajectoryDataset.from_trajectories(trajectories, state_dim, action_dim)
    if data.n_records > SIZE_WARNING_RECORDS:
        logger.warning("dataset has %d records (> %d); expect slow stitching", data.n_records, SIZE_WARNING_RECORDS)
    logger.info("loaded %d trajectories, %d records from %s", len(trajectories), data.n_records, path)
    return data


def save_dataset(data: TrajectoryDataset, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"state_dim": data.state_dim, "action_dim": data.action_dim}) + "\n")
        for j, traj in enumerate(data.trajectories):
            for i in range(len(traj)):
                rec = make_record(
                    traj=j, t=i,
                    s=traj.states[i].tolist(), a=traj.actions[i].tolist(), r=traj.rewards[i],
                    s2=traj.next_states[i].tolist(), terminal=traj.terminals[i],
                )
                f.write(json.dumps(rec) + "\n")


# ───────────────────────── M₀ ─────────────────────────
def index_states(data: TrajectoryDataset) -> List[np.ndarray]:
    """Distinct dataset states (exact bit patterns) in first-seen order; shared by M₀ and the neighbor graph."""
    seen: Dict[bytes, int] = {}
    out: List[np.ndarray] = []
    for traj in data.trajectories:
        for i in range(len(traj)):
            for v in (traj.states[i], traj.next_states[i]):
                key = v.tobytes()
                if key not in seen:
                    seen[key] = len(out)
                    out.append(v)
    return out


def build_m0(data: TrajectoryDataset, discount: float) -> TabularMdp:
    if not data.trajectories:
        raise InputError("cannot build M0 from an empty dataset")
    states = index_states(data)
    index = {v.tobytes(): i for i, v in enumerate(states)}
    mdp = TabularMdp(states=states, discount=discount)

    outcomes: List[Dict[bytes, List[Tuple[int, float]]]] = [dict() for _ in states]
    terminal = set()
    starts = []
    n_dupes = 0
    for traj in data.trajectories:
        starts.append(index[traj.states[0].tobytes()])
        for i in range(len(traj)):
            s = index[traj.states[i].tobytes()]
            s2 = index[traj.next_states[i].tobytes()]
            r = float(traj.rewards[i])
            if traj.terminals[i]:
                terminal.add(s2)
            akey = traj.actions[i].tobytes()
            seen = outcomes[s].setdefault(akey, [])
            if (s2, r) in seen:
                n_dupes += 1
                continue
            if seen:
                logger.warning("state %d: action logged with %d different outcomes", s, len(seen) + 1)
            seen.append((s2, r))
            mdp.actions_per_state[s].append(Edge(action=traj.actions[i].copy(), next_state=s2, reward=r))

    for s in sorted(terminal):
        if mdp.actions_per_state[s]:
            logger.warning("terminal state %d also has logged actions; treating it as absorbing", s)
        mdp.terminal_flags[s] = True
        mdp.make_absorbing(s, data.action_dim)
    n_dead = 0
    for s in range(mdp.n_states):
        if not mdp.actions_per_state[s]:
            mdp.make_absorbing(s, data.action_dim)
            n_dead += 1
    mdp.start_states = list(dict.fromkeys(starts))
    mdp.touch()
    logger.info("M0: %d states, %d edges (%d duplicates merged, %d dead ends), %d starts",
                mdp.n_states, mdp.n_edges, n_dupes, n_dead, len(mdp.start_states))
    return mdp


# ───────────────────────── neighbor graph ─────────────────────────
@dataclass
class NeighborGraph:
    mode: str                  # "radius" | "knn"
    param: Union[float, int]
    metric: str
    adjacency: List[np.ndarray]

    @property
    def n(self) -> int:
        return len(self.adjacency)

    def neighbors(self, i: int) -> np.ndarray:
        """Neighbors of dataset state `i`; states added later (imagined) have none."""
        if 0 <= i < len(self.adjacency):
            return self.adjacency[i]
        return np.zeros(0, dtype=np.int64)

    @property
    def n_edges(self) -> int:
        total = sum(len(a) for a in self.adjacency)
        return total // 2 if self.mode == "radius" else total


def build_neighbor_graph(
    source: Union[TrajectoryDataset, np.ndarray, List[np.ndarray]],
    mode: str,
    param: Union[float, int],
    metric: Optional[DistanceMetric] = None,
) -> NeighborGraph:
    """ε-ball (symmetric, exact) or directed k-NN graph over dataset states, indexed like M₀."""
    metric = metric or EuclideanMetric()
    pts = np.asarray(index_states(source) if isinstance(source, TrajectoryDataset) else source, dtype=np.float64)
    n = pts.shape[0]
    if n == 0:
        raise InputError("no states to build a neighbor graph over")
    x = metric.transform(pts)

    if mode == "radius":
        if not param > 0:
            raise InputError(f"neighbor radius must be > 0, got {param}")
        found = KDTree(x).query_radius(x, r=float(param))
        sets = [set() for _ in range(n)]
        for i, nbrs in enumerate(found):
            for j in nbrs:
                j = int(j)
                if j != i:
                    sets[i].add(j)
                    sets[j].add(i)
        adjacency = [np.asarray(sorted(s), dtype=np.int64) for s in sets]
    elif mode == "knn":
        k = int(param)
        if k < 1 or k >= n:
            raise InputError(f"k must satisfy 1 <= k < {n}, got {param}")
        _, ind = NearestNeighbors(n_neighbors=k).fit(x).kneighbors()
        adjacency = [np.asarray(row, dtype=np.int64) for row in ind]
    else:
        raise InputError(f"unknown neighbor mode {mode!r}")

    graph = NeighborGraph(mode=mode, param=param, metric=metric.name, adjacency=adjacency)
    logger.info("neighbor graph (%s=%s, %s): %d states, %d edges", mode, param, metric.name, n, graph.n_edges)
    return graph


def relabel_start_states(mdp: TabularMdp, data: TrajectoryDataset, start_predicate: StartRegion) -> TabularMdp:
    """Add every dataset state inside the region to the start set (original starts kept)."""
    dataset_idx = [s for s in range(mdp.n_states) if not mdp.imagined_flags[s]]
    if dataset_idx and mdp.states[dataset_idx[0]].shape[0] != data.state_dim:
        raise InputError("MDP and dataset state dims differ")
    out = mdp.copy()
    if not dataset_idx:
        return out
    mask = start_predicate.contains(np.stack([mdp.states[s] for s in dataset_idx]))
    matched = [s for s, m in zip(dataset_idx, mask) if m]
    if not matched:
        logger.warning("start region matched no dataset states; start set unchanged")
        return out
    out.start_states = list(dict.fromkeys(list(mdp.start_states) + matched))
    logger.info("start states: %d → %d", len(mdp.start_states), len(out.start_states))
    return out
