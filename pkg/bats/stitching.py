# bats/stitching.py
"""
Stitch candidates and stitch commits.

A candidate (s → s', k) is justified by a path of at most K MDP edges plus
exactly one neighbor-graph edge; k counts the MDP edges (at least one
planned action). Targets are always original dataset states.
"""
from __future__ import annotations
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple
import hashlib
import json

import numpy as np

from b_types.bats_types import StitchLogEntry
from bats.dataset import NeighborGraph
from bats.distance import DistanceMetric, EuclideanMetric
from bats.dynamics import ModelEnsemble
from bats.errors import ContractError, InputError
from bats.mdp_core import Edge, TabularMdp, TabularPolicy, ValueTable, rollout
from utils.log import get_logger

logger = get_logger(__name__)

# ("mdp", u, v) for a directed MDP edge, ("neighbor", u, v) for the single neighbor hop
WitnessStep = Tuple[str, int, int]


@dataclass(frozen=True)
class StitchCandidate:
    source: int
    target: int
    k: int
    path_witness: Tuple[WitnessStep, ...] = ()
    advantage: float = 0.0

    @property
    def pair(self) -> Tuple[int, int]:
        return self.source, self.target


@dataclass
class StitchRecord:
    candidate: StitchCandidate
    actions: np.ndarray              # (k, action_dim)
    predicted_states: np.ndarray     # (k, state_dim); the last one should land near the target
    achieved_distance: float
    accepted: bool
    iteration_added: int = 0
    stitch_id: int = -1
    penalties: List[float] = field(default_factory=list)

    @property
    def intermediate_states(self) -> np.ndarray:
        return self.predicted_states[:-1]


# ───────────────────────── enumeration ─────────────────────────
def _bfs(mdp: TabularMdp, start: int, depth: int) -> Tuple[Dict[int, int], Dict[int, Tuple[int, int]]]:
    """Min number of non-padding MDP edges from `start` (≤ depth) and BFS parents."""
    dist = {start: 0}
    parent: Dict[int, Tuple[int, int]] = {}
    frontier = deque([start])
    while frontier:
        u = frontier.popleft()
        if dist[u] == depth:
            continue
        for e in mdp.actions_per_state[u]:
            v = e.next_state
            if e.absorbing or v in dist:
                continue
            dist[v] = dist[u] + 1
            parent[v] = (u, dist[v])
            frontier.append(v)
    return dist, parent


def _walk(parent: Dict[int, Tuple[int, int]], start: int, end: int) -> List[WitnessStep]:
    steps: List[WitnessStep] = []
    v = end
    while v != start:
        u, _ = parent[v]
        steps.append(("mdp", u, v))
        v = u
    return steps[::-1]


def _is_target(mdp: TabularMdp, neighbors: NeighborGraph, v: int) -> bool:
    return v < neighbors.n and not mdp.imagined_flags[v]


def find_feasible(
    mdp: TabularMdp,
    neighbors: NeighborGraph,
    from_state: int,
    K: int,
    hop: str = "last",
) -> List[StitchCandidate]:
    """
    All targets reachable from `from_state` through ≤ K MDP edges and one
    neighbor edge. hop="last" puts the neighbor edge at the end of the path;
    hop="anywhere" allows MDP edges after it as well. Duplicates keep the
    smallest k. Terminal states are never sources.
    """
    if not 0 <= from_state < mdp.n_states:
        raise InputError(f"state {from_state} out of range")
    if K < 1:
        raise InputError(f"K must be >= 1, got {K}")
    if hop not in ("last", "anywhere"):
        raise InputError(f"unknown neighbor hop mode {hop!r}")
    if mdp.terminal_flags[from_state]:
        return []

    dist, parent = _bfs(mdp, from_state, K)
    best: Dict[int, Tuple[int, List[WitnessStep]]] = {}

    def offer(target: int, n_mdp: int, witness_fn) -> None:
        k = max(1, n_mdp)
        if target not in best or k < best[target][0]:
            best[target] = (k, witness_fn())

    after_hop: Dict[int, Tuple[Dict[int, int], Dict[int, Tuple[int, int]]]] = {}
    for u in sorted(dist, key=lambda s: (dist[s], s)):
        d1 = dist[u]
        for w in neighbors.neighbors(u):
            w = int(w)
            hop_step: WitnessStep = ("neighbor", u, w)
            if hop == "last":
                if _is_target(mdp, neighbors, w):
                    offer(w, d1, lambda u=u, w=w, hs=hop_step: _walk(parent, from_state, u) + [hs])
                continue
            if w not in after_hop:
                after_hop[w] = _bfs(mdp, w, K)
            dist2, parent2 = after_hop[w]
            for v, d2 in dist2.items():
                if d1 + d2 <= K and _is_target(mdp, neighbors, v):
                    offer(v, d1 + d2, lambda u=u, w=w, v=v, hs=hop_step, p2=parent2:
                          _walk(parent, from_state, u) + [hs] + _walk(p2, w, v))

    return [
        StitchCandidate(source=from_state, target=t, k=k, path_witness=tuple(witness))
        for t, (k, witness) in sorted(best.items())
    ]


def filter_impactful(
    candidates: List[StitchCandidate],
    values: ValueTable,
    policy: TabularPolicy,
    mdp: TabularMdp,
) -> List[StitchCandidate]:
    """Keep candidates whose target beats the state the greedy policy reaches in k steps."""
    v = values.values
    kept: List[StitchCandidate] = []
    for c in candidates:
        reached = rollout(mdp, policy.choice, c.source, c.k)[-1]
        advantage = float(v[c.target] - v[reached])
        if advantage > 0:
            kept.append(replace(c, advantage=advantage))
    return kept


# ───────────────────────── commit ─────────────────────────
def stitch_key(source: int, target: int, actions: np.ndarray) -> str:
    digest = hashlib.sha256(np.ascontiguousarray(actions, dtype=np.float64).tobytes()).hexdigest()[:16]
    return f"{source}->{target}:{digest}"


def apply_stitch(
    mdp: TabularMdp,
    record: StitchRecord,
    reward_model: ModelEnsemble,
    penalty_coefficient: float,
    metric: Optional[DistanceMetric] = None,
    penalty_mode: str = "all_edges",
    inplace: bool = False,
) -> TabularMdp:
    """
    Insert the planned chain source → ŝ₁ → … → ŝ_{k−1} → target.
    Every inserted edge carries reward r̃ and penalty c·scale·d(ŝ_k, target),
    with scale 1 on all edges ("all_edges") or γ on the final edge only
    ("final_gamma"). Applying the same record twice is a no-op.
    """
    if not record.accepted:
        raise ContractError(
            f"stitch {record.candidate.source}->{record.candidate.target} was not accepted "
            f"(distance {record.achieved_distance:.4g})"
        )
    if penalty_mode not in ("all_edges", "final_gamma"):
        raise InputError(f"unknown penalty mode {penalty_mode!r}")
    if penalty_coefficient < 0:
        raise InputError("penalty coefficient must be >= 0")
    metric = metric or EuclideanMetric()
    out = mdp if inplace else mdp.copy()

    c = record.candidate
    actions = np.asarray(record.actions, dtype=np.float64)
    key = stitch_key(c.source, c.target, actions)
    if key in out.stitch_keys:
        record.stitch_id = out.stitch_keys[key]
        return out
    if out.imagined_flags[c.target]:
        raise ContractError(f"stitch target {c.target} is an imagined state")

    k = actions.shape[0]
    predicted = np.asarray(record.predicted_states, dtype=np.float64)
    if predicted.shape[0] != k:
        raise ContractError("predicted states and actions disagree on k")
    chain_vectors = np.concatenate([out.states[c.source][None], predicted[:-1]])
    rewards = reward_model.predict_reward_batch(chain_vectors, actions)
    distance = float(metric.distance(predicted[-1], out.states[c.target]))

    sid = out.next_stitch_id
    out.next_stitch_id += 1
    nodes = [c.source] + [out.add_state(v, imagined=True) for v in predicted[:-1]] + [c.target]
    record.penalties = []
    for i in range(k):
        if penalty_mode == "all_edges":
            scale = 1.0
        else:
            scale = out.discount if i == k - 1 else 0.0
        penalty = penalty_coefficient * scale * distance
        record.penalties.append(penalty)
        out.add_edge(nodes[i], Edge(
            action=actions[i].copy(),
            next_state=nodes[i + 1],
            reward=float(rewards[i]),
            is_stitch=True,
            penalty=penalty,
            distance=distance,
            penalty_scale=scale,
            stitch_id=sid,
        ))
    out.stitch_keys[key] = sid
    record.stitch_id = sid
    return out


# ───────────────────────── audit log ─────────────────────────
def make_log_entry(record: StitchRecord, terminal_distance: float = float("nan")) -> StitchLogEntry:
    c = record.candidate
    return StitchLogEntry(
        iteration=int(record.iteration_added),
        source=int(c.source),
        target=int(c.target),
        k=int(c.k),
        accepted=bool(record.accepted),
        achieved_distance=float(record.achieved_distance),
        terminal_distance=float(terminal_distance),
        advantage=float(c.advantage),
        stitch_id=int(record.stitch_id) if record.accepted else -1,
    )


class StitchLog:
    """Append-only JSON-lines audit of every attempted candidate."""

    def __init__(self, path: Optional[str | Path] = None) -> None:
        self.path = Path(path) if path else None
        self.entries: List[StitchLogEntry] = []

    def append(self, entry: StitchLogEntry) -> None:
        self.entries.append(entry)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(_jsonable(entry)) + "\n")

    def truncate(self) -> None:
        self.entries = []
        if self.path is not None and self.path.exists():
            self.path.unlink()

    @staticmethod
    def read(path: str | Path) -> List[StitchLogEntry]:
        with open(path, "r", encoding="utf-8") as f:
            return [json.loads(ln) for ln in f if ln.strip()]


def _jsonable(entry: StitchLogEntry) -> dict:
    d = dict(entry)
    td = d.get("terminal_distance")
    if td is not None and td != td:
        d["terminal_distance"] = None
    return d
