# bats/mdp_core.py
"""
Finite deterministic MDPs over logged states.

A `TabularMdp` stores one list of outgoing edges per state. Value iteration,
policies and occupancy sampling work on a flat compiled view of those edges
(`src`, `dst`, effective reward, per-state `offsets`), so every per-state
reduction is a `reduceat` over a contiguous slice.

Effective reward of an edge is `reward - penalty`; stitched edges carry their
penalty separately so the optimistic view can be rebuilt (see bats.bounds).
"""
from __future__ import annotations
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence
import math

import networkx as nx
import numpy as np

from bats.errors import ConfigError, InputError, StructuralError, VersionError
from utils.helpers import read_json, write_json
from utils.log import get_logger

logger = get_logger(__name__)

MDP_FORMAT = "bats-mdp"
MDP_VERSION = 1


@dataclass
class Edge:
    action: np.ndarray
    next_state: int
    reward: float
    is_stitch: bool = False
    penalty: float = 0.0
    distance: float = 0.0        # d(predicted end, target) for stitched edges
    penalty_scale: float = 0.0   # penalty = coefficient * penalty_scale * distance
    stitch_id: int = -1
    absorbing: bool = False      # padding self-loop on terminal and dead-end states

    @property
    def effective_reward(self) -> float:
        return self.reward - self.penalty


@dataclass
class CompiledMdp:
    src: np.ndarray
    dst: np.ndarray
    reward: np.ndarray       # effective (pessimistic) reward per edge
    offsets: np.ndarray      # (S+1,), edges of state s are offsets[s]:offsets[s+1]
    counts: np.ndarray


class TabularMdp:
    def __init__(
        self,
        *,
        states: Optional[Sequence[np.ndarray]] = None,
        actions_per_state: Optional[List[List[Edge]]] = None,
        discount: float = 0.99,
        start_states: Optional[Sequence[int]] = None,
        terminal_flags: Optional[Sequence[bool]] = None,
        imagined_flags: Optional[Sequence[bool]] = None,
    ) -> None:
        self.states: List[np.ndarray] = [np.asarray(s, dtype=np.float64) for s in (states or [])]
        n = len(self.states)
        self.actions_per_state: List[List[Edge]] = (
            [list(a) for a in actions_per_state] if actions_per_state is not None else [[] for _ in range(n)]
        )
        self.discount = float(discount)
        self.start_states: List[int] = list(dict.fromkeys(int(s) for s in (start_states or [])))
        self.terminal_flags: List[bool] = list(terminal_flags) if terminal_flags is not None else [False] * n
        self.imagined_flags: List[bool] = list(imagined_flags) if imagined_flags is not None else [False] * n
        self.stitch_keys: Dict[str, int] = {}
        self.next_stitch_id = 0
        self._version = 0
        self._compiled: Optional[CompiledMdp] = None
        self._compiled_version = -1

    # ───────────────────────── structure ─────────────────────────
    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_edges(self) -> int:
        return sum(len(a) for a in self.actions_per_state)

    @property
    def state_dim(self) -> int:
        return int(self.states[0].shape[0]) if self.states else 0

    def touch(self) -> None:
        """Invalidate the compiled view after an in-place edit."""
        self._version += 1

    def add_state(self, vector: np.ndarray, *, terminal: bool = False, imagined: bool = False) -> int:
        self.states.append(np.asarray(vector, dtype=np.float64))
        self.actions_per_state.append([])
        self.terminal_flags.append(bool(terminal))
        self.imagined_flags.append(bool(imagined))
        self.touch()
        return len(self.states) - 1

    def add_edge(self, s: int, edge: Edge) -> int:
        """Append an edge to state `s`; returns its local action index."""
        self.actions_per_state[s].append(edge)
        self.touch()
        return len(self.actions_per_state[s]) - 1

    def make_absorbing(self, s: int, action_dim: int) -> None:
        self.actions_per_state[s] = [
            Edge(action=np.zeros(action_dim), next_state=s, reward=0.0, absorbing=True)
        ]
        self.touch()

    def is_dead_end(self, s: int) -> bool:
        edges = self.actions_per_state[s]
        return not self.terminal_flags[s] and len(edges) == 1 and edges[0].absorbing

    def successors(self, s: int, include_absorbing: bool = False) -> List[int]:
        return [
            e.next_state for e in self.actions_per_state[s] if include_absorbing or not e.absorbing
        ]

    def copy(self) -> "TabularMdp":
        out = TabularMdp(
            states=[s for s in self.states],
            actions_per_state=[
                [Edge(**{**e.__dict__}) for e in edges] for edges in self.actions_per_state
            ],
            discount=self.discount,
            start_states=self.start_states,
            terminal_flags=self.terminal_flags,
            imagined_flags=self.imagined_flags,
        )
        out.stitch_keys = dict(self.stitch_keys)
        out.next_stitch_id = self.next_stitch_id
        return out

    def validate(self) -> None:
        n = self.n_states
        if not (0.0 < self.discount < 1.0):
            raise InputError(f"discount must lie strictly inside (0, 1), got {self.discount}")
        if not (len(self.actions_per_state) == len(self.terminal_flags) == len(self.imagined_flags) == n):
            raise StructuralError("per-state tables have inconsistent lengths")
        for s in self.start_states:
            if not 0 <= s < n:
                raise StructuralError(f"start state {s} out of range")
        for s, edges in enumerate(self.actions_per_state):
            if not edges:
                raise StructuralError(f"state {s} has no actions and is not terminal"
                                      if not self.terminal_flags[s] else f"terminal state {s} lacks its self-loop")
            if self.terminal_flags[s]:
                e = edges[0]
                if len(edges) != 1 or e.next_state != s or e.effective_reward != 0.0:
                    raise StructuralError(f"terminal state {s} must have a single zero-reward self-loop")
            for e in edges:
                if not 0 <= e.next_state < n:
                    raise StructuralError(f"edge from {s} points to missing state {e.next_state}")
                if not (math.isfinite(e.reward) and math.isfinite(e.penalty)):
                    raise InputError(f"non-finite reward on an edge of state {s}")
                if e.penalty < 0:
                    raise InputError(f"negative penalty on an edge of state {s}")
                if not e.is_stitch and e.penalty != 0.0:
                    raise StructuralError(f"dataset edge of state {s} carries a penalty")

    def compile(self) -> CompiledMdp:
        if self._compiled is not None and self._compiled_version == self._version:
            return self._compiled
        counts = np.fromiter((len(a) for a in self.actions_per_state), dtype=np.int64, count=self.n_states)
        offsets = np.zeros(self.n_states + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        flat = [e for edges in self.actions_per_state for e in edges]
        self._compiled = CompiledMdp(
            src=np.repeat(np.arange(self.n_states, dtype=np.int64), counts),
            dst=np.fromiter((e.next_state for e in flat), dtype=np.int64, count=len(flat)),
            reward=np.fromiter((e.reward - e.penalty for e in flat), dtype=np.float64, count=len(flat)),
            offsets=offsets,
            counts=counts,
        )
        self._compiled_version = self._version
        return self._compiled

    def to_graph(self, include_absorbing: bool = False) -> nx.MultiDiGraph:
        """Directed view: one graph edge per MDP action, keyed by local action index."""
        g = nx.MultiDiGraph()
        for s in range(self.n_states):
            g.add_node(s, imagined=self.imagined_flags[s], terminal=self.terminal_flags[s])
        for s, edges in enumerate(self.actions_per_state):
            for i, e in enumerate(edges):
                if e.absorbing and not include_absorbing:
                    continue
                g.add_edge(s, e.next_state, key=i, reward=e.reward, stitch=e.is_stitch)
        return g


# ───────────────────────── values and policies ─────────────────────────
@dataclass
class ValueTable:
    values: np.ndarray
    q_values: np.ndarray     # flat, aligned with `offsets`
    offsets: np.ndarray
    iterations_run: int
    residual: float
    converged: bool = True
    residual_history: List[float] = field(default_factory=list)

    def q(self, s: int) -> np.ndarray:
        return self.q_values[self.offsets[s]:self.offsets[s + 1]]


@dataclass
class TabularPolicy:
    mode: str                          # "greedy" | "boltzmann"
    offsets: np.ndarray
    choice: np.ndarray                 # argmax action per state (lowest index on ties)
    probs: Optional[np.ndarray] = None
    temperature: Optional[float] = None

    @property
    def is_deterministic(self) -> bool:
        return self.mode == "greedy"

    def probabilities(self, s: int) -> np.ndarray:
        lo, hi = self.offsets[s], self.offsets[s + 1]
        if self.probs is None:
            p = np.zeros(hi - lo)
            p[self.choice[s]] = 1.0
            return p
        return self.probs[lo:hi]

    def act(self, s: int, rng: np.random.Generator) -> int:
        if self.probs is None:
            return int(self.choice[s])
        p = self.probs[self.offsets[s]:self.offsets[s + 1]]
        idx = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
        return min(idx, len(p) - 1)


def _segment_max(x: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return np.maximum.reduceat(x, offsets[:-1])


def value_iteration(mdp: TabularMdp, tolerance: float = 1e-8, max_iters: int = 100_000) -> ValueTable:
    """Synchronous sweeps of V ← max_a (r_eff + γ V[T]) until the sup-norm change is ≤ tolerance."""
    if tolerance <= 0:
        raise InputError("tolerance must be > 0")
    if max_iters < 1:
        raise ConfigError(f"max_iters must be >= 1, got {max_iters}")
    if mdp.n_states == 0:
        raise InputError("empty MDP")
    mdp.validate()
    c = mdp.compile()
    gamma = mdp.discount

    v = np.zeros(mdp.n_states)
    history: List[float] = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        v_new = _segment_max(c.reward + gamma * v[c.dst], c.offsets)
        residual = float(np.max(np.abs(v_new - v)))
        history.append(residual)
        v = v_new
        if residual <= tolerance:
            converged = True
            break
    if not converged:
        logger.warning("value iteration stopped at max_iters=%d, residual %.3e", max_iters, history[-1])

    q = c.reward + gamma * v[c.dst]
    return ValueTable(
        values=_segment_max(q, c.offsets),
        q_values=q,
        offsets=c.offsets.copy(),
        iterations_run=it,
        residual=history[-1] if history else 0.0,
        converged=converged,
        residual_history=history,
    )


def _first_argmax(values: ValueTable) -> np.ndarray:
    off = values.offsets
    counts = np.diff(off)
    n_edges = values.q_values.shape[0]
    is_max = values.q_values == np.repeat(values.values, counts)
    idx = np.where(is_max, np.arange(n_edges), n_edges)
    return np.minimum.reduceat(idx, off[:-1]) - off[:-1]


def greedy_policy(values: ValueTable, mdp: Optional[TabularMdp] = None) -> TabularPolicy:
    if mdp is not None and mdp.n_states != values.values.shape[0]:
        raise InputError("value table and MDP disagree on the number of states")
    return TabularPolicy(mode="greedy", offsets=values.offsets, choice=_first_argmax(values))


def boltzmann_policy(values: ValueTable, mdp: Optional[TabularMdp], temperature: float) -> TabularPolicy:
    """P(a|s) ∝ exp(Q(s,a)/T), computed with the per-state max subtracted."""
    if temperature <= 0:
        raise InputError("temperature must be > 0")
    if mdp is not None and mdp.n_states != values.values.shape[0]:
        raise InputError("value table and MDP disagree on the number of states")
    off = values.offsets
    counts = np.diff(off)
    w = np.exp((values.q_values - np.repeat(values.values, counts)) / temperature)
    sums = np.add.reduceat(w, off[:-1])
    return TabularPolicy(
        mode="boltzmann",
        offsets=off,
        choice=_first_argmax(values),
        probs=w / np.repeat(sums, counts),
        temperature=float(temperature),
    )


def sample_occupancy(
    mdp: TabularMdp,
    policy: TabularPolicy,
    n_samples: int,
    horizon: int,
    rng_seed: int,
) -> List[int]:
    """
    Draw states from the γ-discounted occupancy of `policy`.
    Each rollout starts uniformly from the start set, records every visited
    state, and stops with probability 1-γ per step (or at `horizon`).
    """
    if not mdp.start_states:
        raise InputError("MDP has no start states")
    if horizon < 1:
        raise InputError("horizon must be >= 1")
    c = mdp.compile()
    rng = np.random.default_rng(rng_seed)
    starts = np.asarray(mdp.start_states, dtype=np.int64)
    gamma = mdp.discount
    out: List[int] = []
    while len(out) < n_samples:
        s = int(starts[rng.integers(len(starts))])
        for _ in range(horizon):
            out.append(s)
            if len(out) >= n_samples or rng.random() >= gamma:
                break
            s = int(c.dst[c.offsets[s] + policy.act(s, rng)])
    return out


def policy_evaluation(
    mdp: TabularMdp,
    choice: np.ndarray,
    tolerance: float = 1e-10,
    max_iters: int = 1_000_000,
) -> np.ndarray:
    """V^π for a deterministic choice of local action per state."""
    c = mdp.compile()
    idx = c.offsets[:-1] + np.asarray(choice, dtype=np.int64)
    r, nxt = c.reward[idx], c.dst[idx]
    v = np.zeros(mdp.n_states)
    for _ in range(max_iters):
        v_new = r + mdp.discount * v[nxt]
        if np.max(np.abs(v_new - v), initial=0.0) <= tolerance:
            return v_new
        v = v_new
    logger.warning("policy evaluation stopped at max_iters=%d", max_iters)
    return v


def rollout(mdp: TabularMdp, choice: np.ndarray, start: int, steps: int) -> List[int]:
    """States visited by following `choice` for `steps` transitions (inclusive of start)."""
    c = mdp.compile()
    s = int(start)
    path = [s]
    for _ in range(steps):
        s = int(c.dst[c.offsets[s] + int(choice[s])])
        path.append(s)
    return path


# ───────────────────────── JSON persistence ─────────────────────────
def _edge_to_dict(e: Edge) -> Dict[str, Any]:
    d: Dict[str, Any] = {"a": [float(x) for x in e.action], "to": int(e.next_state), "r": float(e.reward)}
    if e.is_stitch:
        d.update(stitch=True, penalty=float(e.penalty), distance=float(e.distance),
                 scale=float(e.penalty_scale), sid=int(e.stitch_id))
    if e.absorbing:
        d["absorbing"] = True
    return d


def _edge_from_dict(d: Dict[str, Any]) -> Edge:
    return Edge(
        action=np.asarray(d["a"], dtype=np.float64),
        next_state=int(d["to"]),
        reward=float(d["r"]),
        is_stitch=bool(d.get("stitch", False)),
        penalty=float(d.get("penalty", 0.0)),
        distance=float(d.get("distance", 0.0)),
        penalty_scale=float(d.get("scale", 0.0)),
        stitch_id=int(d.get("sid", -1)),
        absorbing=bool(d.get("absorbing", False)),
    )


def mdp_to_dict(mdp: TabularMdp) -> Dict[str, Any]:
    return {
        "format": MDP_FORMAT,
        "version": MDP_VERSION,
        "discount": mdp.discount,
        "start_states": list(mdp.start_states),
        "states": [[float(x) for x in s] for s in mdp.states],
        "terminal": [int(s) for s, f in enumerate(mdp.terminal_flags) if f],
        "imagined": [int(s) for s, f in enumerate(mdp.imagined_flags) if f],
        "edges": [[_edge_to_dict(e) for e in edges] for edges in mdp.actions_per_state],
        "stitch_keys": dict(mdp.stitch_keys),
        "next_stitch_id": mdp.next_stitch_id,
    }


def mdp_from_dict(doc: Dict[str, Any]) -> TabularMdp:
    if not isinstance(doc, dict) or doc.get("format") != MDP_FORMAT:
        raise VersionError("not an MDP document")
    if doc.get("version") != MDP_VERSION:
        raise VersionError(f"MDP document version {doc.get('version')} != {MDP_VERSION}")
    n = len(doc["states"])
    terminal = [False] * n
    imagined = [False] * n
    for s in doc.get("terminal", []):
        terminal[s] = True
    for s in doc.get("imagined", []):
        imagined[s] = True
    mdp = TabularMdp(
        states=[np.asarray(s, dtype=np.float64) for s in doc["states"]],
        actions_per_state=[[_edge_from_dict(e) for e in edges] for edges in doc["edges"]],
        discount=float(doc["discount"]),
        start_states=doc["start_states"],
        terminal_flags=terminal,
        imagined_flags=imagined,
    )
    mdp.stitch_keys = {str(k): int(v) for k, v in doc.get("stitch_keys", {}).items()}
    mdp.next_stitch_id = int(doc.get("next_stitch_id", 0))
    return mdp


def save_mdp(mdp: TabularMdp, path: str | Path) -> None:
    write_json(path, mdp_to_dict(mdp), indent=None)


def load_mdp(path: str | Path) -> TabularMdp:
    try:
        doc = read_json(path)
    except ValueError as e:
        raise VersionError(f"cannot parse MDP file {path}: {e}") from e
    return mdp_from_dict(doc)
