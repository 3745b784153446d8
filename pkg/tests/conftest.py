from typing import List, Sequence

import numpy as np
import pytest

from bats.dataset import Trajectory, TrajectoryDataset
from bats.dynamics import FunctionEnsemble
from bats.mdp_core import Edge, TabularMdp


def vec(*xs: float) -> np.ndarray:
    return np.asarray(xs, dtype=np.float64)


def edge(to: int, reward: float = 0.0, action: float = 0.0, **kw) -> Edge:
    return Edge(action=np.array([float(action)]), next_state=to, reward=float(reward), **kw)


def absorbing(s: int) -> Edge:
    return Edge(action=np.zeros(1), next_state=s, reward=0.0, absorbing=True)


def random_mdp(rng: np.random.Generator, n: int, max_actions: int, discount: float,
               n_terminal: int = 0) -> TabularMdp:
    """Deterministic MDP on 1-D states [i]; the last `n_terminal` states are terminal."""
    edges: List[List[Edge]] = []
    for s in range(n):
        if s >= n - n_terminal:
            edges.append([absorbing(s)])
            continue
        k = int(rng.integers(1, max_actions + 1))
        edges.append([edge(int(rng.integers(0, n)), rng.uniform(-1.0, 1.0), action=a) for a in range(k)])
    return TabularMdp(
        states=[vec(i) for i in range(n)],
        actions_per_state=edges,
        discount=discount,
        start_states=[0],
        terminal_flags=[s >= n - n_terminal for s in range(n)],
    )


def trajectory(states: Sequence[Sequence[float]], actions: Sequence[Sequence[float]],
               rewards: Sequence[float], terminal: bool = False) -> Trajectory:
    """`states` lists every visited state, so it is one longer than `actions`."""
    s = np.asarray(states, dtype=np.float64)
    n = len(actions)
    terminals = np.zeros(n, dtype=bool)
    terminals[-1] = terminal
    return Trajectory(
        states=s[:-1].copy(),
        actions=np.asarray(actions, dtype=np.float64).reshape(n, -1),
        rewards=np.asarray(rewards, dtype=np.float64),
        next_states=s[1:].copy(),
        terminals=terminals,
    )


def dataset(*trajs: Trajectory) -> TrajectoryDataset:
    return TrajectoryDataset.from_trajectories(
        list(trajs), trajs[0].states.shape[1], trajs[0].actions.shape[1]
    )


def additive_ensemble(dim: int, n_members: int = 1, reward: float = 0.0) -> FunctionEnsemble:
    """s' = s + a for every member; constant reward."""
    def step(s, a):
        return s + a

    def reward_fn(s, a):
        return np.full(len(s), reward)

    return FunctionEnsemble([step] * n_members, reward_fn, dim, dim)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def parallel_lines() -> TrajectoryDataset:
    """Two 10-state lines 0.3 apart in the plane; only the upper one earns reward."""
    lower = [(float(i), 0.0) for i in range(10)]
    upper = [(float(i), 0.3) for i in range(10)]
    actions = [(1.0, 0.0)] * 9
    return dataset(
        trajectory(lower, actions, [0.0] * 9),
        trajectory(upper, actions, [0.0] * 8 + [1.0], terminal=True),
    )
