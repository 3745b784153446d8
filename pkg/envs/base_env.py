# envs/base_env.py
from __future__ import annotations
from abc import ABC, abstractmethod
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from b_types.config_types import ControllerParams, StartRegion

Controller = Callable[[np.ndarray], np.ndarray]


class BaseEnv(ABC):
    """
    Deterministic environment with a pure, vectorized transition function.
    `step` clamps the action and delegates to `step_batch`, so replaying
    logged actions through either path gives the same bits.
    """

    name: str = "env"
    state_dim: int
    action_dim: int
    max_steps: int
    solved_threshold: Optional[float] = None

    def __init__(self, action_low: np.ndarray, action_high: np.ndarray, max_steps: int) -> None:
        self.action_low = np.asarray(action_low, dtype=np.float64)
        self.action_high = np.asarray(action_high, dtype=np.float64)
        self.max_steps = int(max_steps)

    @property
    def action_bounds(self) -> list:
        return [[float(lo), float(hi)] for lo, hi in zip(self.action_low, self.action_high)]

    def clip_action(self, action: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(action, dtype=np.float64), self.action_low, self.action_high)

    @abstractmethod
    def step_batch(self, states: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(B, ds), (B, da) → next states (B, ds), rewards (B,), terminal flags (B,)."""

    def step(self, state: np.ndarray, action: np.ndarray) -> Tuple[np.ndarray, float, bool]:
        s = np.asarray(state, dtype=np.float64)[None]
        a = self.clip_action(action).reshape(1, self.action_dim)
        nxt, r, term = self.step_batch(s, a)
        return nxt[0], float(r[0]), bool(term[0])

    @abstractmethod
    def sample_start(self, rng: np.random.Generator) -> np.ndarray:
        ...

    @abstractmethod
    def start_region(self) -> StartRegion:
        ...

    @abstractmethod
    def expert(self, rng: np.random.Generator, params: ControllerParams) -> Controller:
        """Scripted data-collection controller."""

    def in_goal(self, states: np.ndarray) -> Optional[np.ndarray]:
        """Goal-region mask, for environments that have one."""
        return None

    def rollout(
        self,
        controller: Controller,
        start: np.ndarray,
        max_steps: Optional[int] = None,
    ) -> Dict[str, np.ndarray]:
        """Run `controller` from `start` until a terminal state or the step cap."""
        steps = self.max_steps if max_steps is None else int(max_steps)
        states, actions, rewards, next_states, terminals = [], [], [], [], []
        s = np.asarray(start, dtype=np.float64)
        for _ in range(steps):
            a = self.clip_action(controller(s)).reshape(self.action_dim)
            s2, r, term = self.step(s, a)
            states.append(s)
            actions.append(a)
            rewards.append(r)
            next_states.append(s2)
            terminals.append(term)
            s = s2
            if term:
                break
        return {
            "states": np.asarray(states).reshape(-1, self.state_dim),
            "actions": np.asarray(actions).reshape(-1, self.action_dim),
            "rewards": np.asarray(rewards, dtype=np.float64),
            "next_states": np.asarray(next_states).reshape(-1, self.state_dim),
            "terminals": np.asarray(terminals, dtype=bool),
        }
