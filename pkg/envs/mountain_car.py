# envs/mountain_car.py
from __future__ import annotations
from typing import Optional, Tuple

import numpy as np

from b_types.config_types import ControllerParams, StartRegion
from envs.base_env import BaseEnv, Controller

# ───── Continuous mountain car constants ─────
MIN_POSITION = -1.2
MAX_POSITION = 0.6
MAX_SPEED = 0.07
GOAL_POSITION = 0.45
GOAL_VELOCITY = 0.0
POWER = 0.0015
GRAVITY = 0.0025
GOAL_REWARD = 100.0
ACTION_COST = 0.1
DEFAULT_MAX_STEPS = 999


class MountainCarEnv(BaseEnv):
    """
    State (position, velocity), action force in [-1, 1].
    Reward 100 on reaching the goal (terminal) minus 0.1·force² every step.
    """

    name = "mountain_car"
    state_dim = 2
    action_dim = 1
    solved_threshold = 90.0

    def __init__(self, max_steps: Optional[int] = None) -> None:
        super().__init__(np.array([-1.0]), np.array([1.0]), max_steps or DEFAULT_MAX_STEPS)

    def step_batch(self, states: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        s = np.asarray(states, dtype=np.float64)
        force = np.clip(np.asarray(actions, dtype=np.float64)[:, 0], -1.0, 1.0)
        position, velocity = s[:, 0], s[:, 1]

        velocity = velocity + force * POWER - GRAVITY * np.cos(3.0 * position)
        velocity = np.clip(velocity, -MAX_SPEED, MAX_SPEED)
        position = np.clip(position + velocity, MIN_POSITION, MAX_POSITION)
        velocity = np.where((position == MIN_POSITION) & (velocity < 0.0), 0.0, velocity)

        done = (position >= GOAL_POSITION) & (velocity >= GOAL_VELOCITY)
        reward = np.where(done, GOAL_REWARD, 0.0) - ACTION_COST * force ** 2
        return np.stack([position, velocity], axis=1), reward, done

    def sample_start(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(-0.6, -0.4), 0.0])

    def start_region(self) -> StartRegion:
        return StartRegion(kind="box", low=[-0.6, -1e-3], high=[-0.4, 1e-3])

    def expert(self, rng: np.random.Generator, params: ControllerParams) -> Controller:
        force = min(params.expert_force, 1.0)

        # pump energy: push along the direction of motion, left first from rest
        def controller(state: np.ndarray) -> np.ndarray:
            return np.array([force if state[1] > 0.0 else -force])

        return controller

    def in_goal(self, states: np.ndarray) -> np.ndarray:
        return np.atleast_2d(states)[:, 0] >= GOAL_POSITION

    @staticmethod
    def energy(states: np.ndarray) -> np.ndarray:
        """Mechanical energy per unit mass of the discretized hill: (g/3)·sin(3x) + v²/2."""
        s = np.atleast_2d(states)
        return GRAVITY / 3.0 * np.sin(3.0 * s[:, 0]) + 0.5 * s[:, 1] ** 2
