# envs/generate.py
from __future__ import annotations
from typing import Dict, List

import numpy as np
from tqdm import tqdm

from b_types.config_types import EnvSpec, GeneratorSpec
from bats.dataset import Trajectory, TrajectoryDataset
from bats.errors import ConfigError
from envs.base_env import BaseEnv
from envs.mountain_car import MountainCarEnv
from envs.point_maze import UMAZE, PointMazeEnv, load_layout
from utils.helpers import derive_seed
from utils.log import get_logger

logger = get_logger(__name__)

DEFAULT_GENERATOR_STEPS = 200


def make_env(spec: EnvSpec) -> BaseEnv:
    if spec.name == "mountain_car":
        return MountainCarEnv(max_steps=spec.max_steps)
    if spec.name == "point_maze":
        layout = load_layout(spec.layout_path) if spec.layout_path else UMAZE
        return PointMazeEnv(layout=layout, max_steps=spec.max_steps)
    raise ConfigError(f"unknown environment {spec.name!r}")


def _trajectory(rollout: Dict[str, np.ndarray]) -> Trajectory:
    return Trajectory(
        states=rollout["states"],
        actions=rollout["actions"],
        rewards=rollout["rewards"],
        next_states=rollout["next_states"],
        terminals=rollout["terminals"],
    )


def generate_dataset(env: BaseEnv, spec: GeneratorSpec) -> TrajectoryDataset:
    """
    Scripted-controller trajectories first, then uniform-random-action ones.
    Every trajectory has its own derived seed for start and controller noise.
    """
    steps = spec.max_steps or DEFAULT_GENERATOR_STEPS
    trajectories: List[Trajectory] = []
    n_goal = 0

    for j in tqdm(range(spec.n_expert), desc="expert trajectories", disable=None):
        rng = np.random.default_rng(derive_seed(spec.seed, "expert", j))
        start = env.sample_start(rng)
        roll = env.rollout(env.expert(rng, spec.controller), start, steps)
        n_goal += int(roll["terminals"][-1]) if len(roll["terminals"]) else 0
        trajectories.append(_trajectory(roll))

    for j in tqdm(range(spec.n_random), desc="random trajectories", disable=None):
        rng = np.random.default_rng(derive_seed(spec.seed, "random", j))
        start = env.sample_start(rng)

        def controller(_state: np.ndarray, rng=rng) -> np.ndarray:
            return rng.uniform(env.action_low, env.action_high)

        trajectories.append(_trajectory(env.rollout(controller, start, steps)))

    logger.info("generated %d expert (%d terminal) and %d random trajectories on %s",
                spec.n_expert, n_goal, spec.n_random, env.name)
    return TrajectoryDataset.from_trajectories(trajectories, env.state_dim, env.action_dim)
