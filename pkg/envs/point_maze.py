# envs/point_maze.py
from __future__ import annotations
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from b_types.config_types import ControllerParams, StartRegion
from bats.errors import ConfigError
from envs.base_env import BaseEnv, Controller
from utils.helpers import read_json

# ───── Layouts ─────
# '#' wall, '.' free, 'G' goal, 'S' start (both free)
UMAZE = (
    "#####",
    "#G..#",
    "###.#",
    "#S..#",
    "#####",
)

DT = 0.1
MAX_SPEED = 2.0
DEFAULT_MAX_STEPS = 300


def load_layout(path: str | Path) -> Tuple[str, ...]:
    """JSON wall grid: {"layout": ["#####", "#G..#", ...]}."""
    try:
        doc = read_json(path)
        rows = tuple(str(r) for r in doc["layout"])
    except Exception as e:
        raise ConfigError(f"cannot read maze layout {path}: {e}") from e
    return rows


class PointMazeEnv(BaseEnv):
    """
    Point mass on a unit-cell wall grid. State (x, y, vx, vy) with x along
    columns and y along rows; action is a 2-D force in [-1, 1]². Each axis
    moves separately; a move that would enter a wall cell is cancelled and
    that velocity component zeroed. Reward 1 inside the goal cell, else 0.
    """

    name = "point_maze"
    state_dim = 4
    action_dim = 2

    def __init__(self, layout: Sequence[str] = UMAZE, max_steps: Optional[int] = None) -> None:
        super().__init__(np.array([-1.0, -1.0]), np.array([1.0, 1.0]), max_steps or DEFAULT_MAX_STEPS)
        rows = [r for r in layout]
        if not rows or len({len(r) for r in rows}) != 1:
            raise ConfigError("maze layout must be a non-empty rectangle")
        self.layout = tuple(rows)
        self.walls = np.array([[ch == "#" for ch in r] for r in rows], dtype=bool)
        self.height, self.width = self.walls.shape
        goals = [(i, j) for i, r in enumerate(rows) for j, ch in enumerate(r) if ch == "G"]
        starts = [(i, j) for i, r in enumerate(rows) for j, ch in enumerate(r) if ch == "S"]
        if len(goals) != 1:
            raise ConfigError("maze layout needs exactly one goal cell 'G'")
        self.goal_cell = goals[0]
        self.start_cells = starts or [
            (i, j) for i in range(self.height) for j in range(self.width)
            if not self.walls[i, j] and (i, j) != self.goal_cell
        ][:1]
        self.graph = self._cell_graph()

    # ───── geometry ─────
    def _cell_graph(self) -> nx.Graph:
        g = nx.Graph()
        free = [(i, j) for i in range(self.height) for j in range(self.width) if not self.walls[i, j]]
        g.add_nodes_from(free)
        for i, j in free:
            for di, dj in ((1, 0), (0, 1)):
                if (i + di, j + dj) in g:
                    g.add_edge((i, j), (i + di, j + dj))
        return g

    def free_cells(self) -> List[Tuple[int, int]]:
        return sorted(self.graph.nodes)

    @staticmethod
    def cell_center(cell: Tuple[int, int]) -> np.ndarray:
        return np.array([cell[1] + 0.5, cell[0] + 0.5])

    def _blocked(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        col = np.floor(x).astype(np.int64)
        row = np.floor(y).astype(np.int64)
        outside = (col < 0) | (col >= self.width) | (row < 0) | (row >= self.height)
        return outside | self.walls[np.clip(row, 0, self.height - 1), np.clip(col, 0, self.width - 1)]

    def step_batch(self, states: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        s = np.asarray(states, dtype=np.float64)
        a = np.clip(np.asarray(actions, dtype=np.float64), -1.0, 1.0)
        x, y = s[:, 0], s[:, 1]
        vx = np.clip(s[:, 2] + DT * a[:, 0] * 10.0, -MAX_SPEED, MAX_SPEED)
        vy = np.clip(s[:, 3] + DT * a[:, 1] * 10.0, -MAX_SPEED, MAX_SPEED)

        nx_ = x + DT * vx
        hit_x = self._blocked(nx_, y)
        nx_ = np.where(hit_x, x, nx_)
        vx = np.where(hit_x, 0.0, vx)

        ny = y + DT * vy
        hit_y = self._blocked(nx_, ny)
        ny = np.where(hit_y, y, ny)
        vy = np.where(hit_y, 0.0, vy)

        nxt = np.stack([nx_, ny, vx, vy], axis=1)
        reward = self.in_goal(nxt).astype(np.float64)
        return nxt, reward, np.zeros(len(nxt), dtype=bool)

    def in_goal(self, states: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(states)
        row, col = self.goal_cell
        return (np.floor(s[:, 0]) == col) & (np.floor(s[:, 1]) == row)

    # ───── starts ─────
    def sample_start(self, rng: np.random.Generator) -> np.ndarray:
        cell = self.start_cells[int(rng.integers(len(self.start_cells)))]
        center = self.cell_center(cell)
        return np.array([*(center + rng.uniform(-0.1, 0.1, size=2)), 0.0, 0.0])

    def start_region(self) -> StartRegion:
        return StartRegion(
            kind="points",
            points=[self.cell_center(c).tolist() for c in self.start_cells],
            radius=0.5,
            dims=[0, 1],
        )

    # ───── data collection ─────
    def expert(self, rng: np.random.Generator, params: ControllerParams) -> Controller:
        return PDWanderer(self, rng, params)


class PDWanderer:
    """PD controller following shortest cell paths to randomly chosen cells, forever."""

    def __init__(self, env: PointMazeEnv, rng: np.random.Generator, params: ControllerParams) -> None:
        self.env = env
        self.rng = rng
        self.params = params
        self.cells = env.free_cells()
        self.waypoints: List[np.ndarray] = []

    def _cell_of(self, pos: np.ndarray) -> Tuple[int, int]:
        return int(np.floor(pos[1])), int(np.floor(pos[0]))

    def _new_route(self, pos: np.ndarray) -> None:
        here = self._cell_of(pos)
        goal = here
        while goal == here and len(self.cells) > 1:
            goal = self.cells[int(self.rng.integers(len(self.cells)))]
        path = nx.shortest_path(self.env.graph, here, goal)
        self.waypoints = [self.env.cell_center(c) for c in path[1:]] or [self.env.cell_center(here)]

    def __call__(self, state: np.ndarray) -> np.ndarray:
        pos, vel = state[:2], state[2:]
        if not self.waypoints:
            self._new_route(pos)
        if np.linalg.norm(self.waypoints[0] - pos) < self.params.waypoint_tolerance:
            self.waypoints.pop(0)
            if not self.waypoints:
                self._new_route(pos)
        force = self.params.kp * (self.waypoints[0] - pos) - self.params.kd * vel
        return self.params.expert_force * np.clip(force, -1.0, 1.0)
