# bats/policy_cloning.py
"""
Harvest greedy trajectories from the stitched MDP, clone them into a
Gaussian policy network, and evaluate that policy in the real environment.
"""
from __future__ import annotations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from torch import nn
from tqdm import tqdm

from b_types.bats_types import EvaluationReport
from b_types.config_types import CloneConfig
from bats.dataset import Trajectory, TrajectoryDataset
from bats.distance import Normalizer
from bats.errors import EmptyHarvestError, InputError, TrainingError, VersionError
from bats.mdp_core import TabularMdp, TabularPolicy
from envs.base_env import BaseEnv
from utils.helpers import derive_seed
from utils.log import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT = "bats-policy"
CHECKPOINT_VERSION = 1


# ───────────────────────── harvesting ─────────────────────────
def graph_rollout(mdp: TabularMdp, choice: np.ndarray, start: int, horizon: int) -> List[Tuple[int, int]]:
    """(state, local action) pairs of the greedy path; stops at terminal states and padding loops."""
    steps: List[Tuple[int, int]] = []
    s = int(start)
    for _ in range(horizon):
        if mdp.terminal_flags[s]:
            break
        a = int(choice[s])
        edge = mdp.actions_per_state[s][a]
        if edge.absorbing:
            break
        steps.append((s, a))
        s = edge.next_state
    return steps


def graph_returns(mdp: TabularMdp, choice: np.ndarray, horizon: int) -> np.ndarray:
    """Undiscounted unpenalized return of the greedy path from every start state."""
    return np.asarray([
        sum(mdp.actions_per_state[s][a].reward for s, a in graph_rollout(mdp, choice, start, horizon))
        for start in mdp.start_states
    ], dtype=np.float64)


def harvest_trajectories(
    mdp: TabularMdp,
    policy: TabularPolicy,
    return_threshold: float,
    horizon: int,
) -> TrajectoryDataset:
    if return_threshold != return_threshold or return_threshold == float("inf"):
        raise InputError(f"return threshold must be finite or -inf, got {return_threshold}")
    if not mdp.start_states:
        raise InputError("MDP has no start states")
    action_dim = int(mdp.actions_per_state[0][0].action.shape[0])
    trajectories: List[Trajectory] = []
    n_short = 0
    for start in mdp.start_states:
        steps = graph_rollout(mdp, policy.choice, start, horizon)
        if not steps:
            n_short += 1
            continue
        edges = [mdp.actions_per_state[s][a] for s, a in steps]
        ret = sum(e.reward for e in edges)
        if ret < return_threshold:
            continue
        trajectories.append(Trajectory(
            states=np.stack([mdp.states[s] for s, _ in steps]),
            actions=np.stack([e.action for e in edges]).reshape(-1, action_dim),
            rewards=np.asarray([e.reward for e in edges], dtype=np.float64),
            next_states=np.stack([mdp.states[e.next_state] for e in edges]),
            terminals=np.asarray([mdp.terminal_flags[e.next_state] for e in edges], dtype=bool),
        ))
    if not trajectories:
        raise EmptyHarvestError(
            f"no start trajectory reached return >= {return_threshold} ({len(mdp.start_states)} starts)"
        )
    logger.info("harvested %d of %d start trajectories (%d empty)", len(trajectories), len(mdp.start_states), n_short)
    return TrajectoryDataset.from_trajectories(trajectories, mdp.state_dim, action_dim)


def return_histogram(returns: Sequence[float], bins: int = 10) -> Tuple[np.ndarray, np.ndarray]:
    r = np.asarray(returns, dtype=np.float64)
    if r.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    return np.histogram(r, bins=bins)


def format_histogram(counts: np.ndarray, edges: np.ndarray, width: int = 40) -> str:
    if counts.size == 0:
        return "(no returns)"
    top = max(int(counts.max()), 1)
    lines = []
    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
        lines.append(f"[{lo:9.2f}, {hi:9.2f}) {'#' * int(round(width * c / top)):<{width}} {int(c)}")
    return "\n".join(lines)


# ───────────────────────── policy ─────────────────────────
class ClonedPolicy(nn.Module):
    """state → (mean action, log-std); deployment uses the clamped mean."""

    def __init__(self, state_dim: int, action_dim: int, config: CloneConfig, normalizer: Normalizer,
                 action_low: Sequence[float], action_high: Sequence[float]) -> None:
        super().__init__()
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.config = config
        self.normalizer = normalizer
        self.action_low = np.asarray(action_low, dtype=np.float64)
        self.action_high = np.asarray(action_high, dtype=np.float64)
        layers: List[nn.Module] = []
        d = state_dim
        for h in config.hidden_sizes:
            layers += [nn.Linear(d, h), nn.ReLU()]
            d = h
        self.body = nn.Sequential(*layers)
        self.mean_head = nn.Linear(d, action_dim)
        self.log_std_head = nn.Linear(d, action_dim)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.body(x)
        log_std = torch.clamp(self.log_std_head(h), self.config.min_log_std, self.config.max_log_std)
        return self.mean_head(h), log_std

    @torch.no_grad()
    def act_batch(self, states: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(self.normalizer.normalize(np.atleast_2d(states)), dtype=torch.float32)
        mean, _ = self(x)
        return np.clip(mean.double().numpy(), self.action_low, self.action_high)

    def act(self, state: np.ndarray) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        if state.shape != (self.state_dim,):
            raise InputError(f"expected a state of shape ({self.state_dim},), got {state.shape}")
        return self.act_batch(state[None])[0]


def behavior_clone(
    harvest: TrajectoryDataset,
    config: CloneConfig,
    seed: int,
    action_bounds: Optional[Sequence[Sequence[float]]] = None,
) -> ClonedPolicy:
    """Maximize the Gaussian log-likelihood of harvested actions for `config.batch_updates` steps."""
    flat = harvest.flat()
    n = flat["rewards"].shape[0]
    if n == 0:
        raise InputError("cannot clone an empty harvest")
    if action_bounds is None:
        low, high = flat["actions"].min(axis=0), flat["actions"].max(axis=0)
    else:
        low, high = np.asarray(action_bounds, dtype=np.float64).T

    torch.manual_seed(derive_seed(seed, "clone"))
    rng = np.random.default_rng(derive_seed(seed, "clone-batches"))
    normalizer = Normalizer.fit(flat["states"])
    policy = ClonedPolicy(harvest.state_dim, harvest.action_dim, config, normalizer, low, high)
    x = torch.as_tensor(normalizer.normalize(flat["states"]), dtype=torch.float32)
    y = torch.as_tensor(flat["actions"], dtype=torch.float32)
    opt = torch.optim.Adam(policy.parameters(), lr=config.learning_rate)

    window: List[float] = []
    best_avg: Optional[float] = None
    policy.train()
    for step in tqdm(range(config.batch_updates), desc="behavior cloning", disable=None):
        idx = torch.as_tensor(rng.integers(0, n, size=min(config.batch_size, n)))
        mean, log_std = policy(x[idx])
        nll = (0.5 * ((y[idx] - mean) / log_std.exp()) ** 2 + log_std).sum(dim=-1).mean()
        if not torch.isfinite(nll):
            raise TrainingError(f"non-finite cloning loss at step {step}")
        opt.zero_grad()
        nll.backward()
        opt.step()

        window.append(float(nll))
        if len(window) == config.divergence_window:
            avg = float(np.mean(window))
            window = []
            if best_avg is not None and avg - best_avg > config.divergence_factor * max(1.0, abs(best_avg)):
                raise TrainingError(f"cloning loss diverged: window mean {avg:.4g} vs best {best_avg:.4g}")
            best_avg = avg if best_avg is None else min(best_avg, avg)
    policy.eval()
    logger.info("cloned policy on %d pairs, final loss %.4f", n, float(nll))
    return policy


# ───────────────────────── evaluation ─────────────────────────
def evaluate_policy(
    policy: ClonedPolicy,
    env: BaseEnv,
    n_episodes: int,
    seed: int,
    final_window: int = 50,
) -> EvaluationReport:
    if policy.state_dim != env.state_dim or policy.action_dim != env.action_dim:
        raise InputError("policy and environment dimensions differ")
    returns: List[float] = []
    goal_fractions: List[float] = []
    for e in range(n_episodes):
        rng = np.random.default_rng(derive_seed(seed, "episode", e))
        roll = env.rollout(policy.act, env.sample_start(rng))
        returns.append(float(roll["rewards"].sum()))
        mask = env.in_goal(roll["next_states"])
        if mask is not None and len(mask):
            goal_fractions.append(float(np.mean(mask[-final_window:])))
    report = EvaluationReport(
        n_episodes=n_episodes,
        mean=float(np.mean(returns)) if returns else None,
        std=float(np.std(returns)) if returns else None,
        returns=returns,
        goal_fraction=float(np.mean(goal_fractions)) if goal_fractions else None,
        solved_threshold=env.solved_threshold,
    )
    if returns:
        logger.info("evaluation over %d episodes: mean %.2f ± %.2f", n_episodes, report["mean"], report["std"])
    return report


def value_residuals(
    mdp: TabularMdp,
    choice: np.ndarray,
    policy: ClonedPolicy,
    env: BaseEnv,
    horizon: Optional[int] = None,
) -> pd.DataFrame:
    """Per start state: greedy graph return, cloned-policy environment return, and their gap."""
    horizon = horizon or env.max_steps
    graph = graph_returns(mdp, choice, horizon)
    rows: List[Dict[str, float]] = []
    for start, g in zip(mdp.start_states, graph):
        vec = mdp.states[start]
        roll = env.rollout(policy.act, vec, horizon)
        env_return = float(roll["rewards"].sum())
        row: Dict[str, float] = {"start": int(start)}
        row.update({f"s{i}": float(v) for i, v in enumerate(vec)})
        row.update(graph_return=float(g), env_return=env_return, residual=float(g) - env_return)
        rows.append(row)
    return pd.DataFrame(rows)


# ───────────────────────── checkpoints ─────────────────────────
def save_policy(policy: ClonedPolicy, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "state_dim": policy.state_dim,
        "action_dim": policy.action_dim,
        "config": policy.config.model_dump(),
        "normalizer": policy.normalizer.to_dict(),
        "action_low": policy.action_low.tolist(),
        "action_high": policy.action_high.tolist(),
        "weights": policy.state_dict(),
    }, path)


def load_policy(path: str | Path) -> ClonedPolicy:
    try:
        ckpt = torch.load(path, weights_only=True)
    except Exception as e:
        raise VersionError(f"cannot read policy checkpoint {path}: {e}") from e
    if ckpt.get("format") != CHECKPOINT_FORMAT or ckpt.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path} is not a version-{CHECKPOINT_VERSION} policy checkpoint")
    policy = ClonedPolicy(
        int(ckpt["state_dim"]), int(ckpt["action_dim"]), CloneConfig(**ckpt["config"]),
        Normalizer.from_dict(ckpt["normalizer"]), ckpt["action_low"], ckpt["action_high"],
    )
    policy.load_state_dict(ckpt["weights"])
    policy.eval()
    return policy
