# bats/planner.py
"""
Cross-entropy search for a k-step action sequence that drives the model
ensemble from a source state to within δ of a target state.

A sequence is scored by the q-quantile (nearest rank) over members of the
distance between each member's final predicted state and the target.
"""
from __future__ import annotations
from dataclasses import dataclass, field
from typing import List, Optional
import math

import numpy as np

from b_types.config_types import CemConfig
from bats.distance import DistanceMetric, EuclideanMetric
from bats.dynamics import ModelEnsemble, quantile_nearest_rank
from bats.errors import ConfigError, InputError
from utils.helpers import derive_seed
from utils.log import get_logger

logger = get_logger(__name__)


@dataclass
class PlanResult:
    actions: np.ndarray              # (k, action_dim)
    achieved_distance: float
    accepted: bool
    predicted_states: np.ndarray     # (k, state_dim) member-mean states after each action
    score_history: List[float] = field(default_factory=list)   # best score after each CEM iteration
    attempts: int = 1

    @property
    def k(self) -> int:
        return int(self.actions.shape[0])


def _bounds(config: CemConfig, action_dim: int):
    try:
        lo, hi = config.bounds_arrays(action_dim)
        std = config.std_array(lo, hi)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return lo, hi, std


def plan_stitch(
    ensemble: ModelEnsemble,
    source: np.ndarray,
    target: np.ndarray,
    k: int,
    delta: float,
    metric: Optional[DistanceMetric],
    config: CemConfig,
    rng_seed: int,
    quantile: float = 0.8,
) -> PlanResult:
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    if not delta > 0:
        raise InputError(f"planning tolerance must be > 0, got {delta}")
    metric = metric or EuclideanMetric()
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    da = ensemble.action_dim
    lo, hi, std0 = _bounds(config, da)
    floor = 1e-3 * (hi - lo)
    n_pop, n_elite = config.population, config.n_elite

    best_actions: Optional[np.ndarray] = None
    best_score = math.inf
    history: List[float] = []
    for restart in range(config.restarts):
        rng = np.random.default_rng(derive_seed(rng_seed, "restart", restart))
        mean = np.tile(0.5 * (lo + hi), (k, 1))
        std = np.tile(std0, (k, 1))
        incumbent: Optional[np.ndarray] = None
        incumbent_score = math.inf
        restart_history: List[float] = []
        for _ in range(config.iterations):
            samples = np.clip(mean + std * rng.standard_normal((n_pop, k, da)), lo, hi)
            if incumbent is not None:
                samples[0] = incumbent
            finals = ensemble.rollout_members(source, samples)[:, :, -1, :]
            scores = quantile_nearest_rank(metric.distance(finals, target), quantile, axis=0)
            order = np.argsort(scores, kind="stable")
            elites = samples[order[:n_elite]]
            if scores[order[0]] < incumbent_score:
                incumbent_score = float(scores[order[0]])
                incumbent = samples[order[0]].copy()
            mean = elites.mean(axis=0)
            std = np.maximum(elites.std(axis=0), floor)
            restart_history.append(incumbent_score)
        if incumbent_score < best_score:
            best_score, best_actions, history = incumbent_score, incumbent, restart_history

    if best_actions is None:
        logger.warning("no finite plan score; rejecting")
        best_actions = np.tile(0.5 * (lo + hi), (k, 1))
    predicted = ensemble.rollout_members(source, best_actions[None])[:, 0].mean(axis=0)
    return PlanResult(
        actions=best_actions,
        achieved_distance=best_score,
        accepted=bool(best_score < delta),
        predicted_states=predicted,
        score_history=history,
    )


def multi_start_test_edge(
    ensemble: ModelEnsemble,
    source: np.ndarray,
    target: np.ndarray,
    k: int,
    attempts: int,
    delta: float,
    metric: Optional[DistanceMetric],
    config: CemConfig,
    rng_seed: int,
    quantile: float = 0.8,
) -> PlanResult:
    """Best of `attempts` independent plans; accepted iff its distance is below δ."""
    if attempts < 1:
        raise InputError(f"attempts must be >= 1, got {attempts}")
    best: Optional[PlanResult] = None
    for i in range(attempts):
        seed = rng_seed if i == 0 else derive_seed(rng_seed, "attempt", i)
        result = plan_stitch(ensemble, source, target, k, delta, metric, config, seed, quantile)
        if best is None or result.achieved_distance < best.achieved_distance:
            best = result
    best.attempts = attempts
    best.accepted = bool(best.achieved_distance < delta)
    return best
