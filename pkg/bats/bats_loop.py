# bats/bats_loop.py
"""
The stitching loop: value iteration → Boltzmann occupancy samples →
feasible and impactful candidates → planning → serialized commit.
"""
from __future__ import annotations
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Set, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from b_types.bats_types import IterationMetrics, StitchLogEntry, make_iteration_metrics
from b_types.config_types import BatsConfig
from bats.dataset import NeighborGraph, TrajectoryDataset, build_m0, build_neighbor_graph
from bats.distance import DistanceMetric, EuclideanMetric
from bats.dynamics import ModelEnsemble
from bats.errors import ConfigError, VersionError
from bats.mdp_core import (
    TabularMdp,
    ValueTable,
    boltzmann_policy,
    greedy_policy,
    mdp_from_dict,
    mdp_to_dict,
    sample_occupancy,
    value_iteration,
)
from bats.planner import multi_start_test_edge
from bats.stitching import StitchCandidate, StitchLog, StitchRecord, apply_stitch, filter_impactful, find_feasible, make_log_entry
from utils.helpers import derive_seed, read_json, unique_in_order, write_json
from utils.log import get_logger

logger = get_logger(__name__)

RUN_FORMAT = "bats-run"
RUN_VERSION = 1

# keys that may change between a checkpoint and its resume
_RESUMABLE_KEYS = ("n_iterations", "workers")


@dataclass
class BatsRunState:
    mdp: TabularMdp
    config: BatsConfig
    iteration: int = 0                       # completed iterations
    metrics: List[IterationMetrics] = field(default_factory=list)
    stitch_log: List[StitchLogEntry] = field(default_factory=list)
    finished: bool = False                   # no impactful candidate was left

    @property
    def accepted_pairs(self) -> Set[Tuple[int, int]]:
        return {(e["source"], e["target"]) for e in self.stitch_log if e["accepted"]}


# ───────────────────────── checkpoints ─────────────────────────
def run_state_to_dict(state: BatsRunState) -> dict:
    return {
        "format": RUN_FORMAT,
        "version": RUN_VERSION,
        "iteration": state.iteration,
        "finished": state.finished,
        "config": state.config.model_dump(),
        "metrics": [dict(m) for m in state.metrics],
        "stitch_log": [dict(e) for e in state.stitch_log],
        "mdp": mdp_to_dict(state.mdp),
    }


def run_state_from_dict(doc: dict) -> BatsRunState:
    if not isinstance(doc, dict) or doc.get("format") != RUN_FORMAT:
        raise VersionError("not a run-state document")
    if doc.get("version") != RUN_VERSION:
        raise VersionError(f"run-state version {doc.get('version')} != {RUN_VERSION}")
    return BatsRunState(
        mdp=mdp_from_dict(doc["mdp"]),
        config=BatsConfig(**doc["config"]),
        iteration=int(doc["iteration"]),
        metrics=[IterationMetrics(**m) for m in doc["metrics"]],
        stitch_log=[StitchLogEntry(**e) for e in doc["stitch_log"]],
        finished=bool(doc.get("finished", False)),
    )


def save_run_state(state: BatsRunState, path: str | Path) -> None:
    write_json(path, run_state_to_dict(state), indent=None)


def load_run_state(path: str | Path) -> BatsRunState:
    try:
        doc = read_json(path)
    except ValueError as e:
        raise VersionError(f"cannot parse run state {path}: {e}") from e
    return run_state_from_dict(doc)


def write_metrics_csv(metrics: List[IterationMetrics], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(metrics), columns=list(IterationMetrics.__annotations__)).to_csv(path, index=False)


# ───────────────────────── post-hoc edits ─────────────────────────
def relabel_penalties(mdp: TabularMdp, penalty_coefficient: float) -> TabularMdp:
    """Recompute every stitched penalty from its stored distance; no replanning."""
    if penalty_coefficient < 0:
        raise ConfigError("penalty coefficient must be >= 0")
    out = mdp.copy()
    for edges in out.actions_per_state:
        for e in edges:
            if e.is_stitch:
                e.penalty = penalty_coefficient * e.penalty_scale * e.distance
    out.touch()
    return out


def prune_stitches(mdp: TabularMdp, max_distance: float) -> TabularMdp:
    """Detach every stitch chain whose end-point distance exceeds `max_distance`."""
    out = mdp.copy()
    entered: Dict[int, Set[int]] = {}
    for edges in out.actions_per_state:
        for e in edges:
            if e.is_stitch:
                entered.setdefault(e.stitch_id, set()).add(e.next_state)

    dropped: Set[int] = set()
    for s, edges in enumerate(out.actions_per_state):
        keep = []
        for e in edges:
            # a chain's head edge is the one leaving its source; intermediates are imagined states it entered
            is_head = e.is_stitch and not (out.imagined_flags[s] and s in entered[e.stitch_id])
            if is_head and e.distance > max_distance:
                dropped.add(e.stitch_id)
                continue
            keep.append(e)
        out.actions_per_state[s] = keep
    out.stitch_keys = {k: v for k, v in out.stitch_keys.items() if v not in dropped}
    out.touch()
    logger.info("pruned %d stitch chains with distance > %g", len(dropped), max_distance)
    return out


# ───────────────────────── main loop ─────────────────────────
def _check_resume(state: BatsRunState, config: BatsConfig) -> None:
    old = {k: v for k, v in state.config.model_dump().items() if k not in _RESUMABLE_KEYS}
    new = {k: v for k, v in config.model_dump().items() if k not in _RESUMABLE_KEYS}
    if old != new:
        changed = sorted(k for k in new if old.get(k) != new[k])
        raise ConfigError(f"cannot resume: config differs from the checkpoint in {changed}")


def _collect_candidates(
    mdp: TabularMdp,
    neighbors: NeighborGraph,
    values: ValueTable,
    samples: List[int],
    config: BatsConfig,
    skip: Set[Tuple[int, int]],
) -> List[StitchCandidate]:
    greedy = greedy_policy(values, mdp)
    found: Dict[Tuple[int, int], StitchCandidate] = {}
    for s in unique_in_order(samples):
        feasible = find_feasible(mdp, neighbors, s, config.max_stitch_len, config.neighbor_hop)
        for c in filter_impactful(feasible, values, greedy, mdp):
            if c.pair not in skip and c.pair not in found:
                found[c.pair] = c
    return sorted(found.values(), key=lambda c: (-c.advantage, c.source, c.target))


def _mean_start_value(mdp: TabularMdp, values: ValueTable) -> float:
    if not mdp.start_states:
        return float("nan")
    return float(np.mean(values.values[mdp.start_states]))


def run_bats(
    data: Optional[TrajectoryDataset],
    ensemble: ModelEnsemble,
    config: BatsConfig,
    *,
    mdp: Optional[TabularMdp] = None,
    neighbors: Optional[NeighborGraph] = None,
    metric: Optional[DistanceMetric] = None,
    resume: Optional[BatsRunState] = None,
    checkpoint_path: Optional[str | Path] = None,
    log_path: Optional[str | Path] = None,
    on_iteration: Optional[Callable[[BatsRunState], None]] = None,
) -> Tuple[TabularMdp, BatsRunState]:
    """
    Run up to `config.n_iterations` stitching iterations.
    `mdp` overrides M₀ built from `data` (e.g. after start-state relabelling);
    `resume` continues a checkpointed run with the same seed schedule.
    """
    metric = metric or EuclideanMetric()
    if resume is not None:
        _check_resume(resume, config)
        state = resume
        state.config = config
    else:
        if mdp is None:
            if data is None:
                raise ConfigError("run_bats needs a dataset or an initial MDP")
            mdp = build_m0(data, config.discount)
        else:
            mdp = mdp.copy()
        mdp.discount = config.discount
        mdp.touch()
        mdp.validate()
        state = BatsRunState(mdp=mdp, config=config)
    if neighbors is None:
        if data is None:
            raise ConfigError("run_bats needs a dataset or a neighbor graph")
        neighbors = build_neighbor_graph(data, config.neighbor_mode, config.neighbor_param, metric)

    log = StitchLog(log_path)
    if log_path is not None:
        log.truncate()
        for entry in state.stitch_log:
            log.append(entry)

    values = value_iteration(state.mdp, config.vi_tolerance, config.vi_max_iters)
    seed = config.rng_seed
    progress = tqdm(range(state.iteration, config.n_iterations), desc="bats", disable=None)
    for i in progress:
        if state.finished:
            break
        try:
            mdp_i = state.mdp
            policy = boltzmann_policy(values, mdp_i, config.boltzmann_T)
            samples = sample_occupancy(mdp_i, policy, config.m_samples_per_iter, config.occupancy_horizon,
                                       derive_seed(seed, "occupancy", i))
            candidates = _collect_candidates(mdp_i, neighbors, values, samples, config, state.accepted_pairs)
            batch = candidates[:config.stitch_budget]

            def plan(c: StitchCandidate):
                return multi_start_test_edge(
                    ensemble, mdp_i.states[c.source], mdp_i.states[c.target], c.k, config.attempts,
                    config.delta, metric, config.cem, derive_seed(seed, "plan", i, c.source, c.target),
                    config.quantile,
                )

            if config.workers > 1 and len(batch) > 1:
                with ThreadPoolExecutor(max_workers=config.workers) as pool:
                    plans = list(pool.map(plan, batch))
            else:
                plans = [plan(c) for c in batch]

            new_mdp = mdp_i.copy() if any(p.accepted for p in plans) else mdp_i
            new_entries: List[StitchLogEntry] = []
            n_accepted = 0
            for c, p in zip(batch, plans):
                record = StitchRecord(
                    candidate=c, actions=p.actions, predicted_states=p.predicted_states,
                    achieved_distance=p.achieved_distance, accepted=p.accepted, iteration_added=i + 1,
                )
                if record.accepted:
                    apply_stitch(new_mdp, record, ensemble, config.penalty_coefficient, metric,
                                 config.penalty_mode, inplace=True)
                    n_accepted += 1
                terminal = float(metric.distance(p.predicted_states[-1], mdp_i.states[c.target]))
                new_entries.append(make_log_entry(record, terminal))

            if n_accepted:
                values = value_iteration(new_mdp, config.vi_tolerance, config.vi_max_iters)
            state.mdp = new_mdp
            state.iteration = i + 1
            state.finished = not candidates
            state.metrics.append(make_iteration_metrics(
                iteration=i + 1,
                n_states=new_mdp.n_states,
                n_edges=new_mdp.n_edges,
                n_samples=len(samples),
                n_candidates=len(candidates),
                n_attempted=len(batch),
                n_accepted=n_accepted,
                mean_start_value=_mean_start_value(new_mdp, values),
            ))
            for entry in new_entries:
                state.stitch_log.append(entry)
                log.append(entry)
        except Exception:
            if checkpoint_path is not None:
                save_run_state(state, checkpoint_path)
            raise

        logger.info("iteration %d: %d candidates, %d attempted, %d accepted, mean start V %.4f",
                    i + 1, len(candidates), len(batch), n_accepted, state.metrics[-1]["mean_start_value"])
        if checkpoint_path is not None:
            save_run_state(state, checkpoint_path)
        if on_iteration is not None:
            on_iteration(state)
        if state.finished:
            logger.info("no impactful stitch left; stopping after iteration %d", i + 1)

    return state.mdp, state
