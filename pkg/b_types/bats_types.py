from __future__ import annotations
from typing import List, Optional, TypedDict


class DatasetRecord(TypedDict):
    traj: int
    t: int
    s: List[float]
    a: List[float]
    r: float
    s2: List[float]
    terminal: bool


class StitchLogEntry(TypedDict, total=False):
    iteration: int
    source: int
    target: int
    k: int
    accepted: bool
    achieved_distance: float
    terminal_distance: float
    advantage: float
    stitch_id: int          # -1 when rejected


class IterationMetrics(TypedDict):
    iteration: int
    n_states: int
    n_edges: int
    n_samples: int
    n_candidates: int
    n_attempted: int
    n_accepted: int
    mean_start_value: float


class EvaluationReport(TypedDict, total=False):
    n_episodes: int
    mean: Optional[float]
    std: Optional[float]
    returns: List[float]
    goal_fraction: Optional[float]
    solved_threshold: Optional[float]


def make_record(
    *,
    traj: int,
    t: int,
    s: List[float],
    a: List[float],
    r: float,
    s2: List[float],
    terminal: bool,
) -> DatasetRecord:
    return DatasetRecord(
        traj=int(traj),
        t=int(t),
        s=[float(x) for x in s],
        a=[float(x) for x in a],
        r=float(r),
        s2=[float(x) for x in s2],
        terminal=bool(terminal),
    )


def make_iteration_metrics(
    *,
    iteration: int,
    n_states: int,
    n_edges: int,
    n_samples: int,
    n_candidates: int,
    n_attempted: int,
    n_accepted: int,
    mean_start_value: float,
) -> IterationMetrics:
    return IterationMetrics(
        iteration=int(iteration),
        n_states=int(n_states),
        n_edges=int(n_edges),
        n_samples=int(n_samples),
        n_candidates=int(n_candidates),
        n_attempted=int(n_attempted),
        n_accepted=int(n_accepted),
        mean_start_value=float(mean_start_value),
    )
