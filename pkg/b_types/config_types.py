# b_types/config_types.py
from __future__ import annotations
from pathlib import Path
from typing import List, Literal, Optional, Tuple
import math
import re

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class CemConfig(_Strict):
    """Free parameters of the cross-entropy planner."""

    population: int = Field(200, ge=2)
    elite_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    iterations: int = Field(5, ge=1)
    init_std: Optional[List[float]] = None   # per action dim; default half the bound width
    action_bounds: Optional[List[Tuple[float, float]]] = None
    restarts: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "CemConfig":
        if self.population * self.elite_fraction < 2:
            raise ValueError("population * elite_fraction must be >= 2")
        if self.action_bounds is not None:
            for lo, hi in self.action_bounds:
                if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
                    raise ValueError(f"bad action bound [{lo}, {hi}]")
        if self.init_std is not None and any(s <= 0 for s in self.init_std):
            raise ValueError("init_std entries must be > 0")
        return self

    @property
    def n_elite(self) -> int:
        return max(2, int(self.population * self.elite_fraction))

    def bounds_arrays(self, action_dim: int) -> Tuple[np.ndarray, np.ndarray]:
        if self.action_bounds is None:
            raise ValueError("cem.action_bounds is not set")
        if len(self.action_bounds) != action_dim:
            raise ValueError(f"cem.action_bounds has {len(self.action_bounds)} dims, expected {action_dim}")
        b = np.asarray(self.action_bounds, dtype=np.float64)
        return b[:, 0].copy(), b[:, 1].copy()

    def std_array(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        if self.init_std is None:
            return 0.5 * (hi - lo)
        std = np.asarray(self.init_std, dtype=np.float64)
        if std.shape != lo.shape:
            raise ValueError("cem.init_std must have one entry per action dim")
        return std


class DynamicsConfig(_Strict):
    n_trained: int = Field(7, ge=1)
    n_kept: int = Field(5, ge=1)
    hidden_sizes: List[int] = Field(default_factory=lambda: [200, 200, 200, 200])
    batch_size: int = Field(256, ge=1)
    validation_size: Optional[int] = Field(None, ge=1)   # None → min(1000, 10% of records)
    max_epochs: int = Field(100, ge=1)
    patience: int = Field(10, ge=1)
    optimizer: Literal["sgd", "adam"] = "sgd"
    learning_rate: float = Field(1e-2, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    min_logvar: float = -10.0
    max_logvar: float = 0.5
    grad_clip: float = Field(1.0, gt=0.0)

    @model_validator(mode="after")
    def _check(self) -> "DynamicsConfig":
        if self.n_kept > self.n_trained:
            raise ValueError("n_kept must be <= n_trained")
        if self.min_logvar >= self.max_logvar:
            raise ValueError("min_logvar must be < max_logvar")
        return self


class BisimConfig(_Strict):
    latent_dim: int = Field(6, ge=1)
    hidden_sizes: List[int] = Field(default_factory=lambda: [256, 128, 64])
    model_hidden_sizes: List[int] = Field(default_factory=lambda: [64, 64])
    discount: float = Field(0.99, gt=0.0, lt=1.0)
    batch_size: int = Field(256, ge=2)
    steps: int = Field(2000, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    divergence_factor: float = Field(10.0, gt=1.0)
    log_every: int = Field(50, ge=1)


class CloneConfig(_Strict):
    hidden_sizes: List[int] = Field(default_factory=lambda: [256, 256])
    batch_size: int = Field(256, ge=1)
    batch_updates: int = Field(2000, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    min_log_std: float = -5.0
    max_log_std: float = 2.0
    divergence_window: int = Field(500, ge=1)
    divergence_factor: float = Field(10.0, gt=1.0)
    return_threshold: Optional[float] = None
    harvest_horizon: int = Field(1000, ge=1)


class BatsConfig(_Strict):
    """Hyperparameters of the stitching loop. Units follow the owning modules."""

    n_iterations: int = Field(20, ge=1)
    m_samples_per_iter: int = Field(100, ge=1)
    stitch_budget: int = Field(200, ge=1)          # planned candidates per iteration
    max_stitch_len: int = Field(1, ge=1)           # K
    neighbor_mode: Literal["radius", "knn"] = "radius"
    neighbor_radius: Optional[float] = Field(None, gt=0.0)
    neighbor_k: Optional[int] = Field(None, ge=1)
    neighbor_hop: Literal["last", "anywhere"] = "last"
    delta: float = Field(0.425, gt=0.0)            # planning tolerance
    quantile: float = Field(0.8, gt=0.0, le=1.0)
    attempts: int = Field(1, ge=1)                 # testEdge restarts j
    penalty_coefficient: float = Field(20.0, ge=0.0)
    penalty_mode: Literal["all_edges", "final_gamma"] = "all_edges"
    discount: float = Field(0.99, gt=0.0, lt=1.0)
    boltzmann_T: float = Field(0.25, gt=0.0)
    vi_tolerance: float = Field(1e-8, gt=0.0)
    vi_max_iters: int = Field(100_000, ge=1)
    occupancy_horizon: int = Field(1000, ge=1)
    rng_seed: int = 0
    workers: int = Field(1, ge=1)
    cem: CemConfig = Field(default_factory=CemConfig)

    @model_validator(mode="after")
    def _check(self) -> "BatsConfig":
        if self.neighbor_mode == "radius" and self.neighbor_radius is None:
            raise ValueError("neighbor_mode=radius needs neighbor_radius")
        if self.neighbor_mode == "knn" and self.neighbor_k is None:
            raise ValueError("neighbor_mode=knn needs neighbor_k")
        return self

    @property
    def neighbor_param(self) -> float | int:
        return self.neighbor_radius if self.neighbor_mode == "radius" else self.neighbor_k


class StartRegion(_Strict):
    """Axis-aligned box, or a point set with a radius; `dims` restricts the test to some coordinates."""

    kind: Literal["box", "points"]
    low: Optional[List[float]] = None
    high: Optional[List[float]] = None
    points: Optional[List[List[float]]] = None
    radius: Optional[float] = Field(None, gt=0.0)
    dims: Optional[List[int]] = None

    @model_validator(mode="after")
    def _check(self) -> "StartRegion":
        if self.kind == "box":
            if self.low is None or self.high is None or len(self.low) != len(self.high):
                raise ValueError("box region needs low/high of equal length")
            if any(lo > hi for lo, hi in zip(self.low, self.high)):
                raise ValueError("box region has low > high")
        else:
            if not self.points or self.radius is None:
                raise ValueError("points region needs points and radius")
            if len({len(p) for p in self.points}) != 1:
                raise ValueError("points region has ragged points")
        return self

    def contains(self, states: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if self.dims is not None:
            x = x[:, self.dims]
        if self.kind == "box":
            lo = np.asarray(self.low, dtype=np.float64)
            hi = np.asarray(self.high, dtype=np.float64)
            if lo.shape[0] != x.shape[1]:
                raise ValueError(f"box region has {lo.shape[0]} dims, states have {x.shape[1]}")
            return np.all((x >= lo) & (x <= hi), axis=1)
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape[1] != x.shape[1]:
            raise ValueError(f"points region has {pts.shape[1]} dims, states have {x.shape[1]}")
        d = np.linalg.norm(x[:, None, :] - pts[None, :, :], axis=-1)
        return np.any(d <= self.radius, axis=1)


class ControllerParams(_Strict):
    kp: float = 10.0
    kd: float = 1.0
    waypoint_tolerance: float = Field(0.2, gt=0.0)
    expert_force: float = Field(1.0, gt=0.0)


class GeneratorSpec(_Strict):
    n_random: int = Field(100, ge=0)
    n_expert: int = Field(5, ge=0)
    seed: int = 0
    max_steps: Optional[int] = Field(None, ge=1)
    controller: ControllerParams = Field(default_factory=ControllerParams)


class EnvSpec(_Strict):
    name: Literal["mountain_car", "point_maze"] = "mountain_car"
    layout_path: Optional[str] = None
    max_steps: Optional[int] = Field(None, ge=1)

    @field_validator("layout_path")
    @classmethod
    def _layout_exists(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and not Path(v).is_file():
            raise ValueError(f"maze layout file not found: {v}")
        return v


class EvalConfig(_Strict):
    n_episodes: int = Field(20, ge=0)
    seed: int = 0
    final_window: int = Field(50, ge=1)


_METRIC_RE = re.compile(r"^(euclidean|normalized|bisim:.+)$")


class PipelineConfig(_Strict):
    seed: int
    output_dir: str = "runs/default"
    env: EnvSpec = Field(default_factory=EnvSpec)
    generator: GeneratorSpec = Field(default_factory=GeneratorSpec)
    dataset_path: Optional[str] = None     # external dataset; default is <output_dir>/dataset.jsonl
    dynamics_source: Literal["learned", "oracle"] = "learned"
    dynamics: DynamicsConfig = Field(default_factory=DynamicsConfig)
    bisim: BisimConfig = Field(default_factory=BisimConfig)
    bats: BatsConfig = Field(default_factory=lambda: BatsConfig(neighbor_radius=0.1))
    clone: CloneConfig = Field(default_factory=CloneConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    metric: str = "normalized"
    start_region: Optional[StartRegion] = None

    @field_validator("metric")
    @classmethod
    def _metric(cls, v: str) -> str:
        if not _METRIC_RE.match(v):
            raise ValueError("metric must be euclidean, normalized, or bisim:<ckpt>")
        return v

    @field_validator("dataset_path")
    @classmethod
    def _dataset_exists(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and not Path(v).is_file():
            raise ValueError(f"dataset file not found: {v}")
        return v
