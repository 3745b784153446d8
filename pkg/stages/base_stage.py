# stages/base_stage.py
from __future__ import annotations
from abc import ABC, abstractmethod
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

from b_types.config_types import PipelineConfig
from bats.dataset import TrajectoryDataset, load_dataset
from bats.distance import DistanceMetric, make_metric
from bats.errors import MissingArtifactError
from envs.base_env import BaseEnv
from envs.generate import make_env
from utils.helpers import canonical_json, derive_seed, read_json, sha256_bytes, sha256_file, write_json
from utils.log import get_logger

logger = get_logger(__name__)

MANIFEST_FORMAT = "bats-manifest"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class RunPaths:
    """File layout of one run directory."""

    root: Path

    @property
    def dataset(self) -> Path:
        return self.root / "dataset.jsonl"

    @property
    def dynamics(self) -> Path:
        return self.root / "dynamics.pt"

    @property
    def bisim(self) -> Path:
        return self.root / "bisim.pt"

    @property
    def run_state(self) -> Path:
        return self.root / "run_state.json"

    @property
    def mdp(self) -> Path:
        return self.root / "mdp.json"

    @property
    def stitch_log(self) -> Path:
        return self.root / "stitch_log.jsonl"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.csv"

    @property
    def harvest_returns(self) -> Path:
        return self.root / "harvest_returns.csv"

    def policy(self, source: str = "stitched") -> Path:
        return self.root / ("policy.pt" if source == "stitched" else f"policy_{source}.pt")

    def evaluation(self, source: str = "stitched") -> Path:
        return self.root / ("evaluation.json" if source == "stitched" else f"evaluation_{source}.json")

    @property
    def residuals(self) -> Path:
        return self.root / "residuals.csv"

    @property
    def bounds_report(self) -> Path:
        return self.root / "bounds_report.json"

    @property
    def plots(self) -> Path:
        return self.root / "plots"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def report(self) -> Path:
        return self.root / "report.pdf"


def config_hash(config: PipelineConfig) -> str:
    return sha256_bytes(canonical_json(config.model_dump(mode="json")).encode("utf-8"))


def update_manifest(paths: RunPaths, config: PipelineConfig, stage: str, outputs: List[Path]) -> Dict[str, Any]:
    """Merge this stage's outputs (with checksums) into `manifest.json`."""
    doc: Dict[str, Any] = {}
    if paths.manifest.exists():
        try:
            doc = read_json(paths.manifest)
        except Exception:
            logger.warning("unreadable manifest %s; starting a new one", paths.manifest)
            doc = {}
    h = config_hash(config)
    if doc.get("config_hash") not in (None, h):
        logger.warning("config changed since the last stage in %s; manifest now records the new config", paths.root)
    artifacts = dict(doc.get("artifacts", {}))
    stage_files = {}
    for p in outputs:
        if p.is_file():
            rel = p.relative_to(paths.root).as_posix() if p.is_relative_to(paths.root) else str(p)
            artifacts[rel] = stage_files[rel] = sha256_file(p)
    stages = dict(doc.get("stages", {}))
    stages[stage] = {"outputs": stage_files, "finished_at": datetime.now(timezone.utc).isoformat()}
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "config_hash": h,
        "seed": config.seed,
        "config": config.model_dump(mode="json"),
        "artifacts": dict(sorted(artifacts.items())),
        "stages": stages,
    }
    write_json(paths.manifest, doc)
    return doc


class BaseStage(ABC):
    """One CLI subcommand: reads declared inputs, writes declared outputs, records them in the manifest."""

    def __init__(self, *, name: str, description: str, config: PipelineConfig) -> None:
        self.name = name
        self.description = description
        self.config = config
        self.paths = RunPaths(Path(config.output_dir))
        self.outputs: List[Path] = []

    # ───── helpers ─────
    def seed(self, *parts: Any) -> int:
        return derive_seed(self.config.seed, self.name, *parts)

    def require(self, path: Path, producer: str) -> Path:
        if not Path(path).is_file():
            raise MissingArtifactError(str(path), producer)
        return Path(path)

    def produced(self, *paths: Path) -> None:
        self.outputs.extend(Path(p) for p in paths)

    @property
    def dataset_path(self) -> Path:
        return Path(self.config.dataset_path) if self.config.dataset_path else self.paths.dataset

    def load_data(self) -> TrajectoryDataset:
        return load_dataset(self.require(self.dataset_path, "gen-data"))

    def make_env(self) -> BaseEnv:
        return make_env(self.config.env)

    def make_metric(self, data: TrajectoryDataset) -> DistanceMetric:
        spec = self.config.metric
        if spec.startswith("bisim:"):
            self.require(Path(spec.split(":", 1)[1]), "train-bisim")
        from bats.bisim_embed import load_embedding

        return make_metric(spec, data.normalization, load_embedding)

    # ───── entry points ─────
    @abstractmethod
    def process_request(self, inputs: Dict[str, Any]) -> Dict[str, Any]:
        ...

    def run(self, inputs: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        self.paths.root.mkdir(parents=True, exist_ok=True)
        self.outputs = []
        logger.info("%s: %s", self.name, self.description)
        result = self.process_request(dict(inputs or {}))
        update_manifest(self.paths, self.config, self.name, self.outputs)
        return result
