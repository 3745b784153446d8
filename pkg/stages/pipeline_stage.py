# stages/pipeline_stage.py
from typing import Any, Callable, Dict, List, Tuple

from stages.base_stage import BaseStage
from stages.bounds_stage import VerifyBoundsStage
from stages.clone_stage import CloneStage, EvaluateStage
from stages.data_stage import GenDataStage
from stages.export_stage import ExportPlotsStage
from stages.model_stage import TrainBisimStage, TrainDynamicsStage
from stages.stitch_stage import RelabelStage, StitchStage
from utils.log import get_logger

logger = get_logger(__name__)

STAGES: Dict[str, Callable[..., BaseStage]] = {
    "gen-data": GenDataStage,
    "train-dynamics": TrainDynamicsStage,
    "train-bisim": TrainBisimStage,
    "stitch": StitchStage,
    "clone": CloneStage,
    "evaluate": EvaluateStage,
    "verify-bounds": VerifyBoundsStage,
    "relabel": RelabelStage,
    "export-plots": ExportPlotsStage,
}


def make_stage(name: str, config) -> BaseStage:
    return STAGES[name](config)


class RunAllStage(BaseStage):
    """gen-data → train-dynamics → stitch → clone → evaluate → export-plots."""

    def __init__(self, config) -> None:
        super().__init__(
            name="run-all",
            description="Run the whole pipeline into one run directory.",
            config=config,
        )

    def plan(self, inputs: Dict[str, Any]) -> List[Tuple[str, Dict[str, Any]]]:
        steps: List[Tuple[str, Dict[str, Any]]] = []
        if self.config.dataset_path is None:
            steps.append(("gen-data", {}))
        if self.config.dynamics_source == "learned":
            steps.append(("train-dynamics", {}))
        steps.append(("stitch", {"resume": inputs.get("resume", False)}))
        steps.append(("clone", {}))
        steps.append(("evaluate", {}))
        if inputs.get("baseline"):
            steps.append(("clone", {"source": "raw"}))
            steps.append(("evaluate", {"source": "raw"}))
        steps.append(("export-plots", {}))
        return steps

    def process_request(self, inputs: Dict[str, Any]) -> Dict[str, Any]:
        results: Dict[str, Any] = {}
        for name, stage_inputs in self.plan(inputs):
            key = name if stage_inputs.get("source") != "raw" else f"{name}-raw"
            results[key] = make_stage(name, self.config).run(stage_inputs)
        return results
