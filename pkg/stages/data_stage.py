# stages/data_stage.py
from typing import Any, Dict

from bats.dataset import save_dataset
from envs.generate import generate_dataset
from stages.base_stage import BaseStage


class GenDataStage(BaseStage):
    def __init__(self, config) -> None:
        super().__init__(
            name="gen-data",
            description="Roll scripted and random controllers in the environment and write the dataset.",
            config=config,
        )

    def process_request(self, inputs: Dict[str, Any]) -> Dict[str, Any]:
        env = self.make_env()
        spec = self.config.generator.model_copy(update={"seed": self.seed(self.config.generator.seed)})
        data = generate_dataset(env, spec)
        save_dataset(data, self.paths.dataset)
        self.produced(self.paths.dataset)
        return {
            "dataset": str(self.paths.dataset),
            "trajectories": len(data.trajectories),
            "records": data.n_records,
        }
