# stages/model_stage.py
from typing import Any, Dict

import numpy as np

from bats.bisim_embed import save_embedding, train_bisim
from bats.dynamics import save_ensemble, train_ensemble
from stages.base_stage import BaseStage


class TrainDynamicsStage(BaseStage):
    def __init__(self, config) -> None:
        super().__init__(
            name="train-dynamics",
            description="Fit the probabilistic dynamics ensemble and keep its best members.",
            config=config,
        )

    def process_request(self, inputs: Dict[str, Any]) -> Dict[str, Any]:
        data = self.load_data()
        ensemble = train_ensemble(data, self.config.dynamics, self.seed())
        save_ensemble(ensemble, self.paths.dynamics)
        self.produced(self.paths.dynamics)
        kept = [ensemble.validation_losses[i] for i in ensemble.kept_indices]
        return {
            "checkpoint": str(self.paths.dynamics),
            "members": ensemble.n_members,
            "mean_validation_mse": float(np.mean(kept)),
        }


class TrainBisimStage(BaseStage):
    def __init__(self, config) -> None:
        super().__init__(
            name="train-bisim",
            description="Learn a state embedding for the on-policy bisimulation metric.",
            config=config,
        )

    def process_request(self, inputs: Dict[str, Any]) -> Dict[str, Any]:
        data = self.load_data()
        embedding = train_bisim(data, self.config.bisim, self.seed())
        save_embedding(embedding, self.paths.bisim)
        self.produced(self.paths.bisim)
        return {
            "checkpoint": str(self.paths.bisim),
            "metric": f"bisim:{self.paths.bisim}",
            "final_loss": embedding.loss_history[-1],
        }
