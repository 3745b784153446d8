# stages/stitch_stage.py
from typing import Any, Dict, Tuple

import numpy as np

from b_types.config_types import BatsConfig
from bats.bats_loop import load_run_state, prune_stitches, relabel_penalties, run_bats, write_metrics_csv
from bats.bounds import signed_mdp
from bats.dataset import build_m0, relabel_start_states
from bats.dynamics import FunctionEnsemble, ModelEnsemble, load_ensemble
from bats.mdp_core import TabularMdp, load_mdp, save_mdp, value_iteration
from envs.base_env import BaseEnv
from stages.base_stage import BaseStage
from utils.log import get_logger

logger = get_logger(__name__)


def value_bounds(mdp: TabularMdp, config: BatsConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Pessimistic (as stored) and optimistic state values of a stitched MDP."""
    lower = value_iteration(mdp, config.vi_tolerance, config.vi_max_iters).values
    upper = value_iteration(signed_mdp(mdp, +1), config.vi_tolerance, config.vi_max_iters).values
    return lower, upper


def _start_summary(mdp: TabularMdp, lower: np.ndarray, upper: np.ndarray) -> Dict[str, float]:
    starts = mdp.start_states
    if not starts:
        return {"mean_start_value": float("nan"), "mean_start_upper": float("nan")}
    return {
        "mean_start_value": float(np.mean(lower[starts])),
        "mean_start_upper": float(np.mean(upper[starts])),
    }


class StitchStage(BaseStage):
    def __init__(self, config) -> None:
        super().__init__(
            name="stitch",
            description="Grow the dataset MDP with model-planned stitches.",
            config=config,
        )

    def bats_config(self, env: BaseEnv) -> BatsConfig:
        cfg = self.config.bats
        cem = cfg.cem
        if cem.action_bounds is None:
            cem = cem.model_copy(update={"action_bounds": [tuple(b) for b in env.action_bounds]})
        return cfg.model_copy(update={"cem": cem, "rng_seed": self.seed(cfg.rng_seed)})

    def ensemble(self, env: BaseEnv) -> ModelEnsemble:
        if self.config.dynamics_source == "oracle":
            logger.info("planning with the true environment dynamics")
            return FunctionEnsemble.from_env(env, n_members=1)
        return load_ensemble(self.require(self.paths.dynamics, "train-dynamics"))

    def process_request(self, inputs: Dict[str, Any]) -> Dict[str, Any]:
        data = self.load_data()
        env = self.make_env()
        config = self.bats_config(env)
        ensemble = self.ensemble(env)
        metric = self.make_metric(data)

        m0 = build_m0(data, config.discount)
        if self.config.start_region is not None:
            m0 = relabel_start_states(m0, data, self.config.start_region)

        resume = None
        if inputs.get("resume") and self.paths.run_state.is_file():
            resume = load_run_state(self.paths.run_state)
            logger.info("resuming from iteration %d", resume.iteration)

        mdp, state = run_bats(
            data, ensemble, config,
            mdp=m0, metric=metric, resume=resume,
            checkpoint_path=self.paths.run_state, log_path=self.paths.stitch_log,
        )
        save_mdp(mdp, self.paths.mdp)
        write_metrics_csv(state.metrics, self.paths.metrics)
        self.produced(self.paths.mdp, self.paths.run_state, self.paths.stitch_log, self.paths.metrics)

        lower, upper = value_bounds(mdp, config)
        return {
            "iterations": state.iteration,
            "finished_early": state.finished,
            "stitches_accepted": sum(m["n_accepted"] for m in state.metrics),
            "n_states": mdp.n_states,
            "n_edges": mdp.n_edges,
            **_start_summary(mdp, lower, upper),
        }


class RelabelStage(BaseStage):
    def __init__(self, config) -> None:
        super().__init__(
            name="relabel",
            description="Recompute stitch penalties (and optionally drop far stitches) without replanning.",
            config=config,
        )

    def process_request(self, inputs: Dict[str, Any]) -> Dict[str, Any]:
        mdp = load_mdp(self.require(self.paths.mdp, "stitch"))
        coefficient = inputs.get("penalty_coefficient")
        if coefficient is None:
            coefficient = self.config.bats.penalty_coefficient
        mdp = relabel_penalties(mdp, float(coefficient))
        if inputs.get("max_distance") is not None:
            mdp = prune_stitches(mdp, float(inputs["max_distance"]))
        save_mdp(mdp, self.paths.mdp)
        self.produced(self.paths.mdp)

        lower, upper = value_bounds(mdp, self.config.bats)
        return {
            "penalty_coefficient": float(coefficient),
            "n_edges": mdp.n_edges,
            **_start_summary(mdp, lower, upper),
        }
