# stages/clone_stage.py
from typing import Any, Dict

import pandas as pd

from bats.errors import ConfigError
from bats.mdp_core import greedy_policy, load_mdp, value_iteration
from bats.policy_cloning import (
    behavior_clone,
    evaluate_policy,
    format_histogram,
    graph_returns,
    harvest_trajectories,
    load_policy,
    return_histogram,
    save_policy,
    value_residuals,
)
from stages.base_stage import BaseStage
from utils.helpers import write_json
from utils.log import get_logger

logger = get_logger(__name__)

SOURCES = ("stitched", "raw")


class CloneStage(BaseStage):
    def __init__(self, config) -> None:
        super().__init__(
            name="clone",
            description="Harvest high-return graph trajectories and behavior-clone them.",
            config=config,
        )

    def process_request(self, inputs: Dict[str, Any]) -> Dict[str, Any]:
        source = inputs.get("source", "stitched")
        if source not in SOURCES:
            raise ConfigError(f"clone source must be one of {SOURCES}")
        env = self.make_env()
        clone_cfg = self.config.clone

        if source == "raw":
            harvest = self.load_data()
            summary: Dict[str, Any] = {"source": "raw"}
        else:
            mdp = load_mdp(self.require(self.paths.mdp, "stitch"))
            values = value_iteration(mdp, self.config.bats.vi_tolerance, self.config.bats.vi_max_iters)
            policy = greedy_policy(values, mdp)
            returns = graph_returns(mdp, policy.choice, clone_cfg.harvest_horizon)
            pd.DataFrame({"start": mdp.start_states, "return": returns}).to_csv(self.paths.harvest_returns, index=False)
            self.produced(self.paths.harvest_returns)
            print(format_histogram(*return_histogram(returns)))

            threshold = clone_cfg.return_threshold
            if threshold is None:
                raise ConfigError(
                    "clone.return_threshold is not set; pick it from the return histogram above "
                    f"(also in {self.paths.harvest_returns})"
                )
            harvest = harvest_trajectories(mdp, policy, threshold, clone_cfg.harvest_horizon)
            summary = {
                "source": "stitched",
                "threshold": threshold,
                "kept": len(harvest.trajectories),
                "starts": len(mdp.start_states),
            }

        policy_net = behavior_clone(harvest, clone_cfg, self.seed(source), env.action_bounds)
        path = self.paths.policy(source)
        save_policy(policy_net, path)
        self.produced(path)
        return {**summary, "pairs": harvest.n_records, "checkpoint": str(path)}


class EvaluateStage(BaseStage):
    def __init__(self, config) -> None:
        super().__init__(
            name="evaluate",
            description="Roll the cloned policy's mean action in the environment.",
            config=config,
        )

    def process_request(self, inputs: Dict[str, Any]) -> Dict[str, Any]:
        source = inputs.get("source", "stitched")
        if source not in SOURCES:
            raise ConfigError(f"policy source must be one of {SOURCES}")
        producer = "clone" if source == "stitched" else "clone --source raw"
        policy = load_policy(self.require(self.paths.policy(source), producer))
        env = self.make_env()
        ev = self.config.evaluation
        report = evaluate_policy(policy, env, ev.n_episodes, self.seed(ev.seed), ev.final_window)
        write_json(self.paths.evaluation(source), dict(report))
        self.produced(self.paths.evaluation(source))

        if source == "stitched" and self.paths.mdp.is_file():
            mdp = load_mdp(self.paths.mdp)
            values = value_iteration(mdp, self.config.bats.vi_tolerance, self.config.bats.vi_max_iters)
            residuals = value_residuals(mdp, greedy_policy(values, mdp).choice, policy, env)
            residuals.to_csv(self.paths.residuals, index=False)
            self.produced(self.paths.residuals)

        return {
            "source": source,
            "episodes": report["n_episodes"],
            "mean": report["mean"],
            "std": report["std"],
            "goal_fraction": report.get("goal_fraction"),
            "solved": (report["mean"] is not None and env.solved_threshold is not None
                       and report["mean"] >= env.solved_threshold),
        }
