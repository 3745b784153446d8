# stages/export_stage.py
from typing import Any, Dict, List

import numpy as np
import pandas as pd

from bats.mdp_core import TabularMdp, greedy_policy, load_mdp, value_iteration
from bats.policy_cloning import graph_rollout, load_policy, value_residuals
from bats.stitching import StitchLog
from stages.base_stage import BaseStage
from stages.stitch_stage import value_bounds
from utils.report import write_run_report

MAX_POLICY_TRACES = 10


def _vector_columns(prefix: str, x: np.ndarray) -> Dict[str, float]:
    return {f"{prefix}{i}": float(v) for i, v in enumerate(np.ravel(x))}


def value_map_frame(mdp: TabularMdp, lower: np.ndarray, upper: np.ndarray) -> pd.DataFrame:
    starts = set(mdp.start_states)
    rows = []
    for s in range(mdp.n_states):
        rows.append({
            "state": s,
            **_vector_columns("s", mdp.states[s]),
            "value_lower": float(lower[s]),
            "value_upper": float(upper[s]),
            "terminal": bool(mdp.terminal_flags[s]),
            "imagined": bool(mdp.imagined_flags[s]),
            "start": s in starts,
        })
    return pd.DataFrame(rows)


def graph_trace_frame(mdp: TabularMdp, choice: np.ndarray, horizon: int) -> pd.DataFrame:
    rows: List[Dict[str, Any]] = []
    for start in mdp.start_states:
        for t, (s, a) in enumerate(graph_rollout(mdp, choice, start, horizon)):
            e = mdp.actions_per_state[s][a]
            rows.append({
                "start": start, "t": t,
                **_vector_columns("s", mdp.states[s]),
                **_vector_columns("a", e.action),
                "reward": e.reward, "penalty": e.penalty, "is_stitch": e.is_stitch,
            })
    return pd.DataFrame(rows)


class ExportPlotsStage(BaseStage):
    def __init__(self, config) -> None:
        super().__init__(
            name="export-plots",
            description="Write CSV series for value maps, residuals, action and trajectory traces.",
            config=config,
        )

    def process_request(self, inputs: Dict[str, Any]) -> Dict[str, Any]:
        mdp = load_mdp(self.require(self.paths.mdp, "stitch"))
        out = self.paths.plots
        out.mkdir(parents=True, exist_ok=True)
        lower, upper = value_bounds(mdp, self.config.bats)
        values = value_iteration(mdp, self.config.bats.vi_tolerance, self.config.bats.vi_max_iters)
        choice = greedy_policy(values, mdp).choice
        written = {}

        written["value_map"] = out / "value_map.csv"
        value_map_frame(mdp, lower, upper).to_csv(written["value_map"], index=False)
        written["graph_traces"] = out / "graph_traces.csv"
        graph_trace_frame(mdp, choice, self.config.clone.harvest_horizon).to_csv(written["graph_traces"], index=False)

        if self.paths.stitch_log.is_file():
            written["stitches"] = out / "stitches.csv"
            pd.DataFrame(StitchLog.read(self.paths.stitch_log)).to_csv(written["stitches"], index=False)
        if self.paths.metrics.is_file():
            written["iterations"] = out / "iterations.csv"
            pd.read_csv(self.paths.metrics).to_csv(written["iterations"], index=False)

        if self.paths.policy().is_file():
            env = self.make_env()
            policy = load_policy(self.paths.policy())
            rows: List[Dict[str, Any]] = []
            for start in mdp.start_states[:MAX_POLICY_TRACES]:
                roll = env.rollout(policy.act, mdp.states[start])
                for t in range(len(roll["rewards"])):
                    rows.append({
                        "start": start, "t": t,
                        **_vector_columns("s", roll["states"][t]),
                        **_vector_columns("a", roll["actions"][t]),
                        "reward": float(roll["rewards"][t]),
                    })
            written["policy_traces"] = out / "policy_traces.csv"
            pd.DataFrame(rows).to_csv(written["policy_traces"], index=False)

            written["residuals"] = out / "residuals.csv"
            if self.paths.residuals.is_file():
                pd.read_csv(self.paths.residuals).to_csv(written["residuals"], index=False)
            else:
                value_residuals(mdp, choice, policy, env).to_csv(written["residuals"], index=False)

        self.produced(*written.values())
        # the PDF embeds a timestamp, so it stays out of the manifest
        written["report"] = write_run_report(self.paths.root, self.paths.report)
        return {name: str(p) for name, p in written.items()}
