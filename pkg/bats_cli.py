# bats_cli.py
from __future__ import annotations
from typing import Any, Dict, List, Optional, Tuple
import argparse
import json
import os
import sys

from bats.errors import BatsError
from stages.base_stage import BaseStage
from stages.pipeline_stage import STAGES, RunAllStage, make_stage
from utils.config import PRESETS, build_config
from utils.log import configure_logging, get_logger

try:
    from dotenv import load_dotenv
    load_dotenv()
except Exception:
    pass

logger = get_logger("cli")

# ───────────────────────── flag → config key ─────────────────────────
# (flag dest, dotted config key)
COMMON_UPDATES: List[Tuple[str, str]] = [
    ("seed", "seed"),
    ("output_dir", "output_dir"),
    ("metric", "metric"),
    ("dynamics", "dynamics_source"),
    ("dataset", "dataset_path"),
    ("env", "env.name"),
    ("layout", "env.layout_path"),
]

COMMAND_UPDATES: Dict[str, List[Tuple[str, str]]] = {
    "gen-data": [("n_random", "generator.n_random"), ("n_expert", "generator.n_expert"),
                 ("steps", "generator.max_steps")],
    "train-dynamics": [("optimizer", "dynamics.optimizer"), ("epochs", "dynamics.max_epochs")],
    "train-bisim": [("steps", "bisim.steps")],
    "stitch": [("iterations", "bats.n_iterations"), ("workers", "bats.workers")],
    "clone": [("return_threshold", "clone.return_threshold"), ("batch_updates", "clone.batch_updates")],
    "evaluate": [("episodes", "evaluation.n_episodes")],
    "verify-bounds": [],
    "relabel": [],
    "export-plots": [],
    "run-all": [("iterations", "bats.n_iterations"), ("return_threshold", "clone.return_threshold"),
                ("episodes", "evaluation.n_episodes")],
}

COMMAND_INPUTS: Dict[str, List[str]] = {
    "stitch": ["resume"],
    "clone": ["source"],
    "evaluate": ["source"],
    "verify-bounds": ["instances"],
    "relabel": ["penalty_coefficient", "max_distance"],
    "run-all": ["resume", "baseline"],
}

HELP = {
    "gen-data": "generate an offline dataset in the configured environment",
    "train-dynamics": "train the dynamics ensemble",
    "train-bisim": "train the bisimulation embedding",
    "stitch": "run the stitching loop and write the stitched MDP",
    "clone": "harvest graph trajectories and behavior-clone a policy",
    "evaluate": "evaluate a cloned policy in the environment",
    "verify-bounds": "check the value bounds on random tabular instances",
    "relabel": "relabel stitch penalties (and prune) without replanning",
    "export-plots": "export CSV plot data and a PDF report",
    "run-all": "gen-data, train-dynamics, stitch, clone, evaluate, export-plots",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (or a run manifest)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="start from a preset config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. bats.cem.population=400")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir")
    common.add_argument("--metric", help="euclidean | normalized | bisim:<checkpoint>")
    common.add_argument("--dynamics", choices=["learned", "oracle"])
    common.add_argument("--dataset", help="read this dataset instead of <output-dir>/dataset.jsonl")
    common.add_argument("--env", choices=["mountain_car", "point_maze"])
    common.add_argument("--layout", help="maze layout JSON")
    common.add_argument("--log-level", default=None)

    parser = argparse.ArgumentParser(prog="bats", description="Best-action trajectory stitching pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = {name: sub.add_parser(name, parents=[common], help=HELP[name]) for name in (*STAGES, "run-all")}

    p["gen-data"].add_argument("--n-random", type=int)
    p["gen-data"].add_argument("--n-expert", type=int)
    p["gen-data"].add_argument("--steps", type=int, help="max steps per trajectory")
    p["train-dynamics"].add_argument("--optimizer", choices=["sgd", "adam"])
    p["train-dynamics"].add_argument("--epochs", type=int)
    p["train-bisim"].add_argument("--steps", type=int)
    for name in ("stitch", "run-all"):
        p[name].add_argument("--iterations", type=int)
        p[name].add_argument("--resume", action="store_true", help="continue from run_state.json")
    p["stitch"].add_argument("--workers", type=int)
    for name in ("clone", "run-all"):
        p[name].add_argument("--return-threshold", type=float)
    p["clone"].add_argument("--batch-updates", type=int)
    for name in ("clone", "evaluate"):
        p[name].add_argument("--source", choices=["stitched", "raw"], default="stitched")
    for name in ("evaluate", "run-all"):
        p[name].add_argument("--episodes", type=int)
    p["run-all"].add_argument("--baseline", action="store_true", help="also clone and evaluate on the raw dataset")
    p["verify-bounds"].add_argument("--instances", type=int, default=100)
    p["relabel"].add_argument("--penalty-coefficient", type=float)
    p["relabel"].add_argument("--max-distance", type=float, help="drop stitches farther than this")
    return parser


def _updates(args: argparse.Namespace) -> Dict[str, Any]:
    pairs = COMMON_UPDATES + COMMAND_UPDATES.get(args.command, [])
    return {key: getattr(args, dest) for dest, key in pairs if getattr(args, dest, None) is not None}


def _inputs(args: argparse.Namespace) -> Dict[str, Any]:
    return {k: getattr(args, k) for k in COMMAND_INPUTS.get(args.command, []) if hasattr(args, k)}


def _set_torch_threads() -> None:
    n = os.getenv("BATS_TORCH_THREADS")
    if n:
        import torch

        torch.set_num_threads(max(1, int(n)))


def run_stage_safe(stage: BaseStage, inputs: Dict[str, Any]) -> Tuple[int, Optional[Dict[str, Any]]]:
    try:
        return 0, stage.run(inputs)
    except BatsError as e:
        logger.error("%s failed: %s", stage.name, e)
        return e.exit_code, None


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    _set_torch_threads()
    try:
        config = build_config(args.preset, args.config, args.set, _updates(args))
    except BatsError as e:
        logger.error("%s", e)
        return e.exit_code
    stage = RunAllStage(config) if args.command == "run-all" else make_stage(args.command, config)
    code, result = run_stage_safe(stage, _inputs(args))
    if result is not None:
        print(json.dumps(result, indent=2, default=str))
    return code


if __name__ == "__main__":
    sys.exit(main())
