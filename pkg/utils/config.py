# utils/config.py
from __future__ import annotations
from copy import deepcopy
from pathlib import Path
from typing import Any, Dict, Iterable, Optional
import os

from pydantic import ValidationError

from b_types.config_types import PipelineConfig
from bats.errors import ConfigError
from presets.maze_preset import MAZE_PRESET
from presets.mountain_car_preset import MOUNTAIN_CAR_PRESET
from utils.helpers import parse_scalar, read_json

try:
    from dotenv import load_dotenv
    load_dotenv()
except Exception:
    pass

PRESETS: Dict[str, Dict[str, Any]] = {
    "mountain_car": MOUNTAIN_CAR_PRESET,
    "point_maze": MAZE_PRESET,
}


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = deepcopy(v)
    return out


def set_dotted(doc: Dict[str, Any], key: str, value: Any) -> None:
    """`bats.cem.population` → doc["bats"]["cem"]["population"] = value."""
    parts = [p for p in key.split(".") if p]
    if not parts:
        raise ConfigError(f"empty override key {key!r}")
    node = doc
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node = nxt
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), parse_scalar(raw)


def read_config_file(path: str | Path) -> Dict[str, Any]:
    """A JSON config, or a run manifest (its recorded config is used)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = read_json(path)
    except Exception as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    if doc.get("format") == "bats-manifest":
        return dict(doc["config"])
    return doc


def build_config(
    preset: Optional[str] = None,
    config_path: Optional[str | Path] = None,
    overrides: Iterable[str] = (),
    updates: Optional[Dict[str, Any]] = None,
) -> PipelineConfig:
    """
    Layering, lowest first: preset, config file, `updates` (subcommand flags,
    dotted keys), then generic `--set key=value` overrides.
    """
    doc: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        doc = deepcopy(PRESETS[preset])
    if config_path is not None:
        doc = deep_merge(doc, read_config_file(config_path))
    if "output_dir" not in doc and os.getenv("BATS_OUTPUT_DIR"):
        doc["output_dir"] = os.environ["BATS_OUTPUT_DIR"]
    for key, value in (updates or {}).items():
        if value is not None:
            set_dotted(doc, key, value)
    for text in overrides:
        set_dotted(doc, *parse_override(text))
    if "seed" not in doc:
        raise ConfigError("a seed is required (config file, preset, or --seed)")
    try:
        return PipelineConfig.model_validate(doc)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"invalid config at {where or '<root>'}: {first['msg']}") from e
