"""Run configuration: JSON file merged over defaults, then dotted-key flag overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from pathlib import Path

from layercut.decompose import LossWeights, OptimSchedule, PromptConfig
from layercut.errors import ConfigError

SNAPSHOT_NAME = "resolved_config.json"

_SCHEDULE_KEYS = [f.name for f in dataclasses.fields(OptimSchedule) if f.name not in ("pose_set", "seed")]

DEFAULTS = {
    "seed": 0,
    "grid": {"resolution": 64},
    "prompts": {"gender": "person", "object": "object"},
    "guidance": {"mode": None, "url": None, "timeout_ms": 30000, "mock_target": "template"},
    "weights": dataclasses.asdict(LossWeights()),
    "schedule": {k: getattr(OptimSchedule(), k) for k in _SCHEDULE_KEYS},
    "lift": {"min_votes": 3},
    "refine": {"lambda_dis": 10.0, "steps": 200, "lr": 1e-3, "reach": None, "visibility_size": 256},
    "metrics": {"chamfer_samples": 100000, "iou_resolution": 128, "units_to_cm": 1.0, "views": 30},
    "render": {"views": 8, "size": 256, "elevation": 0.0, "fov": 1.0471975511965976},
    "demo": {
        "rig_resolution": 40, "gt_resolution": 48, "grid_resolution": 24, "init_steps": 200, "geo_steps": 200,
        "tex_steps": 200, "tex_sds_warmup": 100, "lift_views": 20, "eval_samples": 20000,
        "eval_iou_resolution": 64,
    },
}


def _merge(base: dict, new: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in new.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    """Defaults, overlaid with the JSON file at ``path`` if given."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return _merge(DEFAULTS, doc)


def apply_overrides(cfg: dict, overrides: dict) -> dict:
    """{"section.key": value} pairs; None values are skipped so unset flags do not clobber the file."""
    out = copy.deepcopy(cfg)
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = out
        parts = dotted.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key {dotted}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted}")
        node[parts[-1]] = value
    return out


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_snapshot(cfg: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / SNAPSHOT_NAME
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path


def loss_weights(cfg: dict) -> LossWeights:
    try:
        return LossWeights(**cfg["weights"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"weights: {exc}") from exc


def optim_schedule(cfg: dict, pose_set=()) -> OptimSchedule:
    try:
        return OptimSchedule(pose_set=tuple(pose_set), seed=int(cfg["seed"]), **cfg["schedule"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"schedule: {exc}") from exc


def prompt_config(cfg: dict) -> PromptConfig:
    p = cfg["prompts"]
    if not (isinstance(p["gender"], str) and isinstance(p["object"], str)):
        raise ConfigError("prompts.gender and prompts.object must be strings")
    return PromptConfig(gender_word=p["gender"], object_name=p["object"])
