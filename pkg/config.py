"""
Run configuration: per-command defaults, a flat JSON config file with
dotted keys, and `--set key=value` overrides.
"""

import json
import os
from typing import Any, Dict, Iterable, Optional

from exceptions import ConfigError
from mini_vlm import VlmConfig
from models import SceneSpec
from storage import write_json
from training import TrainConfig

SCENE_DEFAULTS = {f"scene.{name}": value for name, value in SceneSpec().to_dict().items() if name != "seed"}

MODEL_DEFAULTS = {
    "model.dim": 64,
    "model.num_heads": 4,
    "model.encoder_layers": 2,
    "model.qformer_layers": 2,
    "model.decoder_layers": 2,
    "model.num_queries": 8,
    "model.p_mask": 0.75,
}

SELECTION_DEFAULTS = {
    "selection.tau": 0.5,
    "selection.k": 3,
}

TRAIN_DEFAULTS = {
    "train.lr": 1e-4,
    "train.epochs": 500,
    "train.step_size": 50,
    "train.gamma": 0.1,
    "train.seed": 0,
}

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "gen-data": {
        "data.clips": 2000,
        "data.seed": 0,
        "data.out": "data",
        "data.marginal_samples": 20000,
        **SCENE_DEFAULTS,
    },
    "train-gen": {
        "data.path": "data",
        "out": "runs/generator",
        **TRAIN_DEFAULTS,
        "train.batch_size": 16,
        "train.patience": 20,
    },
    "train-vlm": {
        "data.path": "data",
        "out": "runs/vlm",
        "generator.checkpoint": "",
        **TRAIN_DEFAULTS,
        "train.batch_size": 32,
        "train.patience": 25,
        "train.attention_source": "none",
        "train.encoder_warm_epochs": 20,
        "train.snapshot_every": 0,
        **MODEL_DEFAULTS,
        **SELECTION_DEFAULTS,
    },
    "eval": {
        "data.path": "data",
        "out": "runs/eval",
        "vlm.checkpoint": "",
        "generator.checkpoint": "",
        "eval.attention_source": "none",
        "eval.split": "validation",
        "eval.batch_size": 64,
        "eval.self_check": False,
        **SELECTION_DEFAULTS,
    },
    "visualize": {
        "data.path": "data",
        "out": "overlay.png",
        "clip_id": "",
        "vlm.checkpoint": "",
        "generator.checkpoint": "",
        "eval.attention_source": "none",
        "visualize.scale": 4,
        **SELECTION_DEFAULTS,
    },
    "compare": {
        "out": "runs/compare",
        "compare.none": "",
        "compare.oracle_object": "",
        "compare.predicted_patch": "",
        "compare.margin": 0.02,
    },
}


def parse_value(text: str) -> Any:
    """JSON value when the text parses, the raw string otherwise"""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_override(item: str) -> Dict[str, Any]:
    if "=" not in item:
        raise ConfigError(f"Override '{item}' is not of the form key=value")
    key, value = item.split("=", 1)
    return {key.strip(): parse_value(value)}


def load_config_file(path: str, command: Optional[str] = None) -> Dict[str, Any]:
    """Read a flat config file; a resolved config.json from an earlier run is accepted as is"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {str(e)}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {str(e)}") from e
    if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
        raise ConfigError(f"Config file {path} must be a flat object with dotted keys")
    recorded = data.pop("command", None)
    if recorded is not None and command is not None and recorded != command:
        raise ConfigError(f"Config file {path} was written by '{recorded}', not '{command}'")
    return data


def _coerce(key: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{key}' expects true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{key}' expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{key}' expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"'{key}' expects a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"'{key}' expects a list, got {value!r}")
        return value
    return value


def resolve(command: str, *layers: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    """
    Merge config layers over the command's defaults.

    Args:
        command: Subcommand name
        layers: Dicts applied in order (config file, flags, --set overrides)

    Returns:
        Resolved flat config

    Raises:
        ConfigError: on unknown keys or mistyped values
    """
    if command not in DEFAULTS:
        raise ConfigError(f"Unknown command '{command}'")
    defaults = DEFAULTS[command]
    resolved = dict(defaults)
    for layer in layers:
        for key, value in (layer or {}).items():
            if key not in defaults:
                raise ConfigError(f"Unknown config key '{key}' for {command}")
            resolved[key] = _coerce(key, defaults[key], value)
    return resolved


def overrides_from(items: Optional[Iterable[str]]) -> Dict[str, Any]:
    merged: Dict[str, Any] = {}
    for item in items or []:
        merged.update(parse_override(item))
    return merged


def write_resolved(config: Dict[str, Any], directory: str, command: str):
    os.makedirs(directory, exist_ok=True)
    write_json(os.path.join(directory, "config.json"), {"command": command, **config})


def scene_spec_from(config: Dict[str, Any]) -> SceneSpec:
    values = {key[len("scene."):]: value for key, value in config.items() if key.startswith("scene.")}
    values["kinds"] = tuple(values.get("kinds", SceneSpec().kinds))
    values["seed"] = config.get("data.seed", 0)
    return SceneSpec(**values).validate()


def train_config_from(config: Dict[str, Any]) -> TrainConfig:
    values = {key[len("train."):]: value for key, value in config.items() if key.startswith("train.")}
    return TrainConfig(
        dataset=config.get("data.path", ""),
        checkpoint_dir=config.get("out", ""),
        generator_checkpoint=config.get("generator.checkpoint", ""),
        **values,
    ).validate()


def vlm_config_from(config: Dict[str, Any], **dataset_dims) -> VlmConfig:
    """Model architecture from model.* keys plus dims read from the dataset"""
    values = {key[len("model."):]: value for key, value in config.items() if key.startswith("model.")}
    return VlmConfig(**dataset_dims, **values)
