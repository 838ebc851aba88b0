"""Experiment configuration: YAML schema, layered defaults, dotted overrides.

Precedence is command line > config file > built-in defaults. Every run
writes the fully resolved configuration next to its outputs so any reported
number can be replayed. Environment variables are honored for paths only
(CYCADA_DATA_ROOT, CYCADA_OUT_ROOT), never for hyperparameters.
"""

from __future__ import annotations

import copy
import os
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigError
from .losses import TERM_NAMES, LossWeights
from .trainer import STAGES, ExperimentManifest, StageConfig, stage_from_dict

CONFIG_SCHEMA_VERSION = 1

ENV_DATA_ROOT = "CYCADA_DATA_ROOT"
ENV_OUT_ROOT = "CYCADA_OUT_ROOT"

DATASET_KINDS = ("toy", "digits", "segmentation-doc")

# Published per-stage hyperparameter defaults for the digit protocol.
STAGE_DEFAULTS = {
    "source-pretrain": {"learning_rate": 1e-4, "batch_size": 128, "max_epochs": 100},
    "task-on-translated": {"learning_rate": 1e-4, "batch_size": 128, "max_epochs": 100},
    "pixel-adapt": {"learning_rate": 2e-4, "batch_size": 100, "max_epochs": 50},
    "feature-adapt": {"learning_rate": 1e-5, "batch_size": 128, "max_epochs": 200},
}

DEFAULTS = {
    "schema_version": CONFIG_SCHEMA_VERSION,
    "experiment": None,
    "method": "",
    "shift_label": "",
    "seeds": [0, 1, 2, 3],
    "out_root": None,
    "dataset": {},
    "stages": [],
    "notes": "",
}


def data_root() -> Path:
    return Path(os.environ.get(ENV_DATA_ROOT, "data"))


def out_root() -> Path:
    return Path(os.environ.get(ENV_OUT_ROOT, "runs"))


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        loaded = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(loaded, dict):
        raise ConfigError(f"config file {path} must hold a mapping at the top level")
    return loaded


def parse_override(text: str) -> tuple:
    """Split 'dotted.key=value' into a path list and a YAML-parsed value."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, _, raw = text.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override value {raw!r} is not parseable: {exc}") from exc
    path = []
    for part in key.split("."):
        path.append(int(part) if part.lstrip("-").isdigit() else part)
    return path, value


def apply_override(config: dict, path: list, value) -> None:
    node = config
    for i, part in enumerate(path[:-1]):
        try:
            node = node[part]
        except (KeyError, IndexError, TypeError) as exc:
            joined = ".".join(str(p) for p in path[: i + 1])
            raise ConfigError(f"override path {joined!r} does not exist") from exc
    last = path[-1]
    if isinstance(node, list):
        if not isinstance(last, int) or not -len(node) <= last < len(node):
            raise ConfigError(f"override index {last!r} is out of range")
        node[last] = value
    elif isinstance(node, dict):
        node[last] = value
    else:
        joined = ".".join(str(p) for p in path)
        raise ConfigError(f"override path {joined!r} does not address a container")


def resolve_config(file_config: dict, overrides: list | None = None) -> dict:
    """Layer built-in defaults, the config file, and command-line overrides."""
    config = copy.deepcopy(DEFAULTS)
    for key, value in file_config.items():
        config[key] = copy.deepcopy(value)
    stages = []
    for entry in config.get("stages") or []:
        if not isinstance(entry, dict) or "stage" not in entry:
            raise ConfigError(f"each stage entry needs a 'stage' key, got {entry!r}")
        merged = dict(STAGE_DEFAULTS.get(entry["stage"], {}))
        merged.update(entry)
        stages.append(merged)
    config["stages"] = stages
    for text in overrides or []:
        path, value = parse_override(text if isinstance(text, str) else "=")
        apply_override(config, path, value)
    if config.get("out_root") is None:
        config["out_root"] = str(out_root())
    return config


def validate_config(config: dict) -> None:
    """Schema checks; raises ConfigError with the offending key."""
    if config.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported schema_version {config.get('schema_version')!r}, "
            f"expected {CONFIG_SCHEMA_VERSION}"
        )
    if not config.get("experiment"):
        raise ConfigError("missing required key 'experiment'")
    seeds = config.get("seeds")
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) for s in seeds)):
        raise ConfigError("'seeds' must be a non-empty list of integers")
    dataset = config.get("dataset")
    if not isinstance(dataset, dict) or dataset.get("kind") not in DATASET_KINDS:
        raise ConfigError(f"'dataset.kind' must be one of {DATASET_KINDS}")
    if dataset["kind"] == "digits" and "shift" not in dataset:
        raise ConfigError("digits datasets need 'dataset.shift'")
    stages = config.get("stages")
    if not isinstance(stages, list) or not stages:
        raise ConfigError("'stages' must be a non-empty list")
    for i, entry in enumerate(stages):
        if entry.get("stage") not in STAGES:
            raise ConfigError(f"stages[{i}].stage must be one of {STAGES}")
        try:
            stage_from_dict(entry)
        except ConfigError as exc:
            raise ConfigError(f"stages[{i}]: {exc}") from exc
        weights = entry.get("weights")
        if weights is not None:
            unknown = set(weights) - set(TERM_NAMES)
            if unknown:
                raise ConfigError(f"stages[{i}].weights has unknown terms {sorted(unknown)}")
            try:
                LossWeights(**weights)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"stages[{i}].weights: {exc}") from exc


def manifest_from_config(config: dict) -> ExperimentManifest:
    """Turn a validated config into a runnable experiment manifest."""
    validate_config(config)
    dataset = dict(config["dataset"])
    if dataset["kind"] == "segmentation-doc":
        raise ConfigError(
            "this preset documents a full-scale segmentation setup and is not "
            "runnable at desk scale"
        )
    if dataset["kind"] == "digits" and "prepared_root" not in dataset:
        dataset["prepared_root"] = str(data_root() / "prepared")
    stages = [stage_from_dict(entry) for entry in config["stages"]]
    return ExperimentManifest(
        experiment=config["experiment"],
        method=config.get("method", ""),
        shift_label=config.get("shift_label", ""),
        stages=stages,
        seeds=list(config["seeds"]),
        dataset=dataset,
        out_root=config["out_root"],
    )


def write_snapshot(config: dict, out_dir) -> Path:
    """Persist the fully resolved configuration used for a run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved-config.yaml"
    with open(path, "w") as fh:
        yaml.safe_dump(config, fh, sort_keys=False)
    return path


def single_stage_config(config: dict, stage: str, seed: int) -> StageConfig:
    """Extract one stage's config (first match) for the per-stage CLI verbs."""
    for entry in config["stages"]:
        if entry["stage"] == stage:
            parsed = stage_from_dict(entry)
            parsed.seed = seed
            return parsed
    raise ConfigError(f"config defines no {stage!r} stage")


def preset_names() -> list:
    root = resources.files("cycada") / "presets"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".yaml"))


def load_preset(name: str) -> dict:
    root = resources.files("cycada") / "presets"
    candidate = root / name if name.endswith(".yaml") else root / f"{name}.yaml"
    if not candidate.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {preset_names()}")
    loaded = yaml.safe_load(candidate.read_text())
    if not isinstance(loaded, dict):
        raise ConfigError(f"preset {name!r} must hold a mapping")
    return loaded
