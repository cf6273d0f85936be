"""Run configuration: flat dotted-key files, strict schema, run manifests.

A config file is the complete experiment record: one ``section.key = value``
per line, ``#`` comments, unknown keys rejected. Every key has a documented
default. A manifest
snapshot of the resolved config plus seeds is written at run start and is
sufficient to bit-reproduce the run in sequential mode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .data import AugmentationConfig, PartitionPlan, parse_composition
from .errors import ConfigError
from .fedcore import FedConfig
from .model import ModelConfig

_BOOL_WORDS = {"true": True, "yes": True, "1": True, "on": True,
               "false": False, "no": False, "0": False, "off": False}


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL_WORDS[text.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {text!r}") from None


_DEFAULT_CLIENTS = "benign:400,normal:50 | malignant:200,normal:50 | benign:110,malignant:53"
_DEFAULT_SERVER = "benign:97,malignant:23,normal:34"

# key -> (type name, default); seeds of -1 inherit fed.seed at resolve time
SCHEMA: dict[str, tuple[str, object]] = {
    "fed.rounds": ("int", 6),
    "fed.local_epochs": ("int", 10),
    "fed.client_epochs": ("str", ""),
    "fed.mu": ("float", 0.1),
    "fed.weight_decay": ("float", 0.001),
    "fed.adam_lr": ("float", 1e-4),
    "fed.adam_beta1": ("float", 0.9),
    "fed.adam_beta2": ("float", 0.999),
    "fed.adam_eps": ("float", 1e-8),
    "fed.batch_size": ("int", 16),
    "fed.seed": ("int", 0),
    "model.in_channels": ("int", 1),
    "model.out_channels": ("int", 1),
    "model.depth": ("int", 3),
    "model.base_channels": ("int", 16),
    "model.attention": ("bool", True),
    "model.init_seed": ("int", -1),
    "data.source": ("str", "synthetic"),
    "data.dir": ("str", ""),
    "data.image_size": ("int", 64),
    "partition.scale": ("float", 1.0),
    "partition.seed": ("int", -1),
    "partition.clients": ("str", _DEFAULT_CLIENTS),
    "partition.server": ("str", _DEFAULT_SERVER),
    "augment.enabled": ("bool", True),
    "augment.flip_h": ("float", 0.5),
    "augment.flip_v": ("float", 0.5),
    "augment.rotate_deg": ("float", 25.0),
    "augment.translate_frac": ("float", 0.1),
    "augment.scale_min": ("float", 0.9),
    "augment.scale_max": ("float", 1.1),
    "augment.contrast_min": ("float", 0.8),
    "augment.contrast_max": ("float", 1.2),
    "augment.brightness_delta": ("float", 0.1),
    "run.out_dir": ("str", "out"),
    "run.sequential": ("bool", True),
}


def _convert(key: str, value) -> object:
    kind = SCHEMA[key][0]
    if isinstance(value, str):
        text = value.strip()
        try:
            if kind == "int":
                return int(text)
            if kind == "float":
                return float(text)
            if kind == "bool":
                return _parse_bool(text)
            return text
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None
    if kind == "int" and isinstance(value, bool):
        raise ConfigError(f"{key}: expected int, got bool")
    if kind == "int" and isinstance(value, int):
        return value
    if kind == "float" and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind == "bool" and isinstance(value, bool):
        return value
    raise ConfigError(f"{key}: expected {kind}, got {type(value).__name__}")


def default_config() -> dict[str, object]:
    return {key: default for key, (_, default) in SCHEMA.items()}


def merge_config(base: dict[str, object], updates: dict[str, object]) -> dict[str, object]:
    """Type-check updates against the schema; unknown keys are rejected."""
    merged = dict(base)
    for key, value in updates.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = _convert(key, value)
    return merged


def load_config_file(path) -> dict[str, object]:
    """Parse a flat dotted-key file on top of the defaults."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    updates: dict[str, object] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        updates[key.strip()] = value.strip()
    return merge_config(default_config(), updates)


def _parse_client_epochs(text: str) -> dict[int, int]:
    text = text.strip()
    if not text:
        return {}
    try:
        return {i: int(part) for i, part in enumerate(text.split(","))}
    except ValueError:
        raise ConfigError(f"fed.client_epochs: cannot parse {text!r}") from None


@dataclass(frozen=True)
class RunSettings:
    """Fully resolved, validated configuration for one simulation run."""

    fed: FedConfig
    model: ModelConfig
    plan: PartitionPlan
    augmentation: AugmentationConfig
    data_source: str
    data_dir: str
    image_size: int
    out_dir: str
    sequential: bool
    raw: dict[str, object]


def resolve(config: dict[str, object]) -> RunSettings:
    """Turn a flat config map into validated module configs."""
    cfg = merge_config(default_config(), config)

    fed = FedConfig(
        rounds=cfg["fed.rounds"],
        local_epochs=cfg["fed.local_epochs"],
        mu=cfg["fed.mu"],
        weight_decay=cfg["fed.weight_decay"],
        adam_lr=cfg["fed.adam_lr"],
        adam_beta1=cfg["fed.adam_beta1"],
        adam_beta2=cfg["fed.adam_beta2"],
        adam_eps=cfg["fed.adam_eps"],
        batch_size=cfg["fed.batch_size"],
        seed=cfg["fed.seed"],
        client_epochs=_parse_client_epochs(cfg["fed.client_epochs"]),
    )
    fed.validate()

    init_seed = cfg["model.init_seed"]
    model = ModelConfig(
        in_channels=cfg["model.in_channels"],
        out_channels=cfg["model.out_channels"],
        depth=cfg["model.depth"],
        base_channels=cfg["model.base_channels"],
        attention_enabled=cfg["model.attention"],
        init_seed=fed.seed if init_seed == -1 else init_seed,
    )
    model.validate()

    clients = tuple(parse_composition(part)
                    for part in cfg["partition.clients"].split("|"))
    plan = PartitionPlan(
        clients=clients,
        server_test=parse_composition(cfg["partition.server"]),
        scale=cfg["partition.scale"],
        seed=fed.seed if cfg["partition.seed"] == -1 else cfg["partition.seed"],
    )
    plan.validate()

    augmentation = AugmentationConfig(
        enabled=cfg["augment.enabled"],
        flip_h=cfg["augment.flip_h"],
        flip_v=cfg["augment.flip_v"],
        rotate_deg=cfg["augment.rotate_deg"],
        translate_frac=cfg["augment.translate_frac"],
        scale_range=(cfg["augment.scale_min"], cfg["augment.scale_max"]),
        contrast_range=(cfg["augment.contrast_min"], cfg["augment.contrast_max"]),
        brightness_delta=cfg["augment.brightness_delta"],
    )

    source = cfg["data.source"]
    if source not in ("synthetic", "directory"):
        raise ConfigError(f"data.source must be 'synthetic' or 'directory', got {source!r}")
    if source == "directory" and not cfg["data.dir"]:
        raise ConfigError("data.dir is required when data.source = directory")
    image_size = cfg["data.image_size"]
    if image_size < 1:
        raise ConfigError(f"data.image_size must be positive, got {image_size}")
    factor = 1 << model.depth
    if image_size % factor:
        raise ConfigError(
            f"data.image_size {image_size} must be divisible by 2^depth = {factor}")

    return RunSettings(
        fed=fed,
        model=model,
        plan=plan,
        augmentation=augmentation,
        data_source=source,
        data_dir=cfg["data.dir"],
        image_size=image_size,
        out_dir=cfg["run.out_dir"],
        sequential=cfg["run.sequential"],
        raw=cfg,
    )


MANIFEST_FORMAT = "fedseg-manifest"


def write_manifest(path, config: dict[str, object],
                   artifacts: dict[str, object]) -> None:
    payload = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "seed": config["fed.seed"],
        "config": config,
        "artifacts": artifacts,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_manifest(path) -> dict[str, object]:
    """Recover the resolved config snapshot from a manifest file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest {path} does not exist")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from None
    if payload.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"{path} is not a run manifest")
    return merge_config(default_config(), payload.get("config", {}))
