"""Run configuration: one JSON document covering the architecture, loss,
optimizer, and stopping rule, validated against a published schema.

Unknown keys are rejected everywhere. The hash of the fully resolved
configuration (defaults applied, named schedules expanded) is embedded in
every output file so results can be traced back to their settings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .loss_metrics import LossConfig
from .model import NORM_MODES, SCHEDULE_NAMES, NetworkConfig
from .train import TrainSettings

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "network": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kernels_per_layer": {"type": "integer", "minimum": 1},
                "dilation_schedule": {
                    "anyOf": [
                        {"type": "string", "enum": list(SCHEDULE_NAMES)},
                        {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                    ]
                },
                "num_dilated_layers": {"type": "integer", "minimum": 1},
                "concat_enabled": {"type": "boolean"},
                "norm_mode": {"type": "string", "enum": list(NORM_MODES)},
                "head_widths": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "num_classes": {"type": "integer", "minimum": 2},
                "dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"alpha": {"type": "number", "minimum": 0}},
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "eps": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "stop": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "patience": {"type": "integer", "minimum": 0},
                "min_relative_improvement": {"type": "number", "minimum": 0},
                "max_epochs": {"type": "integer", "minimum": 1},
            },
        },
    },
}


@dataclass
class RunConfig:
    network: NetworkConfig
    loss: LossConfig
    settings: TrainSettings
    seed: int

    def resolved_dict(self) -> dict:
        return {
            "seed": self.seed,
            "network": self.network.to_dict(),
            "loss": {"alpha": self.loss.alpha},
            "optimizer": {
                "learning_rate": self.settings.learning_rate,
                "beta1": self.settings.beta1,
                "beta2": self.settings.beta2,
                "eps": self.settings.eps_adam,
            },
            "stop": {
                "patience": self.settings.patience,
                "min_relative_improvement": self.settings.min_relative_improvement,
                "max_epochs": self.settings.max_epochs,
            },
        }

    def hash(self) -> str:
        blob = json.dumps(self.resolved_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


def run_config_from_dict(doc: dict) -> RunConfig:
    """Validate a raw document against the schema and apply defaults."""
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "top level"
        raise ConfigError(f"config schema violation at {where}: {exc.message}") from exc

    network = NetworkConfig(**doc.get("network", {}))
    network.validate()
    loss = LossConfig(**doc.get("loss", {}))
    opt = doc.get("optimizer", {})
    stop = doc.get("stop", {})
    seed = int(doc.get("seed", 0))
    settings = TrainSettings(
        learning_rate=opt.get("learning_rate", 1e-4),
        beta1=opt.get("beta1", 0.9),
        beta2=opt.get("beta2", 0.999),
        eps_adam=opt.get("eps", 1e-8),
        patience=stop.get("patience", 50),
        min_relative_improvement=stop.get("min_relative_improvement", 0.005),
        max_epochs=stop.get("max_epochs", 500),
        seed=seed,
    )
    return RunConfig(network=network, loss=loss, settings=settings, seed=seed)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"unparseable config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return run_config_from_dict(doc)
