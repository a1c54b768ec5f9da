"""
Flat run configuration shared by the command-line tools.

A run config is one JSON object whose keys are the TrainConfig and
ModelConfig field names plus the run-level keys below. Values resolve as
built-in defaults < config file < command-line flags, and the resolved
config is written next to every run's outputs.
"""

import json
import logging
import os
from dataclasses import dataclass, fields

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

logger = logging.getLogger("acre.run_config")

RUN_KEYS = ("dataset", "cache", "output_dir")


def _field_defaults():
    defaults = {f.name: f.default for f in fields(ModelConfig)}
    defaults.update({f.name: f.default for f in fields(TrainConfig) if f.name != "model"})
    return defaults


FIELD_DEFAULTS = _field_defaults()
KNOWN_KEYS = tuple(FIELD_DEFAULTS) + RUN_KEYS


def _coerce(key, value, default):
    """Convert a file or flag value to the type of the field's default."""
    if value is None:
        return None
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key} expects true or false, got {value!r}")
    if isinstance(default, tuple):
        items = value.split(",") if isinstance(value, str) else value
        return tuple(int(v) for v in items if str(v).strip() != "")
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    """
    Everything a command needs to reproduce a run.

    Attributes:
        train (TrainConfig): hyperparameters with the model config inside
        dataset (str): dataset directory or triple file, if any
        cache (str): triple cache written by `preprocess`, if any
        output_dir (str): where run artifacts go, if fixed by the config
    """

    train: TrainConfig
    dataset: str = None
    cache: str = None
    output_dir: str = None

    @property
    def model(self):
        return self.train.model

    def to_dict(self):
        flat = self.model.to_dict()
        flat.update({k: v for k, v in self.train.to_dict().items() if k != "model"})
        flat.update({k: getattr(self, k) for k in RUN_KEYS})
        return {k: flat[k] for k in KNOWN_KEYS}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")
        logger.info(f"Wrote resolved config: {path}")
        return path


def load_config_file(path):
    """
    Read a run config file.

    Raises:
        ConfigError: if the file is missing, not JSON, or not a JSON object
    """
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            values = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from None
    if not isinstance(values, dict):
        raise ConfigError(f"{path} must hold a JSON object of key/value pairs")
    return values


def _layer(key, file_values, flag_values):
    if key in flag_values:
        return 2
    return 1 if key in file_values else 0


def resolve_run_config(file_values=None, overrides=None):
    """
    Merge defaults, file values and flag overrides into a validated RunConfig.

    When atrous_rates is set at a later layer than num_atrous (a flag over a
    file value, or either over the defaults) the count follows the rates.

    Args:
        file_values (dict, optional): values from a config file
        overrides (dict, optional): values from flags; None entries are ignored

    Returns:
        RunConfig

    Raises:
        ConfigError: listing every unknown key, bad value and violated
            constraint at once
    """
    file_values = dict(file_values or {})
    flag_values = {k: v for k, v in (overrides or {}).items() if v is not None}
    explicit = {**file_values, **flag_values}

    problems = [f"unknown config key '{k}'" for k in explicit if k not in KNOWN_KEYS]
    values = dict(FIELD_DEFAULTS)
    for key, raw in explicit.items():
        if key not in FIELD_DEFAULTS:
            continue
        try:
            values[key] = _coerce(key, raw, FIELD_DEFAULTS[key])
        except (TypeError, ValueError) as e:
            problems.append(f"bad value for {key}: {e}")
    if _layer("atrous_rates", file_values, flag_values) > _layer("num_atrous", file_values, flag_values):
        values["num_atrous"] = len(values["atrous_rates"])

    model_names = {f.name for f in fields(ModelConfig)}
    model = ModelConfig(**{k: v for k, v in values.items() if k in model_names})
    train = TrainConfig(model=model, **{k: v for k, v in values.items() if k not in model_names})
    problems += train.problems()

    run_values = {k: explicit.get(k) for k in RUN_KEYS}
    for key, value in run_values.items():
        if value is not None and not isinstance(value, str):
            problems.append(f"{key} must be a path string, got {value!r}")
    if problems:
        raise ConfigError(problems)
    return RunConfig(train=train, **run_values)
