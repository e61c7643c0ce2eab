"""DRL class-incremental lab: decoupled anchor supervision and parallel adapter streams."""

import json

from ._core import (
    CheckpointCorruptError,
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    DegenerateInputError,
    DeterminismError,
    DimensionError,
    Error,
    IoError,
    Model,
    NumericError,
    ProtocolError,
    baseline_loss,
    closed_form_param_count,
    das_gradients,
    das_loss,
    das_probabilities,
    gradcheck_sweep,
    inspect_checkpoint,
    kd_loss,
    preset_names,
)
from . import _core


def default_config(**overrides):
    """Default run configuration as a dict; nested keys may be overridden."""
    cfg = json.loads(_core.default_config())
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def apply_preset(config, name):
    return json.loads(_core.apply_preset(json.dumps(config), name))


def run_experiment(config=None, write_artifacts=False):
    """Runs pretraining plus every incremental stage and returns the metrics."""
    if config is None:
        config = default_config()
    return _core.run_experiment(json.dumps(config), write_artifacts)


__all__ = [name for name in dir() if not name.startswith("_")]
