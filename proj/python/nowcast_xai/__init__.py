"""Python access to the nowcasting explanation and calibration toolkit."""

import json

from . import _core
from ._core import (
    ApiService,
    EmptyDataset,
    InvalidInput,
    InvalidParameter,
    InvalidSpec,
    confusions,
    ece,
    fit_temperature,
    modified_scores,
    softmax,
)

__all__ = [
    "ApiService",
    "EmptyDataset",
    "InvalidInput",
    "InvalidParameter",
    "InvalidSpec",
    "canonical_config",
    "confusions",
    "decode_grdf",
    "default_config",
    "ece",
    "fit_temperature",
    "modified_scores",
    "run_id",
    "run_stage",
    "softmax",
]


def default_config():
    return json.loads(_core.default_config())


def canonical_config(config):
    return json.loads(_core.canonical_config(json.dumps(config)))


def run_id(config):
    return _core.run_id(json.dumps(config))


def run_stage(config, root, stage="report"):
    """Runs `stage` and every missing earlier stage; returns the run record."""
    return json.loads(_core.run_stage(json.dumps(config), str(root), stage))


def decode_grdf(data):
    """Returns (header dict, float32 array shaped by the header dims)."""
    header, arr = _core.decode_grdf(data)
    return json.loads(header), arr
