"""Checkpoint manager for trained rule mining models."""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from .config.settings import RunConfig, config_from_dict
from .data_io import NormalizationStats
from .exceptions import InputError, ShapeError
from .rule_engine import FeatureStats
from .training import RuleMiningModel


logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.json"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Checkpoint data structure."""
    config: Dict[str, Any]
    fingerprint: str
    d_in: int
    parameters: Dict[str, Dict[str, Any]]
    input_stats: Dict[str, Any]
    feature_stats: Dict[str, Any]
    sensor_stats: Optional[Dict[str, Any]] = None
    decay_rates: List[float] = field(default_factory=list)
    rule_timeline: List[int] = field(default_factory=list)
    training_stats: Dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def run_config(self) -> RunConfig:
        return config_from_dict(self.config)


@dataclass
class RestoredRun:
    """A model and the statistics needed to feed it new windows."""
    model: RuleMiningModel
    config: RunConfig
    input_stats: NormalizationStats
    feature_stats: FeatureStats
    sensor_stats: Optional[NormalizationStats]
    rule_timeline: List[int]


def _encode_parameters(model: RuleMiningModel) -> Dict[str, Dict[str, Any]]:
    return {
        name: {"shape": list(tensor.shape), "data": tensor.data.tolist()}
        for name, tensor in sorted(model.named_parameters().items())
    }


class CheckpointManager:
    """Saves and restores trained runs as a single JSON document."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.stats = {
            "saved": 0,
            "loaded": 0,
        }

        logger.debug(f"CheckpointManager initialized with directory: {self.directory}")

    @property
    def path(self) -> Path:
        return self.directory / CHECKPOINT_FILE

    def build_checkpoint(
        self,
        model: RuleMiningModel,
        config: RunConfig,
        d_in: int,
        input_stats: NormalizationStats,
        feature_stats: FeatureStats,
        sensor_stats: Optional[NormalizationStats] = None,
        rule_timeline: Optional[List[int]] = None,
        training_stats: Optional[Dict[str, Any]] = None,
    ) -> Checkpoint:
        return Checkpoint(
            config=config.to_dict(),
            fingerprint=config.fingerprint(),
            d_in=d_in,
            parameters=_encode_parameters(model),
            input_stats=input_stats.to_dict(),
            feature_stats=feature_stats.to_dict(),
            sensor_stats=None if sensor_stats is None else sensor_stats.to_dict(),
            decay_rates=model.encoder.decay_rates(),
            rule_timeline=list(rule_timeline or []),
            training_stats=dict(training_stats or {}),
        )

    def save(self, checkpoint: Checkpoint) -> Path:
        """Write ``checkpoint.json`` (sorted keys, LF endings) into the directory."""
        os.makedirs(self.directory, exist_ok=True)
        with open(self.path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(asdict(checkpoint), f, indent=2, sort_keys=True)
            f.write("\n")

        self.stats["saved"] += 1
        logger.info(
            f"Checkpoint saved to {self.path} ({len(checkpoint.parameters)} parameter tensors)"
        )
        return self.path

    def load(self, path: Optional[Union[str, Path]] = None) -> Checkpoint:
        """Read a checkpoint file, or ``checkpoint.json`` inside a directory."""
        target = Path(path) if path is not None else self.path
        if target.is_dir():
            target = target / CHECKPOINT_FILE
        with open(target, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise InputError(f"{target} is not a valid checkpoint: {e}") from e

        if not isinstance(data, dict):
            raise InputError(f"{target} is not a checkpoint document")
        version = data.get("format_version")
        if version != FORMAT_VERSION:
            raise InputError(f"unsupported checkpoint format {version!r} in {target}")
        try:
            checkpoint = Checkpoint(**data)
        except TypeError as e:
            raise InputError(f"malformed checkpoint {target}: {e}") from e

        self.stats["loaded"] += 1
        logger.debug(f"Loaded checkpoint {target} (fingerprint {checkpoint.fingerprint[:12]})")
        return checkpoint

    def restore(self, checkpoint: Checkpoint) -> RestoredRun:
        """Rebuild the model from the stored config and copy in the saved parameters."""
        config = checkpoint.run_config
        model = RuleMiningModel.build(config.model, checkpoint.d_in, config.train.seed)
        params = model.named_parameters()

        missing = sorted(set(params) - set(checkpoint.parameters))
        unexpected = sorted(set(checkpoint.parameters) - set(params))
        if missing or unexpected:
            raise ShapeError(
                f"checkpoint parameters do not match the model: "
                f"missing={missing[:3]}, unexpected={unexpected[:3]}"
            )
        for name, tensor in params.items():
            stored = checkpoint.parameters[name]
            values = np.asarray(stored["data"], dtype=np.float64)
            if list(values.shape) != list(tensor.shape) or list(stored["shape"]) != list(tensor.shape):
                raise ShapeError(
                    f"parameter {name}: checkpoint shape {stored['shape']} != model shape {list(tensor.shape)}"
                )
            tensor.data[...] = values

        feature_stats = FeatureStats.from_dict(checkpoint.feature_stats)
        input_stats = NormalizationStats.from_dict(checkpoint.input_stats)
        if input_stats.mean.size != checkpoint.d_in:
            raise ShapeError(f"input stats cover {input_stats.mean.size} features, d_in={checkpoint.d_in}")

        return RestoredRun(
            model=model,
            config=config,
            input_stats=input_stats,
            feature_stats=feature_stats,
            sensor_stats=(None if checkpoint.sensor_stats is None
                          else NormalizationStats.from_dict(checkpoint.sensor_stats)),
            rule_timeline=list(checkpoint.rule_timeline),
        )
