"""Configuration loading for the rule miner."""

from .settings import (
    DataConfig,
    EvalConfig,
    LoggingConfig,
    ModelConfig,
    RuleConfig,
    RunConfig,
    SynthConfig,
    TrainConfig,
    WindowingConfig,
    config_from_dict,
    load_config,
    thread_count,
)

__all__ = [
    "DataConfig",
    "EvalConfig",
    "LoggingConfig",
    "ModelConfig",
    "RuleConfig",
    "RunConfig",
    "SynthConfig",
    "TrainConfig",
    "WindowingConfig",
    "config_from_dict",
    "load_config",
    "thread_count",
]
