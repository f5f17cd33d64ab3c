"""Shared fixtures for the rule miner test suite."""

from pathlib import Path

import numpy as np
import pytest

TESTS_DIR = Path(__file__).resolve().parent


@pytest.fixture
def fixtures_dir() -> Path:
    return TESTS_DIR / "fixtures"


@pytest.fixture
def toy_config_path() -> Path:
    return TESTS_DIR / "configs" / "toy.yaml"


@pytest.fixture
def toy_config(toy_config_path):
    from rule_miner.config.settings import load_config

    return load_config(str(toy_config_path))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def planted_dataset():
    """Three planted rules over 200 windows of 8 sensors, long enough for spike atoms."""
    from rule_miner.data_io import synth_planted_rules

    return synth_planted_rules(seed=7, k=3, n=200, n_sensors=8, window=30)


@pytest.fixture(scope="session")
def planted_profiles(planted_dataset):
    from rule_miner.rule_engine import fit_feature_stats, profile_windows

    stats = fit_feature_stats(planted_dataset.windows, band_edges=planted_dataset.band_edges)
    return profile_windows(planted_dataset.windows, stats)


@pytest.fixture
def tiny_model_config():
    from rule_miner.config.settings import ModelConfig

    return ModelConfig(d_model=8, d_ff=8, layers=1, d_k=8, m=4, d_r=4, temperature=0.5)


@pytest.fixture
def tiny_inputs():
    """Two short windows over two sensors wrapped as model inputs."""
    from rule_miner.data_io import WindowedSample
    from rule_miner.training import ModelInput

    generator = np.random.default_rng(99)
    inputs = []
    for index in range(2):
        sample = WindowedSample(
            sensors=generator.normal(size=(4, 2)),
            timestamps=np.arange(1.0, 5.0) + 3 * index,
            rul=40.0 + 30.0 * index,
            unit_id=index + 1,
        )
        inputs.append(ModelInput(sample=sample, features=sample.features, rul_target=sample.rul / 125.0))
    return inputs


@pytest.fixture
def restore_root_logger():
    """Put back the root logger's handlers and level after code that calls setup_logging."""
    import logging

    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield root
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)
