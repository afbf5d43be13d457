"""
Pytest configuration and fixtures for flow-drl tests

Copyright (c) 2026 flow-drl authors
"""

import os
import tempfile
from pathlib import Path
from typing import Generator

import numpy as np
import pytest

from flow_drl.config import TrainConfig
from flow_drl.flowpolicy import VelocityNetConfig


@pytest.fixture
def temp_dir() -> Generator[Path, None, None]:
    """Provide a temporary directory for run directories and checkpoints."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator so every test is reproducible."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_net() -> VelocityNetConfig:
    """Velocity network small enough for finite differences."""
    return VelocityNetConfig(
        action_dim=2,
        state_dim=3,
        d_model=8,
        heads=2,
        layers=1,
        flow_steps=3,
        time_frequencies=4,
    )


@pytest.fixture
def small_config() -> TrainConfig:
    """Desk-scale bandit run: a few hundred steps with tiny networks."""
    return TrainConfig(
        env="bimodal_bandit",
        steps=200,
        seed=0,
        n_quantiles=8,
        flow_steps=2,
        batch_size=16,
        buffer_capacity=1000,
        warmup_steps=50,
        d_model=8,
        heads=2,
        layers=1,
        time_frequencies=4,
        hidden_dim=16,
        eval_interval=50,
        eval_episodes=3,
    )


@pytest.fixture(autouse=True)
def reset_environment():
    """Reset environment variables before each test."""
    # Store original values
    original_env = os.environ.copy()

    # Clear flow-drl related env vars
    for var in [name for name in os.environ if name.startswith("FLOW_DRL_")]:
        os.environ.pop(var, None)

    yield

    # Restore original environment
    os.environ.clear()
    os.environ.update(original_env)


# Pytest configuration
def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line(
        "markers", "slow: marks tests as slow (deselect with '-m \"not slow\"')"
    )
    config.addinivalue_line(
        "markers", "integration: marks tests that train or run suites end to end"
    )
