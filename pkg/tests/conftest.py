"""
Shared fixtures: seeded generators, small systems and models, throwaway run directories
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.config.experiment import ExperimentConfig  # noqa: E402
from core.config.systems import SystemRegistry  # noqa: E402
from core.dynamics_model import DynamicsModel  # noqa: E402
from core.simulators import sample_trajectories  # noqa: E402

SMALL_HIDDEN = (8, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pendulum():
    return SystemRegistry.get("pendulum")


@pytest.fixture
def pendulum_state():
    return SystemRegistry.get("pendulum", observation="state")


@pytest.fixture
def cartpole():
    return SystemRegistry.get("cartpole")


@pytest.fixture
def small_model():
    """Factory for small dynamics models: small_model(variant, system, seed=0)"""

    def build(variant, system, seed=0):
        return DynamicsModel.build(variant, system, SMALL_HIDDEN, seed)

    return build


@pytest.fixture
def pendulum_dataset(pendulum):
    return sample_trajectories(pendulum, count=2, length=20, seed=7)


@pytest.fixture
def perturb():
    """Give every parameter (zero output layers included) random values: perturb(model, scale, seed)"""

    def apply(model, scale=0.3, seed=0):
        gen = np.random.default_rng(seed)
        for p in model.parameters():
            p.data[...] = gen.normal(0.0, scale, size=p.shape)
        return model

    return apply


@pytest.fixture
def quick_config(tmp_path):
    """Factory for a minutes-scale ExperimentConfig writing into tmp_path"""

    def build(**overrides):
        raw = {
            "system": "pendulum",
            "variant": "vv-fvin",
            "seed": 0,
            "out_dir": str(tmp_path / "run"),
            "dataset": {"count": 2, "length": 15},
            "model": {"hidden": [8, 8]},
            "training": {"horizon": 3, "epochs": 3, "incremental_epochs": 1, "log_every": 1},
            "cem": {"horizon": 3, "samples": 20, "elites": 4, "iterations": 2},
            "mpc": {"episode_length": 3, "grid_size": 1, "initial_count": 1, "collect": 1,
                    "collect_length": 5},
            "predict": {"test_length": 12},
            "energy_audit": {"steps": 50, "simulate_steps": 5},
        }
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(raw.get(key), dict):
                raw[key] = {**raw[key], **value}
            else:
                raw[key] = value
        return ExperimentConfig.model_validate(raw)

    return build
