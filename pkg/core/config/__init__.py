"""
Unified configuration for the FVIN toolkit
Process settings, system definitions and experiment files
"""

from core.settings import Settings, get_settings
from .systems import CartpoleParams, PendulumParams, SystemConfig, SystemRegistry
from .experiment import ExperimentConfig, config_hash, load_experiment_config

settings = get_settings()

__all__ = [
    'settings',
    'Settings',
    'SystemConfig',
    'SystemRegistry',
    'PendulumParams',
    'CartpoleParams',
    'ExperimentConfig',
    'load_experiment_config',
    'config_hash',
]
