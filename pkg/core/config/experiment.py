"""
Experiment configuration files
YAML schema for every CLI command with defaults matching the reference training and planning settings
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.config.systems import SystemConfig, SystemRegistry
from core.constants import (
    CEM_VARIANCE_FLOOR,
    CONTROL_RANDOM,
    CONTROL_RANDOM_THEN_ZERO,
    CONTROL_ZERO,
    MODE_FORCED,
    MODE_ZERO_CONTROL,
    SYSTEM_QQS2,
    SYSTEMS,
    VARIANT_SV,
    VARIANT_VV,
    VARIANTS,
)
from core.exceptions import ConfigError
from core.settings import get_settings
from utils.math_utils import MathUtils

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSpec(_Section):
    count: int = Field(5, ge=1)
    length: int = Field(50, ge=2)
    control_law: str = CONTROL_RANDOM
    zero_after: Optional[int] = Field(None, ge=0)
    seed: Optional[int] = None
    # JSON-Lines trajectory file or directory; required for offline systems
    path: Optional[str] = None

    @field_validator("control_law")
    @classmethod
    def _known_law(cls, value: str) -> str:
        if value not in (CONTROL_RANDOM, CONTROL_ZERO, CONTROL_RANDOM_THEN_ZERO):
            raise ValueError(f"unknown control law '{value}'")
        return value


class ModelSpec(_Section):
    hidden: List[int] = Field(default_factory=lambda: [100, 100])
    init_seed: Optional[int] = None

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, value: List[int]) -> List[int]:
        if not value or any(w < 1 for w in value):
            raise ValueError("hidden widths must be positive and non-empty")
        return value


class TrainingSpec(_Section):
    horizon: int = Field(10, ge=1)
    batch_size: int = Field(2048, ge=1)
    learning_rate: float = Field(5e-4, gt=0)
    epochs: int = Field(5000, ge=0)
    incremental_epochs: int = Field(1000, ge=0)
    clip_norm: Optional[float] = Field(None, gt=0)
    log_every: int = Field(100, ge=1)


class CemSpec(_Section):
    horizon: int = Field(15, ge=1)
    samples: int = Field(1000, ge=1)
    elites: int = Field(10, ge=1)
    iterations: int = Field(5, ge=1)
    variance_floor: float = Field(CEM_VARIANCE_FLOOR, ge=0)
    warm_start: bool = False
    max_replans: int = Field(3, ge=0)

    @model_validator(mode="after")
    def _elites_fit(self) -> "CemSpec":
        if self.elites > self.samples:
            raise ValueError("elites must not exceed samples")
        return self


class MpcSpec(_Section):
    episode_length: int = Field(100, ge=1)
    grid_size: int = Field(10, ge=1)
    epsilon: float = Field(0.1, gt=0)
    noise_fraction: float = Field(0.1, ge=0)
    planner: str = "model"
    initial_count: int = Field(5, ge=1)
    collect: int = Field(15, ge=0)
    collect_length: int = Field(50, ge=1)
    # data regimes (trajectory counts) for the success-rate table
    regimes: List[int] = Field(default_factory=list)
    compare_checkpoint: Optional[str] = None

    @field_validator("planner")
    @classmethod
    def _known_planner(cls, value: str) -> str:
        if value not in ("model", "simulator"):
            raise ValueError("planner must be 'model' or 'simulator'")
        return value


class PredictSpec(_Section):
    modes: List[str] = Field(default_factory=lambda: [MODE_FORCED, MODE_ZERO_CONTROL])
    test_length: int = Field(100, ge=2)
    test_seed: Optional[int] = None
    alphas: List[float] = Field(default_factory=lambda: [1.0])
    zero_after: Optional[int] = Field(None, ge=0)
    test_path: Optional[str] = None

    @field_validator("modes")
    @classmethod
    def _known_modes(cls, value: List[str]) -> List[str]:
        unknown = set(value) - {MODE_FORCED, MODE_ZERO_CONTROL}
        if unknown or not value:
            raise ValueError(f"prediction modes must be a non-empty subset of forced/zero-control, got {value}")
        return value


class EnergyAuditSpec(_Section):
    source: str = "analytic"
    integrators: List[str] = Field(default_factory=lambda: ["vv", "euler"])
    h: float = Field(0.05, gt=0)
    steps: int = Field(10000, ge=1)
    initial_state: List[float] = Field(default_factory=lambda: [1.0, 0.0])
    damping_scale: float = 0.0
    simulate_steps: int = Field(200, ge=0)

    @field_validator("source")
    @classmethod
    def _known_source(cls, value: str) -> str:
        if value not in ("analytic", "checkpoint"):
            raise ValueError("source must be 'analytic' or 'checkpoint'")
        return value

    @field_validator("integrators")
    @classmethod
    def _known_integrators(cls, value: List[str]) -> List[str]:
        unknown = set(value) - {"vv", "euler"}
        if unknown:
            raise ValueError(f"unknown integrators {sorted(unknown)}")
        return value


class ExperimentConfig(_Section):
    """Complete, validated description of one experiment"""

    system: str = "pendulum"
    variant: str = VARIANT_VV
    observation: str = "trig"
    seed: int = Field(default_factory=lambda: get_settings().default_seed)
    out_dir: str = Field(default_factory=lambda: str(Path(get_settings().runs_dir) / "default"))
    h: Optional[float] = Field(None, gt=0)
    system_params: Dict[str, float] = Field(default_factory=dict)
    initial_ranges: Dict[str, Tuple[float, float]] = Field(default_factory=dict)
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    training: TrainingSpec = Field(default_factory=TrainingSpec)
    cem: CemSpec = Field(default_factory=CemSpec)
    mpc: MpcSpec = Field(default_factory=MpcSpec)
    predict: PredictSpec = Field(default_factory=PredictSpec)
    energy_audit: EnergyAuditSpec = Field(default_factory=EnergyAuditSpec)

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        if self.system not in SYSTEMS:
            raise ValueError(f"unknown system '{self.system}'")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}'")
        if self.observation not in ("trig", "state"):
            raise ValueError(f"unknown observation mode '{self.observation}'")
        if self.system == SYSTEM_QQS2 and not self.dataset.path:
            raise ValueError("qqs2-offline needs dataset.path")
        for label, path in (("dataset.path", self.dataset.path), ("predict.test_path", self.predict.test_path),
                            ("mpc.compare_checkpoint", self.mpc.compare_checkpoint)):
            if path and not Path(path).exists():
                raise ValueError(f"{label} '{path}' does not exist")
        return self

    @property
    def dataset_seed(self) -> int:
        return self.seed if self.dataset.seed is None else self.dataset.seed

    @property
    def test_seed(self) -> int:
        return self.seed + 1000 if self.predict.test_seed is None else self.predict.test_seed

    @property
    def init_seed(self) -> int:
        return self.seed if self.model.init_seed is None else self.model.init_seed

    @property
    def prediction_only(self) -> bool:
        return self.variant == VARIANT_SV

    def system_config(self, overrides: Optional[Dict[str, float]] = None) -> SystemConfig:
        params = {**self.system_params, **(overrides or {})}
        return SystemRegistry.get(self.system, self.observation, params, self.initial_ranges or None, self.h)

    def train_config(self, epochs: Optional[int] = None):
        from core.training import TrainConfig

        t = self.training
        return TrainConfig(horizon=t.horizon, batch_size=t.batch_size, learning_rate=t.learning_rate,
                           epochs=t.epochs if epochs is None else epochs, seed=self.seed, clip_norm=t.clip_norm,
                           log_every=t.log_every)

    def cem_config(self):
        from core.control import CemConfig

        return CemConfig(**self.cem.model_dump())


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(p) for p in item.get("loc", ())) or "config"
        parts.append(f"{location}: {item.get('msg')}")
    return "; ".join(parts)


def load_experiment_config(path: Optional[str] = None, seed: Optional[int] = None,
                           out: Optional[str] = None) -> ExperimentConfig:
    """
    Read and validate an experiment file, then apply CLI overrides

    Args:
        path: YAML file (None gives all defaults)
        seed: --seed override
        out: --out override

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigError: missing file, YAML syntax error or schema violation
    """
    raw: Dict = {}
    if path is not None:
        try:
            with open(path, "r") as f:
                raw = yaml.safe_load(f) or {}
        except FileNotFoundError as e:
            raise ConfigError(f"config file '{path}' not found", field="config") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config file '{path}' is not valid YAML: {e}", field="config") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config file '{path}' must hold a mapping", field="config")
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out_dir"] = out

    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {_describe(e)}", field="config",
                          details={"errors": [str(item.get("loc")) for item in e.errors()]}) from e
    logger.debug(f"Loaded experiment config for {config.system}/{config.variant} (seed {config.seed})")
    return config


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form; identical configs hash identically"""
    return MathUtils.content_hash(config.model_dump(mode="json"))
