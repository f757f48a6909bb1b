"""
Mechanical system configuration: physical constants, observation layouts, control boxes,
initial-condition ranges and MPC cost weights
"""
import math
from typing import Any, Dict, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from core.constants import SYSTEM_CARTPOLE, SYSTEM_PENDULUM, SYSTEM_QQS2
from core.exceptions import ConfigError


class PendulumParams(BaseModel):
    """Damped pendulum constants; negative mu models energy injection for damping sweeps"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    m: float = 1.0
    l: float = 1.0
    g: float = 9.81
    mu: float = 0.2
    torque_bound: float = 2.0

    @field_validator("m", "l", "torque_bound")
    @classmethod
    def _positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be positive")
        return value


class CartpoleParams(BaseModel):
    """Damped cartpole constants (theta = 0 is upright)"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    m_c: float = 1.0
    m_p: float = 0.1
    l: float = 1.0
    mu_c: float = 0.1
    mu_p: float = 0.05
    g: float = 9.81
    force_bound: float = 10.0

    @model_validator(mode="after")
    def _physical(self) -> "CartpoleParams":
        if self.m_c <= 0 or self.m_p <= 0 or self.l <= 0:
            raise ValueError("masses and length must be positive")
        if self.force_bound <= 0:
            raise ValueError("force bound must be positive")
        return self


class SystemConfig(BaseModel):
    """Everything the simulators, codecs and planner need to know about one system"""
    model_config = ConfigDict(frozen=True)

    name: str
    h: float
    observation: str
    channels: Tuple[str, ...]
    position_channels: int
    state_names: Tuple[str, ...]
    config_dim: int
    control_dim: int
    control_low: Tuple[float, ...]
    control_high: Tuple[float, ...]
    initial_ranges: Dict[str, Tuple[float, float]]
    cost_weights: Dict[str, float]
    control_cost: float
    pole_angle: str
    pole_rate: str
    # pole angle the controller drives toward, in simulator coordinates
    goal_angle: float = 0.0
    params: Optional[Union[PendulumParams, CartpoleParams]] = None

    @property
    def obs_dim(self) -> int:
        return len(self.channels)

    @property
    def simulated(self) -> bool:
        return self.params is not None

    @property
    def identity_codec(self) -> bool:
        """Observations already are configurations"""
        return self.observation == "state"

    @property
    def control_range(self) -> Tuple[float, ...]:
        return tuple(hi - lo for lo, hi in zip(self.control_low, self.control_high))


class SystemRegistry:
    """Registry of supported systems and their default configuration"""

    PENDULUM_RANGES = {
        "theta": (-math.pi, math.pi),
        "theta_dot": (-1.0, 1.0),
    }

    CARTPOLE_RANGES = {
        "x": (-0.5, 0.5),
        "theta": (math.pi - 0.5, math.pi + 0.5),
        "x_dot": (-0.5, 0.5),
        "theta_dot": (-0.5, 0.5),
    }

    COSTS = {
        SYSTEM_PENDULUM: ({"theta": 1.0, "theta_dot": 0.01}, 0.001),
        SYSTEM_CARTPOLE: ({"theta": 5.0, "x": 1.0, "x_dot": 0.1, "theta_dot": 0.1}, 0.01),
        SYSTEM_QQS2: ({}, 0.0),
    }

    @classmethod
    def get(cls, name: str, observation: str = "trig", overrides: Optional[Dict[str, Any]] = None,
            initial_ranges: Optional[Dict[str, Tuple[float, float]]] = None,
            h: Optional[float] = None) -> SystemConfig:
        """
        Build the configuration of a named system

        Args:
            name: pendulum | cartpole | qqs2-offline
            observation: trig (angles as cos/sin) or state (raw configuration)
            overrides: physical constant overrides, e.g. {"mu": 0.0}
            initial_ranges: per-state-variable sampling ranges replacing the defaults
            h: step override

        Returns:
            Frozen SystemConfig
        """
        if observation not in ("trig", "state"):
            raise ConfigError(f"unknown observation mode '{observation}'", field="observation")
        overrides = overrides or {}

        try:
            if name == SYSTEM_PENDULUM:
                config = cls._pendulum(observation, PendulumParams(**overrides))
            elif name == SYSTEM_CARTPOLE:
                config = cls._cartpole(observation, CartpoleParams(**overrides))
            elif name == SYSTEM_QQS2:
                if observation != "trig":
                    raise ConfigError("qqs2-offline data is only available as trig observations",
                                      field="observation")
                if overrides:
                    raise ConfigError("qqs2-offline has no simulator parameters", field="system_params")
                config = cls._qqs2()
            else:
                raise ConfigError(f"unknown system '{name}'", field="system")
        except ValueError as e:
            raise ConfigError(f"invalid {name} parameters: {e}", field="system_params") from e

        updates: Dict[str, Any] = {}
        if initial_ranges:
            unknown = set(initial_ranges) - set(config.state_names)
            if unknown:
                raise ConfigError(f"initial ranges for unknown state variables {sorted(unknown)}",
                                  field="initial_ranges")
            updates["initial_ranges"] = {**config.initial_ranges,
                                         **{k: tuple(v) for k, v in initial_ranges.items()}}
        if h is not None:
            if h <= 0:
                raise ConfigError("step h must be positive", field="h")
            updates["h"] = h
        return config.model_copy(update=updates) if updates else config

    @classmethod
    def _pendulum(cls, observation: str, params: PendulumParams) -> SystemConfig:
        channels = ("cos_theta", "sin_theta", "theta_dot") if observation == "trig" else ("theta", "theta_dot")
        weights, control_cost = cls.COSTS[SYSTEM_PENDULUM]
        return SystemConfig(
            name=SYSTEM_PENDULUM,
            h=0.1,
            observation=observation,
            channels=channels,
            position_channels=len(channels) - 1,
            state_names=("theta", "theta_dot"),
            config_dim=1,
            control_dim=1,
            control_low=(-params.torque_bound,),
            control_high=(params.torque_bound,),
            initial_ranges=dict(cls.PENDULUM_RANGES),
            cost_weights=weights,
            control_cost=control_cost,
            pole_angle="theta",
            pole_rate="theta_dot",
            goal_angle=math.pi,
            params=params,
        )

    @classmethod
    def _cartpole(cls, observation: str, params: CartpoleParams) -> SystemConfig:
        if observation == "trig":
            channels = ("x", "cos_theta", "sin_theta", "x_dot", "theta_dot")
        else:
            channels = ("x", "theta", "x_dot", "theta_dot")
        weights, control_cost = cls.COSTS[SYSTEM_CARTPOLE]
        return SystemConfig(
            name=SYSTEM_CARTPOLE,
            h=0.1,
            observation=observation,
            channels=channels,
            position_channels=len(channels) - 2,
            state_names=("x", "theta", "x_dot", "theta_dot"),
            config_dim=2,
            control_dim=1,
            control_low=(-params.force_bound,),
            control_high=(params.force_bound,),
            initial_ranges=dict(cls.CARTPOLE_RANGES),
            cost_weights=weights,
            control_cost=control_cost,
            pole_angle="theta",
            pole_rate="theta_dot",
            params=params,
        )

    @classmethod
    def _qqs2(cls) -> SystemConfig:
        weights, control_cost = cls.COSTS[SYSTEM_QQS2]
        return SystemConfig(
            name=SYSTEM_QQS2,
            h=0.04,
            observation="trig",
            channels=("cos_theta1", "sin_theta1", "theta2", "theta1_dot", "theta2_dot"),
            position_channels=3,
            state_names=("theta1", "theta2", "theta1_dot", "theta2_dot"),
            config_dim=2,
            control_dim=1,
            control_low=(-2.0,),
            control_high=(2.0,),
            initial_ranges={},
            cost_weights=weights,
            control_cost=control_cost,
            pole_angle="theta1",
            pole_rate="theta1_dot",
            params=None,
        )
