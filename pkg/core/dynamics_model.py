"""
Observation-space dynamics model
Encodes observations, rolls the learned one-step map forward and decodes predictions
"""
import logging
from typing import List, Sequence

import numpy as np

from core import diffcore as dc
from core.config.systems import SystemConfig
from core.constants import DEFAULT_HIDDEN, VARIANT_SV
from core.diffcore import Tensor
from core.exceptions import ConfigError, ShapeError
from core.integrators import ConfigState, State, StepSpec, SvState, rollout
from core.nets import ModelParams

logger = logging.getLogger(__name__)


class DynamicsModel:
    """
    A learned dynamics model acting on observations

    Velocity-carrying variants start from one observation; the position-only two-step variant starts
    from a pair of consecutive position observations and predicts positions only.
    """

    def __init__(self, params: ModelParams):
        self.params = params
        self.system: SystemConfig = params.system
        self.variant = params.variant
        self.spec = StepSpec(h=self.system.h, variant=self.variant)

    @classmethod
    def build(cls, variant: str, system: SystemConfig, hidden: Sequence[int] = DEFAULT_HIDDEN,
              seed: int = 0) -> "DynamicsModel":
        return cls(ModelParams.build(variant, system, hidden, seed))

    @property
    def position_only(self) -> bool:
        return self.variant == VARIANT_SV

    @property
    def target_dim(self) -> int:
        return self.system.position_channels if self.position_only else self.system.obs_dim

    @property
    def parameter_count(self) -> int:
        return self.params.parameter_count

    def parameters(self) -> List[Tensor]:
        return self.params.parameters()

    def with_damping_scale(self, alpha: float) -> "DynamicsModel":
        return DynamicsModel(self.params.with_damping_scale(alpha))

    def without_control(self) -> "DynamicsModel":
        return DynamicsModel(self.params.without_control())

    def initial_state(self, initial: np.ndarray) -> State:
        """
        Encode the starting point of a rollout

        Args:
            initial: (B, obs_dim) observations, or (B, 2, position_channels) position pairs
                     (y_{k-1}, y_k) for the two-step variant

        Returns:
            ConfigState or SvState with a leading batch axis
        """
        initial = np.asarray(initial, dtype=np.float64)
        codec = self.params.codec
        if self.position_only:
            p = self.system.position_channels
            if initial.ndim != 3 or initial.shape[1:] != (2, p):
                raise ShapeError(f"two-step rollouts start from (B, 2, {p}) position pairs, got {initial.shape}",
                                 primitive="initial_state", shapes=[initial.shape])
            q_prev = codec.encode_positions(dc.constant(initial[:, 0, :]))
            q = codec.encode_positions(dc.constant(initial[:, 1, :]))
            return SvState(q_prev, q)
        if initial.ndim != 2 or initial.shape[1] != self.system.obs_dim:
            raise ShapeError(f"rollouts start from (B, {self.system.obs_dim}) observations, got {initial.shape}",
                             primitive="initial_state", shapes=[initial.shape])
        return self.params.encode(dc.constant(initial))

    def observe_state(self, state: State) -> Tensor:
        if isinstance(state, SvState):
            return self.params.codec.decode_positions(state.q)
        return self.params.decode(state)

    def rollout(self, initial: np.ndarray, controls: np.ndarray) -> List[Tensor]:
        """Decoded predictions y_1..y_T; records on the active tape when there is one"""
        controls = np.asarray(controls, dtype=np.float64)
        if controls.ndim != 3 or controls.shape[-1] != self.system.control_dim:
            raise ShapeError(f"controls must be (B, T, {self.system.control_dim}), got {controls.shape}",
                             primitive="rollout", shapes=[controls.shape])
        x0 = self.initial_state(initial)
        us = [dc.constant(controls[:, k, :]) for k in range(controls.shape[1])]
        states = rollout(x0, us, self.spec, self.params)
        return [self.observe_state(s) for s in states]

    def predict(self, initial: np.ndarray, controls: np.ndarray) -> np.ndarray:
        """Tape-free rollout; returns (B, T, target_dim)"""
        if dc.active_tape() is not None:
            logger.debug("predict called with an active tape; the rollout will be recorded")
        return np.stack([y.data for y in self.rollout(initial, controls)], axis=1)

    def rollout_observations(self, obs0: np.ndarray, controls: np.ndarray) -> np.ndarray:
        """
        Planning rollout of M control sequences from one observation

        Args:
            obs0: (obs_dim,) current observation
            controls: (M, H, control_dim) candidate sequences

        Returns:
            (M, H, obs_dim) decoded predictions
        """
        if self.position_only:
            raise ConfigError("sv-fvin predicts positions only and cannot drive the planner", field="variant")
        controls = np.asarray(controls, dtype=np.float64)
        initial = np.broadcast_to(np.asarray(obs0, dtype=np.float64), (controls.shape[0], self.system.obs_dim))
        return self.predict(initial, controls)

    def latent_state(self, obs: np.ndarray) -> ConfigState:
        """Encoded configuration of a batch of observations, tape-free"""
        return self.initial_state(np.atleast_2d(obs))
