"""
Explicit one-step maps: Velocity-Verlet and Stormer-Verlet forced variational integrators,
the residual baseline, and multi-step open-loop rollout
"""
import logging
from dataclasses import dataclass
from typing import List, Protocol, Sequence, Union

import numpy as np

from core import diffcore as dc
from core.config.systems import PendulumParams
from core.constants import VARIANT_RESNN, VARIANT_SV, VARIANT_VV, VARIANTS
from core.diffcore import Tensor
from core.exceptions import ConfigError, NonFiniteError, RolloutError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class ConfigState:
    """Configuration position and velocity (q, q_dot); leading axis is the batch"""
    q: Tensor
    qdot: Tensor

    def vector(self) -> Tensor:
        return dc.concat([self.q, self.qdot])


@dataclass
class SvState:
    """Two consecutive positions (q_prev, q) carried by the Stormer-Verlet map"""
    q_prev: Tensor
    q: Tensor


State = Union[ConfigState, SvState]


@dataclass(frozen=True)
class StepSpec:
    h: float = 0.1
    variant: str = VARIANT_VV

    def __post_init__(self):
        if self.h <= 0:
            raise ConfigError("time step h must be positive", field="h")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}'", field="variant")


class ForceModel(Protocol):
    """Anything that supplies the integrator terms, learned or analytic"""

    def potential_grad(self, q: Tensor) -> Tensor: ...

    def control_force(self, q: Tensor, u: Tensor) -> Tensor: ...

    def damping_force_vv(self, q: Tensor, qdot: Tensor) -> Tensor: ...

    def damping_force_sv(self, q_prev: Tensor, q: Tensor) -> Tensor: ...


class ResidualModel(Protocol):

    def residual_state(self, x: Tensor) -> Tensor: ...

    def residual_control(self, x: Tensor, u: Tensor) -> Tensor: ...


def vv_step(x: ConfigState, u: Tensor, heads: ForceModel, h: float) -> ConfigState:
    """
    Velocity-Verlet forced variational step

    q'    = q + h q_dot + h^2/2 (F - V(q))
    q_dot' = q_dot + h (F - (V(q) + V(q')) / 2)

    F = control_force(q, u) + damping_force_vv(q, q_dot) is held over the step; V is the
    potential-gradient head, evaluated at the already-predicted q' so the map stays explicit.
    """
    forcing = heads.control_force(x.q, u) + heads.damping_force_vv(x.q, x.qdot)
    grad_now = heads.potential_grad(x.q)
    q_next = x.q + h * x.qdot + (0.5 * h * h) * (forcing - grad_now)
    grad_next = heads.potential_grad(q_next)
    qdot_next = x.qdot + h * (forcing - 0.5 * (grad_now + grad_next))
    return ConfigState(q_next, qdot_next)


def sv_step(x: SvState, u: Tensor, heads: ForceModel, h: float) -> SvState:
    """
    Stormer-Verlet forced variational step on positions only

    q_next = 2 q - q_prev + h^2 (F(q_prev, q, u) - V(q))
    """
    forcing = heads.control_force(x.q, u) + heads.damping_force_sv(x.q_prev, x.q)
    q_next = 2.0 * x.q - x.q_prev + (h * h) * (forcing - heads.potential_grad(x.q))
    return SvState(x.q, q_next)


def resnn_step(x: ConfigState, u: Tensor, heads: ResidualModel, h: float) -> ConfigState:
    """Residual baseline: x' = x + g1(q, q_dot) + g2(q, q_dot, u); h is unused"""
    vector = x.vector()
    nxt = vector + heads.residual_state(vector) + heads.residual_control(vector, u)
    n = x.q.shape[-1]
    return ConfigState(dc.columns(nxt, 0, n), dc.columns(nxt, n, 2 * n))


def euler_step(x: ConfigState, u: Tensor, heads: ForceModel, h: float) -> ConfigState:
    """Explicit Euler on the same force terms; reference for energy-drift comparisons"""
    accel = heads.control_force(x.q, u) + heads.damping_force_vv(x.q, x.qdot) - heads.potential_grad(x.q)
    return ConfigState(x.q + h * x.qdot, x.qdot + h * accel)


STEP_FUNCTIONS = {
    VARIANT_VV: vv_step,
    VARIANT_SV: sv_step,
    VARIANT_RESNN: resnn_step,
}


def sv_initial_state(q0: Tensor, qdot0: Tensor, h: float) -> SvState:
    """Seed the two-step map from (q0, q_dot0) with q_{-1} := q0 - h q_dot0"""
    return SvState(q0 - h * qdot0, q0)


def rollout(x0: State, controls: Sequence[Tensor], spec: StepSpec, heads) -> List[State]:
    """
    Iterate the one-step map of spec.variant over a control sequence

    Runs on the active tape when there is one (differentiable end to end) and tape-free otherwise.

    Returns:
        States x_1..x_T
    """
    if len(controls) < 1:
        raise RolloutError("rollout needs at least one control", step=0)
    step = STEP_FUNCTIONS[spec.variant]
    states: List[State] = []
    state = x0
    for k, u in enumerate(controls):
        try:
            state = step(state, u, heads, spec.h)
        except NonFiniteError as e:
            raise RolloutError(f"non-finite state at step {k}: {e.message}", step=k,
                               details={"primitive": e.primitive}) from e
        except ShapeError as e:
            raise RolloutError(f"shape mismatch at step {k}: {e.message}", step=k,
                               details=e.details) from e
        states.append(state)
    return states


class AnalyticPendulumForces:
    """
    True pendulum terms in integrator form (mass matrix absorbed)

    potential_grad = (g/l) sin q, damping = -(mu/m) q_dot, control = tau / (m l^2)
    """

    def __init__(self, params: PendulumParams, damping_scale: float = 1.0, control_enabled: bool = True):
        self.params = params
        self.damping_scale = damping_scale
        self.control_enabled = control_enabled

    def potential_grad(self, q: Tensor) -> Tensor:
        return (self.params.g / self.params.l) * dc.sin(q)

    def control_force(self, q: Tensor, u: Tensor) -> Tensor:
        if not self.control_enabled:
            return dc.zeros(q.shape)
        return (1.0 / (self.params.m * self.params.l ** 2)) * u

    def damping_force_vv(self, q: Tensor, qdot: Tensor) -> Tensor:
        return (-self.damping_scale * self.params.mu / self.params.m) * qdot

    def damping_force_sv(self, q_prev: Tensor, q: Tensor) -> Tensor:
        # backward-difference velocity, the SV counterpart of q_dot
        return (-self.damping_scale * self.params.mu / self.params.m) * (q - q_prev)


class ConstantGradient:
    """Force model with a constant potential gradient and no forcing"""

    def __init__(self, value: float):
        self.value = value

    def potential_grad(self, q: Tensor) -> Tensor:
        return dc.constant(np.full(q.shape, self.value))

    def control_force(self, q: Tensor, u: Tensor) -> Tensor:
        return dc.zeros(q.shape)

    def damping_force_vv(self, q: Tensor, qdot: Tensor) -> Tensor:
        return dc.zeros(q.shape)

    def damping_force_sv(self, q_prev: Tensor, q: Tensor) -> Tensor:
        return dc.zeros(q.shape)
