"""
Ground-truth simulators for the damped pendulum and damped cartpole
ODE right-hand sides, adaptive RK45 stepping, observation maps, energy and trajectory sampling
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from core.config.systems import CartpoleParams, PendulumParams, SystemConfig
from core.constants import (
    CONTROL_POLICY,
    CONTROL_RANDOM,
    CONTROL_RANDOM_THEN_ZERO,
    CONTROL_ZERO,
    SYSTEM_CARTPOLE,
    SYSTEM_PENDULUM,
)
from core.exceptions import ConfigError, SimulationError
from utils.math_utils import MathUtils

logger = logging.getLogger(__name__)

RK45_RTOL = 1e-8
RK45_ATOL = 1e-8

Policy = Callable[[np.ndarray, int], np.ndarray]


@dataclass
class Trajectory:
    """Observations y_0..y_T and the zero-order-held controls u_0..u_{T-1} at fixed step h"""
    h: float
    observations: np.ndarray
    controls: np.ndarray
    states: Optional[np.ndarray] = None
    system: str = ""
    seed: Optional[int] = None

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=np.float64))
        self.controls = np.asarray(self.controls, dtype=np.float64).reshape(len(self.controls), -1)
        if len(self.observations) != len(self.controls) + 1:
            raise ValueError(
                f"trajectory needs one more observation than controls, got "
                f"{len(self.observations)} and {len(self.controls)}"
            )
        if self.h <= 0:
            raise ValueError("trajectory step h must be positive")
        if self.states is not None:
            self.states = np.asarray(self.states, dtype=np.float64)

    @property
    def length(self) -> int:
        """Number of control steps T"""
        return len(self.controls)


# ---------------------------------------------------------------------------
# Equations of motion
# ---------------------------------------------------------------------------

def pendulum_deriv(theta, theta_dot, tau, params: PendulumParams) -> Tuple[np.ndarray, np.ndarray]:
    """Pendulum right-hand side: returns (theta_dot, theta_ddot); torque is clamped to its bound"""
    tau = np.clip(tau, -params.torque_bound, params.torque_bound)
    theta_ddot = (-(params.mu / params.m) * theta_dot
                  - (params.g / params.l) * np.sin(theta)
                  + tau / (params.m * params.l ** 2))
    return theta_dot, theta_ddot


def cartpole_mass_matrix(theta, params: CartpoleParams) -> np.ndarray:
    """Generalized mass matrix, shape (..., 2, 2)"""
    theta = np.asarray(theta, dtype=np.float64)
    coupling = params.m_p * params.l * np.cos(theta)
    matrix = np.empty(theta.shape + (2, 2))
    matrix[..., 0, 0] = params.m_c + params.m_p
    matrix[..., 0, 1] = coupling
    matrix[..., 1, 0] = coupling
    matrix[..., 1, 1] = params.m_p * params.l ** 2
    return matrix


def cartpole_deriv(x, theta, x_dot, theta_dot, force, params: CartpoleParams) -> Tuple[np.ndarray, np.ndarray]:
    """Cartpole accelerations (x_ddot, theta_ddot) from the 2x2 mass-matrix system; force is clamped"""
    force = np.clip(force, -params.force_bound, params.force_bound)
    a = params.m_c + params.m_p
    b = params.m_p * params.l * np.cos(theta)
    d = params.m_p * params.l ** 2
    rhs_x = params.m_p * params.l * theta_dot ** 2 * np.sin(theta) + force - params.mu_c * x_dot
    rhs_theta = params.m_p * params.g * params.l * np.sin(theta) - params.mu_p * theta_dot
    # det = m_p l^2 (m_c + m_p sin^2 theta) > 0
    det = a * d - b * b
    x_ddot = (d * rhs_x - b * rhs_theta) / det
    theta_ddot = (a * rhs_theta - b * rhs_x) / det
    return x_ddot, theta_ddot


def state_derivative(system: SystemConfig, state: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Time derivative of [q, q_dot] for a batch of states (last axis is the state)"""
    state = np.asarray(state, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if system.name == SYSTEM_PENDULUM:
        theta, theta_dot = state[..., 0], state[..., 1]
        _, theta_ddot = pendulum_deriv(theta, theta_dot, u[..., 0], system.params)
        return np.stack([theta_dot, theta_ddot], axis=-1)
    if system.name == SYSTEM_CARTPOLE:
        x, theta, x_dot, theta_dot = (state[..., i] for i in range(4))
        x_ddot, theta_ddot = cartpole_deriv(x, theta, x_dot, theta_dot, u[..., 0], system.params)
        return np.stack([x_dot, theta_dot, x_ddot, theta_ddot], axis=-1)
    raise ConfigError(f"system '{system.name}' has no simulator", field="system")


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

def rk45_integrate(deriv: Callable[[np.ndarray], np.ndarray], state: np.ndarray, h: float,
                   rtol: float = RK45_RTOL, atol: float = RK45_ATOL) -> np.ndarray:
    """Advance exactly h with the adaptive Dormand-Prince 4(5) pair (control held by the caller)"""
    state = np.asarray(state, dtype=np.float64)
    solution = solve_ivp(lambda _t, y: deriv(y), (0.0, h), state, method="RK45", rtol=rtol, atol=atol)
    if not solution.success:
        raise SimulationError(f"RK45 failed: {solution.message}")
    return solution.y[:, -1]


def rk4_integrate(deriv: Callable[[np.ndarray], np.ndarray], state: np.ndarray, h: float,
                  substeps: int = 1) -> np.ndarray:
    """Classic fixed-step RK4 over h split into equal sub-steps; works on batched states"""
    y = np.asarray(state, dtype=np.float64)
    dt = h / substeps
    for _ in range(substeps):
        k1 = deriv(y)
        k2 = deriv(y + 0.5 * dt * k1)
        k3 = deriv(y + 0.5 * dt * k2)
        k4 = deriv(y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


def clamp_control(system: SystemConfig, u) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=np.float64), system.control_low, system.control_high)


def step_system(system: SystemConfig, state: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One zero-order-hold environment step of length system.h"""
    u = clamp_control(system, u)
    return rk45_integrate(lambda y: state_derivative(system, y, u), state, system.h)


# ---------------------------------------------------------------------------
# Observation and energy
# ---------------------------------------------------------------------------

def observe(system: SystemConfig, state: np.ndarray) -> np.ndarray:
    """State-to-observation map (batched over leading axes)"""
    state = np.asarray(state, dtype=np.float64)
    if system.observation == "state":
        return state.copy()
    if system.name == SYSTEM_PENDULUM:
        theta, theta_dot = state[..., 0], state[..., 1]
        return np.stack([np.cos(theta), np.sin(theta), theta_dot], axis=-1)
    if system.name == SYSTEM_CARTPOLE:
        x, theta, x_dot, theta_dot = (state[..., i] for i in range(4))
        return np.stack([x, np.cos(theta), np.sin(theta), x_dot, theta_dot], axis=-1)
    raise ConfigError(f"system '{system.name}' has no observation model", field="system")


def state_from_observation(system: SystemConfig, obs: np.ndarray) -> np.ndarray:
    """Invert the observation map; angles come back through atan2 and lie in (-pi, pi]"""
    obs = np.asarray(obs, dtype=np.float64)
    if system.observation == "state":
        state = obs.copy()
        angle_index = system.state_names.index(system.pole_angle)
        state[..., angle_index] = MathUtils.wrap_angle(state[..., angle_index])
        return state
    if system.name == SYSTEM_PENDULUM:
        return np.stack([np.arctan2(obs[..., 1], obs[..., 0]), obs[..., 2]], axis=-1)
    # cartpole and qqs2 share the (pos, cos, sin, ...) / (cos, sin, pos, ...) layouts
    if system.channels[0].startswith("cos"):
        angle = np.arctan2(obs[..., 1], obs[..., 0])
        return np.stack([angle, obs[..., 2], obs[..., 3], obs[..., 4]], axis=-1)
    angle = np.arctan2(obs[..., 2], obs[..., 1])
    return np.stack([obs[..., 0], angle, obs[..., 3], obs[..., 4]], axis=-1)


def energy(system: SystemConfig, state: np.ndarray, params=None) -> np.ndarray:
    """
    Analytic total mechanical energy

    Pendulum: 1/2 m l^2 theta_dot^2 + m g l (1 - cos theta)
    Cartpole: kinetic energy + m_p g l (cos theta - 1), zero at the upright rest state
    """
    params = params or system.params
    state = np.asarray(state, dtype=np.float64)
    if system.name == SYSTEM_PENDULUM:
        theta, theta_dot = state[..., 0], state[..., 1]
        return (0.5 * params.m * params.l ** 2 * theta_dot ** 2
                + params.m * params.g * params.l * (1.0 - np.cos(theta)))
    if system.name == SYSTEM_CARTPOLE:
        _, theta, x_dot, theta_dot = (state[..., i] for i in range(4))
        kinetic = (0.5 * (params.m_c + params.m_p) * x_dot ** 2
                   + params.m_p * params.l * x_dot * theta_dot * np.cos(theta)
                   + 0.5 * params.m_p * params.l ** 2 * theta_dot ** 2)
        return kinetic + params.m_p * params.g * params.l * (np.cos(theta) - 1.0)
    raise ConfigError(f"system '{system.name}' has no analytic energy", field="system")


# ---------------------------------------------------------------------------
# Data collection
# ---------------------------------------------------------------------------

def sample_initial_state(system: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(*system.initial_ranges[name]) for name in system.state_names])


def simulate(system: SystemConfig, initial_state: np.ndarray, length: int, control_law: str = CONTROL_RANDOM,
             rng: Optional[np.random.Generator] = None, zero_after: Optional[int] = None,
             policy: Optional[Policy] = None, seed: Optional[int] = None) -> Trajectory:
    """
    Roll the simulator forward under a control law

    Args:
        system: simulated system
        initial_state: starting [q, q_dot]
        length: number of control steps
        control_law: random | zero | random_then_zero | policy
        rng: source of random controls
        zero_after: first step with zero control for random_then_zero
        policy: callable (observation, step) -> control for the policy law
        seed: recorded on the trajectory

    Returns:
        Trajectory with ground-truth states attached
    """
    if not system.simulated:
        raise ConfigError(f"system '{system.name}' cannot be simulated", field="system")
    rng = rng or np.random.default_rng(seed)
    low, high = np.array(system.control_low), np.array(system.control_high)

    states = [np.asarray(initial_state, dtype=np.float64)]
    controls = []
    for k in range(length):
        if control_law == CONTROL_RANDOM:
            u = rng.uniform(low, high)
        elif control_law == CONTROL_ZERO:
            u = np.zeros(system.control_dim)
        elif control_law == CONTROL_RANDOM_THEN_ZERO:
            u = rng.uniform(low, high) if zero_after is None or k < zero_after else np.zeros(system.control_dim)
        elif control_law == CONTROL_POLICY:
            if policy is None:
                raise ConfigError("policy control law needs a policy", field="control_law")
            u = clamp_control(system, policy(observe(system, states[-1]), k))
        else:
            raise ConfigError(f"unknown control law '{control_law}'", field="control_law")
        try:
            states.append(step_system(system, states[-1], u))
        except SimulationError as e:
            raise SimulationError(e.message, step=k) from e
        controls.append(u)

    states = np.array(states)
    return Trajectory(
        h=system.h,
        observations=observe(system, states),
        controls=np.array(controls).reshape(length, system.control_dim),
        states=states,
        system=system.name,
        seed=seed,
    )


def sample_trajectories(system: SystemConfig, count: int, length: int = 50, control_law: str = CONTROL_RANDOM,
                        seed: int = 0, zero_after: Optional[int] = None,
                        policy: Optional[Policy] = None) -> List[Trajectory]:
    """Draw `count` trajectories; trajectory i uses its own stream derived from (seed, i)"""
    if count < 1:
        raise ConfigError("trajectory count must be at least 1", field="count")
    if not system.simulated:
        raise ConfigError(f"system '{system.name}' cannot be simulated", field="system")
    trajectories = []
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        initial = sample_initial_state(system, rng)
        trajectories.append(simulate(system, initial, length, control_law, rng=rng,
                                     zero_after=zero_after, policy=policy, seed=seed))
    logger.info(f"Sampled {count} {system.name} trajectories of length {length} ({control_law})")
    return trajectories
