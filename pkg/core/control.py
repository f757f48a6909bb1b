"""
Cross-entropy-method planning and model-predictive control
Quadratic costs, the CEM planner, closed-loop MPC episodes, initial-condition grids and
the collect-then-refit data loop
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol

import numpy as np

from core.config.systems import SystemConfig
from core.constants import CEM_VARIANCE_FLOOR
from core.dynamics_model import DynamicsModel
from core.exceptions import (
    ConfigError,
    FvinException,
    NonFiniteError,
    PlanningError,
    RolloutError,
    SimulationError,
)
from core.metrics import RUN_METRICS
from core.simulators import (
    Trajectory,
    clamp_control,
    observe,
    rk4_integrate,
    sample_initial_state,
    sample_trajectories,
    state_derivative,
    state_from_observation,
    step_system,
)
from core.training import TrainConfig, Trainer, TrainResult
from utils.math_utils import MathUtils

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Cost
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostSpec:
    """Quadratic stage cost sum_i w_i s_i^2 + w_u |u|^2 over named state variables"""
    weights: Dict[str, float] = field(default_factory=dict)
    control_weight: float = 0.0

    def __post_init__(self):
        if any(w < 0 for w in self.weights.values()) or self.control_weight < 0:
            raise ConfigError("cost weights must be non-negative", field="mpc.cost")

    @classmethod
    def for_system(cls, system: SystemConfig) -> "CostSpec":
        return cls(dict(system.cost_weights), system.control_cost)


def goal_relative(system: SystemConfig, state: np.ndarray) -> np.ndarray:
    """Copy of state with the pole angle measured from the goal angle, wrapped to (-pi, pi]"""
    state = np.array(state, dtype=np.float64)
    index = system.state_names.index(system.pole_angle)
    state[..., index] = MathUtils.wrap_angle(state[..., index] - system.goal_angle)
    return state


def stage_costs(system: SystemConfig, observations: np.ndarray, controls: np.ndarray, spec: CostSpec) -> np.ndarray:
    """Per-step cost; observations (..., H, obs_dim), controls (..., H, m) -> (..., H)"""
    state = goal_relative(system, state_from_observation(system, observations))
    cost = np.zeros(state.shape[:-1])
    for name, weight in spec.weights.items():
        cost = cost + weight * state[..., system.state_names.index(name)] ** 2
    return cost + spec.control_weight * np.sum(np.asarray(controls) ** 2, axis=-1)


def evaluate_cost(system: SystemConfig, observations: np.ndarray, controls: np.ndarray, spec: CostSpec) -> np.ndarray:
    """
    Trajectory cost summed over the horizon

    Angles are recovered from (cos, sin) channels with atan2 and the pole angle is taken relative to
    system.goal_angle before weighting, so the pendulum pays nothing at upright rest.

    Returns:
        Array over leading batch axes (a 0-d array for a single trajectory)
    """
    return np.sum(stage_costs(system, observations, controls, spec), axis=-1)


# ---------------------------------------------------------------------------
# CEM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CemConfig:
    horizon: int = 15
    samples: int = 1000
    elites: int = 10
    iterations: int = 5
    variance_floor: float = CEM_VARIANCE_FLOOR
    warm_start: bool = False
    max_replans: int = 3

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("planning horizon H must be at least 1", field="cem.horizon")
        if self.elites < 1 or self.elites > self.samples:
            raise ConfigError("elite count K must satisfy 1 <= K <= M", field="cem.elites")
        if self.iterations < 1:
            raise ConfigError("CEM needs at least one iteration", field="cem.iterations")
        if self.variance_floor < 0:
            raise ConfigError("variance floor must be non-negative", field="cem.variance_floor")


@dataclass
class CemPlan:
    """Axis-independent Gaussian over an H-step control sequence"""
    mean: np.ndarray
    variance: np.ndarray

    @classmethod
    def prior(cls, horizon: int, control_dim: int) -> "CemPlan":
        return cls(np.zeros((horizon, control_dim)), np.ones((horizon, control_dim)))

    def shifted(self) -> "CemPlan":
        """Drop the executed first step and append a prior step at the tail"""
        mean = np.concatenate([self.mean[1:], np.zeros((1, self.mean.shape[1]))])
        variance = np.concatenate([self.variance[1:], np.ones((1, self.variance.shape[1]))])
        return CemPlan(mean, variance)


class PlanningModel(Protocol):

    def rollout_observations(self, obs0: np.ndarray, controls: np.ndarray) -> np.ndarray: ...


class SimulatorPlanningModel:
    """True dynamics as a planning model: batched fixed-step RK4 over each zero-order-hold interval"""

    def __init__(self, system: SystemConfig, substeps: int = 4):
        if not system.simulated:
            raise ConfigError(f"system '{system.name}' has no simulator to plan with", field="system")
        self.system = system
        self.substeps = substeps

    def rollout_observations(self, obs0: np.ndarray, controls: np.ndarray) -> np.ndarray:
        controls = clamp_control(self.system, controls)
        start = state_from_observation(self.system, obs0)
        state = np.broadcast_to(start, (controls.shape[0], start.shape[-1]))
        predicted = []
        for k in range(controls.shape[1]):
            u = controls[:, k, :]
            state = rk4_integrate(lambda y: state_derivative(self.system, y, u), state, self.system.h, self.substeps)
            predicted.append(observe(self.system, state))
        return np.stack(predicted, axis=1)


class CemPlanner:
    """
    Cross-entropy method over open-loop control sequences

    Each call runs N iterations of: sample M sequences from the plan Gaussian (clamped to the control box),
    roll them through the model, keep the K cheapest and refit the per-step mean and variance.
    """

    def __init__(self, system: SystemConfig, model: PlanningModel, cost: CostSpec, config: CemConfig,
                 rng: Optional[np.random.Generator] = None):
        self.system = system
        self.model = model
        self.cost = cost
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.low = np.array(system.control_low)
        self.high = np.array(system.control_high)
        self.plan_state: Optional[CemPlan] = None
        self.replans = 0
        self.elite_history: List[List[float]] = []

    def reset(self):
        self.plan_state = None
        self.elite_history = []

    def _initial_plan(self) -> CemPlan:
        if self.config.warm_start and self.plan_state is not None:
            return self.plan_state.shifted()
        return CemPlan.prior(self.config.horizon, self.system.control_dim)

    def sample(self, plan: CemPlan) -> np.ndarray:
        noise = self.rng.standard_normal((self.config.samples,) + plan.mean.shape)
        return np.clip(plan.mean + np.sqrt(plan.variance) * noise, self.low, self.high)

    @staticmethod
    def select_elites(costs: np.ndarray, k: int) -> np.ndarray:
        """Indices of the k smallest costs, cheapest first"""
        candidates = np.argpartition(costs, k - 1)[:k]
        return candidates[np.argsort(costs[candidates], kind="stable")]

    @staticmethod
    def refit(elites: np.ndarray, floor: float) -> CemPlan:
        return CemPlan(elites.mean(axis=0), elites.var(axis=0) + floor)

    def score(self, obs0: np.ndarray, sequences: np.ndarray) -> np.ndarray:
        predicted = self.model.rollout_observations(obs0, sequences)
        costs = evaluate_cost(self.system, predicted, sequences, self.cost)
        if not np.any(np.isfinite(costs)):
            raise NonFiniteError("every sampled rollout produced a non-finite cost", primitive="cem")
        return np.where(np.isfinite(costs), costs, np.inf)

    def plan(self, obs0: np.ndarray) -> np.ndarray:
        """
        Optimize from the current observation and return the first control of the final mean

        Raises:
            PlanningError: when model rollouts keep failing after max_replans re-initializations
        """
        started = time.perf_counter()
        plan = self._initial_plan()
        attempts = 0
        while True:
            try:
                elite_costs = []
                for _ in range(self.config.iterations):
                    sequences = self.sample(plan)
                    costs = self.score(obs0, sequences)
                    elite_index = self.select_elites(costs, self.config.elites)
                    elite_costs.append(float(np.mean(costs[elite_index])))
                    plan = self.refit(sequences[elite_index], self.config.variance_floor)
                break
            except (RolloutError, NonFiniteError) as e:
                attempts += 1
                self.replans += 1
                RUN_METRICS['cem_replans'].inc()
                if attempts > self.config.max_replans:
                    raise PlanningError(f"model rollouts failed {attempts} times: {e.message}",
                                        replans=attempts) from e
                logger.warning(f"Model rollout failed during planning ({e.message}); replanning from the prior")
                plan = CemPlan.prior(self.config.horizon, self.system.control_dim)

        self.plan_state = plan
        self.elite_history.append(elite_costs)
        RUN_METRICS['cem_plan_seconds'].observe(time.perf_counter() - started)
        return np.clip(plan.mean[0], self.low, self.high)

    def monotone_fraction(self, tolerance: float = 1e-12) -> float:
        """Share of planning calls whose mean elite cost never rose across iterations"""
        flags = [all(b <= a + tolerance * max(1.0, abs(a)) for a, b in zip(h, h[1:])) for h in self.elite_history]
        return MathUtils.fraction(flags)


# ---------------------------------------------------------------------------
# MPC
# ---------------------------------------------------------------------------

@dataclass
class EpisodeResult:
    trajectory: Trajectory
    total_cost: float
    control_effort: float
    success: bool
    initial_condition: List[float]
    monotone_fraction: float = 1.0
    replans: int = 0

    def summary(self) -> Dict:
        return {
            "total_cost": self.total_cost,
            "control_effort": self.control_effort,
            "success": self.success,
            "initial_condition": self.initial_condition,
        }


def in_success_ball(system: SystemConfig, state: np.ndarray, epsilon: float = 0.1) -> bool:
    """Goal-relative pole angle and pole rate both inside the epsilon ball around zero"""
    relative = goal_relative(system, state)
    angle = relative[system.state_names.index(system.pole_angle)]
    rate = relative[system.state_names.index(system.pole_rate)]
    return bool(np.hypot(angle, rate) <= epsilon)


def run_mpc(system: SystemConfig, planner: CemPlanner, initial_state: np.ndarray, episode_length: int = 100,
            noise_std: float = 0.0, rng: Optional[np.random.Generator] = None,
            epsilon: float = 0.1) -> EpisodeResult:
    """
    Closed-loop episode on the simulator, replanning at every step

    Args:
        system: Environment (ground-truth simulator)
        planner: CEM planner wrapping the model to plan with
        initial_state: Starting [q, q_dot]
        episode_length: Number of control steps
        noise_std: Exploration noise on the applied control (clamped afterwards)
        rng: Noise source
        epsilon: Success-ball radius

    Returns:
        EpisodeResult scored on simulator ground truth
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = planner.cost
    planner.reset()
    replans_before = planner.replans

    states = [np.asarray(initial_state, dtype=np.float64)]
    controls = []
    total_cost = 0.0
    for k in range(episode_length):
        obs = observe(system, states[-1])
        u = planner.plan(obs)
        if noise_std > 0:
            u = u + rng.normal(0.0, noise_std, size=u.shape)
        u = clamp_control(system, u)
        total_cost += float(evaluate_cost(system, obs[None], u[None], spec))
        try:
            states.append(step_system(system, states[-1], u))
        except SimulationError as e:
            raise SimulationError(f"environment step failed: {e.message}", step=k) from e
        controls.append(u)

    states = np.array(states)
    controls = np.array(controls).reshape(episode_length, system.control_dim)
    success = in_success_ball(system, states[-1], epsilon)
    RUN_METRICS['mpc_episodes'].labels(success=str(success).lower()).inc()
    return EpisodeResult(
        trajectory=Trajectory(system.h, observe(system, states), controls, states, system.name),
        total_cost=total_cost,
        control_effort=float(np.sum(controls ** 2)),
        success=success,
        initial_condition=[float(v) for v in initial_state],
        monotone_fraction=planner.monotone_fraction(),
        replans=planner.replans - replans_before,
    )


@dataclass
class GridResult:
    """MPC outcomes over a pole-angle x pole-rate grid of initial conditions"""
    angles: np.ndarray
    rates: np.ndarray
    success: np.ndarray
    total_cost: np.ndarray
    control_effort: np.ndarray
    episodes: List[EpisodeResult] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success))

    @property
    def mean_cost(self) -> float:
        return float(np.mean(self.total_cost))


def grid_initial_states(system: SystemConfig, size: int) -> List[np.ndarray]:
    """size x size pole angle/rate grid over the initial ranges; other state variables sit mid-range"""
    angle_index = system.state_names.index(system.pole_angle)
    rate_index = system.state_names.index(system.pole_rate)
    center = np.array([sum(system.initial_ranges[name]) / 2.0 for name in system.state_names])
    states = []
    for angle in MathUtils.grid(*system.initial_ranges[system.pole_angle], size):
        for rate in MathUtils.grid(*system.initial_ranges[system.pole_rate], size):
            state = center.copy()
            state[angle_index], state[rate_index] = angle, rate
            states.append(state)
    return states


def mpc_grid(system: SystemConfig, planner: CemPlanner, size: int = 10, episode_length: int = 100,
             epsilon: float = 0.1, on_episode: Optional[Callable[[int, EpisodeResult], None]] = None) -> GridResult:
    """Run one noise-free MPC episode per grid cell"""
    states = grid_initial_states(system, size)
    episodes = []
    for index, state in enumerate(states):
        episode = run_mpc(system, planner, state, episode_length, epsilon=epsilon)
        episodes.append(episode)
        if on_episode is not None:
            on_episode(index, episode)
    logger.info(f"MPC grid {size}x{size} on {system.name}: success rate "
                f"{MathUtils.fraction([e.success for e in episodes]):.2f}")
    shape = (size, size)
    return GridResult(
        angles=MathUtils.grid(*system.initial_ranges[system.pole_angle], size),
        rates=MathUtils.grid(*system.initial_ranges[system.pole_rate], size),
        success=np.array([e.success for e in episodes]).reshape(shape),
        total_cost=np.array([e.total_cost for e in episodes]).reshape(shape),
        control_effort=np.array([e.control_effort for e in episodes]).reshape(shape),
        episodes=episodes,
    )


# ---------------------------------------------------------------------------
# Collect and refit
# ---------------------------------------------------------------------------

@dataclass
class CollectionResult:
    model: DynamicsModel
    dataset: List[Trajectory]
    loss_curves: List[List[float]]
    fits: List[TrainResult] = field(default_factory=list)


def train_with_mpc(system: SystemConfig, model: DynamicsModel, train_config: TrainConfig, cem_config: CemConfig,
                   initial_count: int = 5, collect: int = 15, incremental_epochs: int = 1000,
                   trajectory_length: int = 50, noise_fraction: float = 0.1, seed: int = 0,
                   on_iteration: Optional[Callable[[int, CollectionResult], None]] = None) -> CollectionResult:
    """
    Grow a dataset with noisy MPC trajectories from the model being trained

    Start from initial_count random-control trajectories and an initial fit of train_config.epochs; then
    `collect` times: record one CEM-MPC episode with Gaussian exploration noise (noise_fraction of the
    control range), append it and refit for incremental_epochs.

    Returns:
        CollectionResult whose dataset holds initial_count + collect trajectories
    """
    if collect < 0 or initial_count < 1:
        raise ConfigError("need at least one initial trajectory and a non-negative collect count",
                          field="mpc.collect")
    dataset = sample_trajectories(system, initial_count, trajectory_length, seed=seed)
    trainer = Trainer(model, train_config)
    fits = [trainer.fit(dataset)]
    result = CollectionResult(model, dataset, [fits[0].loss_curve], fits)

    cost = CostSpec.for_system(system)
    noise_std = noise_fraction * float(np.max(system.control_range))
    for iteration in range(collect):
        rng = np.random.default_rng([seed, initial_count + iteration])
        planner = CemPlanner(system, model, cost, cem_config, rng)
        try:
            start = sample_initial_state(system, rng)
            episode = run_mpc(system, planner, start, trajectory_length, noise_std=noise_std, rng=rng)
            trajectory = episode.trajectory
            trajectory.seed = seed
            dataset.append(trajectory)
            fit = trainer.fit(dataset, incremental_epochs)
        except FvinException as e:
            e.details["iteration"] = iteration
            logger.error(f"Collection iteration {iteration} failed: {e.message}")
            raise
        fits.append(fit)
        result.loss_curves.append(fit.loss_curve)
        final_loss = fit.loss_curve[-1] if fit.loss_curve else float("nan")
        logger.info(f"Collection iteration {iteration}: dataset size {len(dataset)}, "
                    f"episode cost {episode.total_cost:.3f}, final loss {final_loss:.6g}")
        if on_iteration is not None:
            on_iteration(iteration, result)
    return result
