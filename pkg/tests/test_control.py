"""
Tests for costs, the CEM planner, MPC episodes and the collect-then-refit loop
"""
import numpy as np
import pytest

from core.config.systems import SystemRegistry
from core.constants import VARIANT_SV, VARIANT_VV
from core.control import (
    CemConfig,
    CemPlan,
    CemPlanner,
    CostSpec,
    SimulatorPlanningModel,
    evaluate_cost,
    goal_relative,
    grid_initial_states,
    in_success_ball,
    mpc_grid,
    run_mpc,
    train_with_mpc,
)
from core.exceptions import ConfigError, PlanningError, RolloutError
from core.simulators import observe, simulate
from core.training import TrainConfig


class InertModel:
    """Planning model whose prediction is always the starting observation"""

    def rollout_observations(self, obs0, controls):
        return np.broadcast_to(obs0, controls.shape[:2] + (len(obs0),)).copy()


class FailingModel:
    """Planning model whose rollouts fail a fixed number of times"""

    def __init__(self, failures):
        self.failures = failures
        self.calls = 0

    def rollout_observations(self, obs0, controls):
        self.calls += 1
        if self.calls <= self.failures:
            raise RolloutError("rollout failed", step=0)
        return InertModel().rollout_observations(obs0, controls)


def control_only(system):
    return CostSpec({}, control_weight=1.0)


class TestCost:

    def test_pendulum_upright_rest_costs_nothing(self, pendulum):
        obs = np.tile(observe(pendulum, [np.pi, 0.0]), (20, 1))
        cost = evaluate_cost(pendulum, obs, np.zeros((20, 1)), CostSpec.for_system(pendulum))
        assert cost == pytest.approx(0.0, abs=1e-20)

    def test_pendulum_hanging_rest_pays_full_angle(self, pendulum):
        obs = np.tile(observe(pendulum, [0.0, 0.0]), (20, 1))
        cost = evaluate_cost(pendulum, obs, np.zeros((20, 1)), CostSpec.for_system(pendulum))
        assert cost == pytest.approx(20 * np.pi ** 2)

    def test_pendulum_single_step(self, pendulum):
        # one radian past upright
        obs = observe(pendulum, [np.pi + 1.0, 1.0])[None]
        cost = evaluate_cost(pendulum, obs, np.array([[1.0]]), CostSpec.for_system(pendulum))
        assert cost == pytest.approx(1.011)

    def test_pendulum_angle_is_measured_from_upright(self, pendulum):
        obs = observe(pendulum, [1.0, 0.0])[None]
        cost = evaluate_cost(pendulum, obs, np.zeros((1, 1)), CostSpec.for_system(pendulum))
        assert cost == pytest.approx((np.pi - 1.0) ** 2)

    def test_goal_relative_wraps(self, pendulum, cartpole):
        relative = goal_relative(pendulum, np.array([[np.pi - 0.3, 0.5], [-np.pi + 0.3, 0.0]]))
        np.testing.assert_allclose(relative[:, 0], [-0.3, 0.3], atol=1e-12)
        np.testing.assert_array_equal(relative[:, 1], [0.5, 0.0])
        np.testing.assert_allclose(goal_relative(cartpole, np.array([0.0, 0.4, 0.0, 0.0])), [0.0, 0.4, 0.0, 0.0])

    def test_cartpole_single_step(self, cartpole):
        obs = observe(cartpole, [1.0, 1.0, 1.0, 1.0])[None]
        cost = evaluate_cost(cartpole, obs, np.array([[1.0]]), CostSpec.for_system(cartpole))
        assert cost == pytest.approx(6.21)

    def test_cartpole_upright_rest(self, cartpole):
        obs = observe(cartpole, np.zeros(4))[None].repeat(5, axis=0)
        assert evaluate_cost(cartpole, obs, np.zeros((5, 1)), CostSpec.for_system(cartpole)) == 0.0

    def test_batched_costs(self, pendulum, rng):
        obs = observe(pendulum, rng.normal(size=(4, 6, 2)))
        controls = rng.normal(size=(4, 6, 1))
        costs = evaluate_cost(pendulum, obs, controls, CostSpec.for_system(pendulum))
        assert costs.shape == (4,)
        assert costs[2] == pytest.approx(evaluate_cost(pendulum, obs[2], controls[2], CostSpec.for_system(pendulum)))

    def test_negative_weights_rejected(self):
        with pytest.raises(ConfigError):
            CostSpec({"theta": -1.0})


class TestCem:

    def test_elites_are_the_cheapest(self, rng):
        costs = rng.normal(size=500)
        elites = CemPlanner.select_elites(costs, 10)
        np.testing.assert_array_equal(elites, np.argsort(costs, kind="stable")[:10])

    def test_refit_is_exact(self, rng):
        elites = rng.normal(size=(10, 15, 1))
        plan = CemPlanner.refit(elites, 1e-4)
        np.testing.assert_array_equal(plan.mean, elites.mean(axis=0))
        np.testing.assert_array_equal(plan.variance, elites.var(axis=0) + 1e-4)

    def test_samples_respect_bounds(self, pendulum):
        planner = CemPlanner(pendulum, InertModel(), control_only(pendulum), CemConfig(samples=200))
        wide = CemPlan(np.zeros((15, 1)), np.full((15, 1), 100.0))
        samples = planner.sample(wide)
        assert samples.shape == (200, 15, 1)
        assert np.all(np.abs(samples) <= 2.0)

    def test_inert_one_step_problem(self, pendulum):
        config = CemConfig(horizon=1, samples=1000, elites=10, iterations=5)
        planner = CemPlanner(pendulum, InertModel(), control_only(pendulum), config, np.random.default_rng(0))
        u = planner.plan(observe(pendulum, [0.5, 0.0]))
        assert abs(u[0]) < 0.05

    def test_elite_cost_is_mostly_monotone(self, pendulum):
        config = CemConfig(horizon=5, samples=200, elites=10, iterations=5)
        planner = CemPlanner(pendulum, SimulatorPlanningModel(pendulum), CostSpec.for_system(pendulum), config,
                             np.random.default_rng(1))
        for theta in np.linspace(-2.5, 2.5, 10):
            planner.plan(observe(pendulum, [theta, 0.0]))
        assert len(planner.elite_history) == 10
        assert planner.monotone_fraction() >= 0.9

    def test_warm_start_shifts_previous_plan(self, pendulum):
        config = CemConfig(horizon=4, samples=50, elites=5, iterations=1, warm_start=True)
        planner = CemPlanner(pendulum, InertModel(), control_only(pendulum), config)
        planner.plan_state = CemPlan(np.arange(4.0).reshape(4, 1), np.full((4, 1), 0.5))
        plan = planner._initial_plan()
        np.testing.assert_array_equal(plan.mean[:, 0], [1.0, 2.0, 3.0, 0.0])
        np.testing.assert_array_equal(plan.variance[:, 0], [0.5, 0.5, 0.5, 1.0])

    def test_cold_start_uses_prior(self, pendulum):
        planner = CemPlanner(pendulum, InertModel(), control_only(pendulum), CemConfig(horizon=4))
        planner.plan_state = CemPlan(np.ones((4, 1)), np.ones((4, 1)))
        plan = planner._initial_plan()
        np.testing.assert_array_equal(plan.mean, np.zeros((4, 1)))

    def test_replans_after_failed_rollout(self, pendulum):
        model = FailingModel(failures=2)
        planner = CemPlanner(pendulum, model, control_only(pendulum), CemConfig(samples=30, elites=3))
        u = planner.plan(observe(pendulum, [0.0, 0.0]))
        assert planner.replans == 2
        assert np.all(np.abs(u) <= 2.0)

    def test_gives_up_after_max_replans(self, pendulum):
        planner = CemPlanner(pendulum, FailingModel(failures=100), control_only(pendulum),
                             CemConfig(samples=30, elites=3, max_replans=3))
        with pytest.raises(PlanningError) as excinfo:
            planner.plan(observe(pendulum, [0.0, 0.0]))
        assert excinfo.value.replans == 4

    def test_learned_model_plans(self, pendulum, small_model):
        model = small_model(VARIANT_VV, pendulum)
        planner = CemPlanner(pendulum, model, CostSpec.for_system(pendulum),
                             CemConfig(horizon=3, samples=20, elites=4, iterations=2))
        u = planner.plan(observe(pendulum, [1.0, 0.0]))
        assert u.shape == (1,)

    def test_position_only_model_cannot_plan(self, pendulum, small_model):
        model = small_model(VARIANT_SV, pendulum)
        with pytest.raises(ConfigError):
            model.rollout_observations(observe(pendulum, [1.0, 0.0]), np.zeros((4, 3, 1)))

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            CemConfig(samples=5, elites=10)
        with pytest.raises(ConfigError):
            CemConfig(iterations=0)


class TestMpc:

    def test_inert_zero_cost_episode(self, pendulum):
        planner = CemPlanner(pendulum, InertModel(), CostSpec({}, 0.0), CemConfig(horizon=3, samples=20, elites=4))
        episode = run_mpc(pendulum, planner, np.array([0.5, 0.0]), episode_length=5)
        assert episode.trajectory.length == 5
        assert episode.total_cost == 0.0
        assert isinstance(episode.success, bool)

    def test_applied_controls_stay_in_bounds_with_noise(self, pendulum):
        planner = CemPlanner(pendulum, InertModel(), CostSpec.for_system(pendulum),
                             CemConfig(horizon=3, samples=20, elites=4))
        episode = run_mpc(pendulum, planner, np.array([2.0, 0.0]), episode_length=10, noise_std=5.0,
                          rng=np.random.default_rng(0))
        assert np.all(np.abs(episode.trajectory.controls) <= 2.0)
        assert episode.control_effort == pytest.approx(float(np.sum(episode.trajectory.controls ** 2)))

    def test_success_ball(self, pendulum, cartpole):
        assert in_success_ball(pendulum, np.array([3 * np.pi + 0.01, 0.02]), 0.1)
        assert in_success_ball(pendulum, np.array([-np.pi - 0.05, 0.0]), 0.1)
        assert not in_success_ball(pendulum, np.array([0.0, 0.0]), 0.1)
        assert not in_success_ball(pendulum, np.array([np.pi + 0.2, 0.0]), 0.1)
        assert in_success_ball(cartpole, np.array([3.0, 0.05, 1.0, 0.0]), 0.1)

    def test_grid_covers_initial_ranges(self, pendulum, cartpole):
        states = grid_initial_states(pendulum, 3)
        assert len(states) == 9
        assert states[0][0] == pytest.approx(-np.pi)
        cart_states = grid_initial_states(cartpole, 2)
        assert all(s[0] == 0.0 and s[2] == 0.0 for s in cart_states)

    def test_grid_result_shapes(self, pendulum):
        planner = CemPlanner(pendulum, InertModel(), CostSpec.for_system(pendulum),
                             CemConfig(horizon=2, samples=10, elites=2, iterations=1))
        seen = []
        grid = mpc_grid(pendulum, planner, size=2, episode_length=3,
                        on_episode=lambda index, episode: seen.append(index))
        assert grid.success.shape == grid.total_cost.shape == grid.control_effort.shape == (2, 2)
        assert seen == [0, 1, 2, 3]
        assert 0.0 <= grid.success_rate <= 1.0


class TestTrainWithMpc:

    def config(self):
        return (TrainConfig(horizon=3, epochs=2, learning_rate=5e-3, log_every=1),
                CemConfig(horizon=3, samples=20, elites=4, iterations=2))

    def test_dataset_grows_by_one_per_iteration(self, pendulum, small_model):
        train_config, cem_config = self.config()
        result = train_with_mpc(pendulum, small_model(VARIANT_VV, pendulum), train_config, cem_config,
                                initial_count=2, collect=2, incremental_epochs=1, trajectory_length=8)
        assert len(result.dataset) == 4
        assert [len(curve) for curve in result.loss_curves] == [2, 1, 1]
        assert all(t.length == 8 for t in result.dataset)

    def test_no_collection_is_plain_training(self, pendulum, small_model):
        train_config, cem_config = self.config()
        result = train_with_mpc(pendulum, small_model(VARIANT_VV, pendulum), train_config, cem_config,
                                initial_count=2, collect=0, trajectory_length=8)
        assert len(result.dataset) == 2
        assert len(result.fits) == 1

    def test_collected_controls_stay_in_bounds(self, pendulum, small_model):
        train_config, cem_config = self.config()
        result = train_with_mpc(pendulum, small_model(VARIANT_VV, pendulum), train_config, cem_config,
                                initial_count=1, collect=1, incremental_epochs=1, trajectory_length=6,
                                noise_fraction=1.0)
        assert np.all(np.abs(result.dataset[-1].controls) <= 2.0)


def test_simulator_planner_matches_environment(pendulum):
    model = SimulatorPlanningModel(pendulum, substeps=20)
    controls = np.full((1, 5, 1), 0.5)
    predicted = model.rollout_observations(observe(pendulum, [1.0, 0.0]), controls)
    assert predicted.shape == (1, 5, 3)
    reference = simulate(pendulum, np.array([1.0, 0.0]), 5, "policy", policy=lambda obs, k: np.array([0.5]))
    np.testing.assert_allclose(predicted[0], reference.observations[1:], atol=1e-6)


def test_offline_system_has_no_simulator_planner():
    with pytest.raises(ConfigError):
        SimulatorPlanningModel(SystemRegistry.get("qqs2-offline"))
