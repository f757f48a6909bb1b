"""
Tests for the ground-truth simulators, observation maps and energy
"""
import math

import numpy as np
import pytest

from core.config.systems import CartpoleParams, PendulumParams, SystemRegistry
from core.constants import CONTROL_RANDOM_THEN_ZERO, CONTROL_ZERO
from core.exceptions import ConfigError
from core.simulators import (
    Trajectory,
    cartpole_deriv,
    cartpole_mass_matrix,
    energy,
    observe,
    pendulum_deriv,
    rk4_integrate,
    rk45_integrate,
    sample_trajectories,
    simulate,
    state_derivative,
    state_from_observation,
    step_system,
)


class TestPendulum:

    @pytest.mark.parametrize("theta, theta_dot, expected", [
        (0.0, 0.0, 0.0),
        (math.pi / 2, 0.0, -9.81),
        (0.0, 1.0, -0.2),
    ])
    def test_derivative(self, theta, theta_dot, expected):
        velocity, accel = pendulum_deriv(theta, theta_dot, 0.0, PendulumParams())
        assert velocity == theta_dot
        assert accel == pytest.approx(expected, abs=1e-12)

    def test_torque_is_clamped(self):
        _, clamped = pendulum_deriv(0.0, 0.0, 50.0, PendulumParams())
        assert clamped == pytest.approx(2.0)


class TestCartpole:

    def test_mass_matrix_upright(self):
        np.testing.assert_allclose(cartpole_mass_matrix(0.0, CartpoleParams()), [[1.1, 0.1], [0.1, 0.1]])

    def test_mass_matrix_positive_definite(self):
        matrices = cartpole_mass_matrix(np.linspace(-np.pi, np.pi, 1000), CartpoleParams())
        assert np.all(np.linalg.eigvalsh(matrices) > 0)

    def test_rest_is_equilibrium(self):
        x_ddot, theta_ddot = cartpole_deriv(0.0, 0.0, 0.0, 0.0, 0.0, CartpoleParams())
        assert x_ddot == 0.0 and theta_ddot == 0.0

    def test_unit_force_matches_linear_solve(self):
        params = CartpoleParams()
        x_ddot, theta_ddot = cartpole_deriv(0.0, 0.0, 0.0, 0.0, 1.0, params)
        expected = np.linalg.solve(cartpole_mass_matrix(0.0, params), [1.0, 0.0])
        np.testing.assert_allclose([x_ddot, theta_ddot], expected, rtol=1e-12)

    def test_general_state_matches_linear_solve(self, rng):
        params = CartpoleParams()
        x, theta, x_dot, theta_dot, force = rng.normal(size=5)
        accel = cartpole_deriv(x, theta, x_dot, theta_dot, force, params)
        rhs = [params.m_p * params.l * theta_dot ** 2 * np.sin(theta) + force - params.mu_c * x_dot,
               params.m_p * params.g * params.l * np.sin(theta) - params.mu_p * theta_dot]
        np.testing.assert_allclose(accel, np.linalg.solve(cartpole_mass_matrix(theta, params), rhs), rtol=1e-10)


class TestIntegration:

    def test_zero_derivative_keeps_state(self):
        state = np.array([0.3, -1.2])
        np.testing.assert_array_equal(rk45_integrate(lambda y: np.zeros_like(y), state, 0.1), state)

    def test_exponential(self):
        assert rk45_integrate(lambda y: y, np.array([1.0]), 0.1)[0] == pytest.approx(math.exp(0.1), abs=1e-8)

    def test_undamped_pendulum_conserves_energy(self):
        system = SystemRegistry.get("pendulum", overrides={"mu": 0.0})
        traj = simulate(system, np.array([1.0, 0.5]), 100, CONTROL_ZERO)
        e = energy(system, traj.states)
        assert np.max(np.abs(e - e[0])) < 1e-6

    @pytest.mark.parametrize("name, state", [
        ("pendulum", [2.0, 0.5]),
        ("cartpole", [0.1, 3.0, -0.2, 0.4]),
    ])
    def test_rk45_agrees_with_fine_rk4(self, name, state):
        system = SystemRegistry.get(name)
        controls = np.random.default_rng(0).uniform(system.control_low, system.control_high, size=(50, 1))
        coarse = fine = np.array(state)
        worst = 0.0
        for u in controls:
            coarse = step_system(system, coarse, u)
            fine = rk4_integrate(lambda y: state_derivative(system, y, u), fine, system.h, substeps=100)
            worst = max(worst, float(np.max(np.abs(coarse - fine))))
        assert worst < 1e-6

    @pytest.mark.parametrize("name, state", [
        ("pendulum", [2.5, 1.0]),
        ("cartpole", [0.0, 2.8, 0.5, -0.5]),
    ])
    def test_damped_energy_never_increases(self, name, state):
        system = SystemRegistry.get(name)
        traj = simulate(system, np.array(state), 100, CONTROL_ZERO)
        e = energy(system, traj.states)
        assert np.all(np.diff(e) <= 1e-7)
        assert e[-1] < e[0]


class TestObservation:

    def test_pendulum_observations(self, pendulum):
        np.testing.assert_allclose(observe(pendulum, [0.0, 0.0]), [1.0, 0.0, 0.0])
        np.testing.assert_allclose(observe(pendulum, [math.pi / 2, 0.7]), [0.0, 1.0, 0.7], atol=1e-15)

    def test_cartpole_zero_state(self, cartpole):
        np.testing.assert_array_equal(observe(cartpole, np.zeros(4)), [0.0, 1.0, 0.0, 0.0, 0.0])

    def test_state_mode_is_identity(self, pendulum_state):
        np.testing.assert_array_equal(observe(pendulum_state, [0.4, -0.1]), [0.4, -0.1])

    @pytest.mark.parametrize("name", ["pendulum", "cartpole"])
    def test_inverse_observation(self, name, rng):
        system = SystemRegistry.get(name)
        states = rng.uniform(-3.0, 3.0, size=(10, 2 * system.config_dim))
        recovered = state_from_observation(system, observe(system, states))
        np.testing.assert_allclose(recovered, states, atol=1e-12)


class TestEnergy:

    def test_pendulum_rest(self, pendulum):
        assert energy(pendulum, [0.0, 0.0]) == 0.0

    def test_pendulum_inverted(self, pendulum):
        assert energy(pendulum, [math.pi, 0.0]) == pytest.approx(19.62)

    def test_cartpole_upright_rest(self, cartpole):
        assert energy(cartpole, np.zeros(4)) == 0.0


class TestSampling:

    def test_count_and_length(self, pendulum):
        trajectories = sample_trajectories(pendulum, count=5, length=50, seed=0)
        assert len(trajectories) == 5
        assert all(len(t.observations) == 51 and t.length == 50 for t in trajectories)

    def test_controls_respect_bounds(self, cartpole):
        (traj,) = sample_trajectories(cartpole, count=1, length=30, seed=3)
        assert np.all(np.abs(traj.controls) <= 10.0)
        assert traj.controls.shape == (30, 1)

    def test_same_seed_same_dataset(self, pendulum):
        a = sample_trajectories(pendulum, count=2, length=10, seed=11)
        b = sample_trajectories(pendulum, count=2, length=10, seed=11)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.observations, y.observations)
            np.testing.assert_array_equal(x.controls, y.controls)

    def test_trajectories_differ_within_a_dataset(self, pendulum):
        a, b = sample_trajectories(pendulum, count=2, length=10, seed=11)
        assert not np.array_equal(a.observations, b.observations)

    def test_zero_control_law(self, pendulum):
        (traj,) = sample_trajectories(pendulum, count=1, length=20, control_law=CONTROL_ZERO, seed=1)
        assert not traj.controls.any()

    def test_random_then_zero(self, pendulum):
        (traj,) = sample_trajectories(pendulum, count=1, length=20, control_law=CONTROL_RANDOM_THEN_ZERO,
                                      seed=1, zero_after=12)
        assert traj.controls[:12].any()
        assert not traj.controls[12:].any()

    def test_initial_states_inside_ranges(self, pendulum):
        for traj in sample_trajectories(pendulum, count=10, length=1, seed=2):
            theta, theta_dot = traj.states[0]
            assert -math.pi <= theta <= math.pi
            assert -1.0 <= theta_dot <= 1.0

    def test_offline_system_cannot_be_simulated(self):
        system = SystemRegistry.get("qqs2-offline")
        with pytest.raises(ConfigError):
            sample_trajectories(system, count=1)

    def test_empty_count_rejected(self, pendulum):
        with pytest.raises(ConfigError):
            sample_trajectories(pendulum, count=0)


def test_trajectory_shape_invariant():
    with pytest.raises(ValueError):
        Trajectory(0.1, np.zeros((3, 2)), np.zeros((3, 1)))
