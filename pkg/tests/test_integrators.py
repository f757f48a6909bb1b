"""
Tests for the one-step maps and rollouts

Zero-force reductions are checked bit-exactly; energy behaviour uses the analytic pendulum terms.
"""
import numpy as np
import pytest

from core import diffcore as dc
from core.config.systems import PendulumParams
from core.constants import VARIANT_RESNN, VARIANT_SV, VARIANT_VV
from core.exceptions import ConfigError, RolloutError
from core.integrators import (
    AnalyticPendulumForces,
    ConfigState,
    ConstantGradient,
    StepSpec,
    SvState,
    euler_step,
    resnn_step,
    rollout,
    sv_initial_state,
    sv_step,
    vv_step,
)
from core.nets import ModelParams
from utils.math_utils import MathUtils

ZERO = ConstantGradient(0.0)
NO_CONTROL = dc.constant([[0.0]])


def config_state(q, qdot):
    return ConfigState(dc.constant([[q]]), dc.constant([[qdot]]))


def pendulum_energy(q, qdot, g=9.81):
    return 0.5 * qdot ** 2 + g * (1.0 - np.cos(q))


class ExplodingGradient(ConstantGradient):
    """Potential gradient that turns infinite after a number of evaluations"""

    def __init__(self, finite_calls):
        super().__init__(0.0)
        self.finite_calls = finite_calls
        self.calls = 0

    def potential_grad(self, q):
        self.calls += 1
        value = 0.0 if self.calls <= self.finite_calls else np.inf
        return dc.constant(np.full(q.shape, value))


class TestVelocityVerlet:

    def test_zero_heads_pure_drift(self):
        nxt = vv_step(config_state(1.0, 2.0), NO_CONTROL, ZERO, 0.1)
        assert nxt.q.data[0, 0] == 1.2
        assert nxt.qdot.data[0, 0] == 2.0

    def test_zero_learned_heads_reduce_exactly(self, pendulum_state):
        heads = ModelParams.build(VARIANT_VV, pendulum_state, (8,), seed=0)
        nxt = vv_step(config_state(1.0, 2.0), dc.constant([[1.5]]), heads, 0.1)
        assert nxt.q.data[0, 0] == 1.0 + 0.1 * 2.0
        assert nxt.qdot.data[0, 0] == 2.0

    def test_constant_gradient(self):
        nxt = vv_step(config_state(0.0, 0.0), NO_CONTROL, ConstantGradient(9.81), 0.1)
        assert nxt.q.data[0, 0] == pytest.approx(-0.04905, abs=1e-15)
        assert nxt.qdot.data[0, 0] == pytest.approx(-0.981, abs=1e-15)

    def test_time_reversal(self):
        heads = AnalyticPendulumForces(PendulumParams(mu=0.0), control_enabled=False)
        start = config_state(0.7, -0.4)
        x = start
        for _ in range(50):
            x = vv_step(x, NO_CONTROL, heads, 0.1)
        back = ConfigState(x.q, -1.0 * x.qdot)
        for _ in range(50):
            back = vv_step(back, NO_CONTROL, heads, 0.1)
        assert abs(back.q.data[0, 0] - 0.7) <= 1e-10
        assert abs(back.qdot.data[0, 0] + (-0.4)) <= 1e-10

    def test_energy_stays_bounded_while_euler_drifts(self):
        heads = AnalyticPendulumForces(PendulumParams(mu=0.0), control_enabled=False)
        vv, euler = config_state(1.0, 0.0), config_state(1.0, 0.0)
        e0 = pendulum_energy(1.0, 0.0)
        vv_energy, euler_energy = [], []
        for _ in range(1000):
            vv = vv_step(vv, NO_CONTROL, heads, 0.05)
            euler = euler_step(euler, NO_CONTROL, heads, 0.05)
            vv_energy.append(pendulum_energy(vv.q.data[0, 0], vv.qdot.data[0, 0]))
            euler_energy.append(pendulum_energy(euler.q.data[0, 0], euler.qdot.data[0, 0]))

        assert np.max(np.abs(np.array(vv_energy) - e0)) / e0 < 0.02
        assert euler_energy[-1] > 1.5 * e0
        times = np.arange(1, 1001) * 0.05
        assert MathUtils.secular_drift(times, np.array(euler_energy)) > 0


class TestStormerVerlet:

    def test_constant_discrete_velocity(self):
        nxt = sv_step(SvState(dc.constant([[0.0]]), dc.constant([[0.1]])), NO_CONTROL, ZERO, 0.1)
        assert nxt.q.data[0, 0] == 0.2
        assert nxt.q_prev.data[0, 0] == 0.1

    def test_rest_stays_at_rest(self):
        q = dc.constant([[0.37]])
        nxt = sv_step(SvState(q, q), NO_CONTROL, ZERO, 0.1)
        assert nxt.q.data[0, 0] == 0.37

    def test_constant_gradient(self):
        nxt = sv_step(SvState(dc.constant([[0.0]]), dc.constant([[0.0]])), NO_CONTROL, ConstantGradient(9.81), 0.1)
        assert nxt.q.data[0, 0] == pytest.approx(-0.0981, abs=1e-15)

    def test_seeded_pair_reproduces_velocity_verlet_drift(self):
        controls = [NO_CONTROL] * 10
        vv_states = rollout(config_state(0.5, 1.0), controls, StepSpec(0.1, VARIANT_VV), ZERO)
        seed = sv_initial_state(dc.constant([[0.5]]), dc.constant([[1.0]]), 0.1)
        sv_states = rollout(seed, controls, StepSpec(0.1, VARIANT_SV), ZERO)
        for a, b in zip(vv_states, sv_states):
            assert a.q.data[0, 0] == pytest.approx(b.q.data[0, 0], abs=1e-12)


class TestResidual:

    def test_zero_heads_are_identity(self, cartpole, rng):
        heads = ModelParams.build(VARIANT_RESNN, cartpole, (8,), seed=0)
        q, qdot = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        nxt = resnn_step(ConfigState(dc.constant(q), dc.constant(qdot)), dc.constant(np.ones((3, 1))), heads, 0.1)
        np.testing.assert_array_equal(nxt.q.data, q)
        np.testing.assert_array_equal(nxt.qdot.data, qdot)
        assert nxt.vector().shape == (3, 4)

    def test_gradient_matches_finite_differences(self, pendulum_state, rng, perturb):
        heads = perturb(ModelParams.build(VARIANT_RESNN, pendulum_state, (6,), seed=0), scale=0.3, seed=2)
        x = ConfigState(dc.constant(rng.normal(size=(4, 1))), dc.constant(rng.normal(size=(4, 1))))
        u = dc.constant(rng.uniform(-2, 2, size=(4, 1)))

        def loss():
            return dc.sum_all(dc.square(resnn_step(x, u, heads, 0.1).vector()))

        params = heads.parameters()
        with dc.Tape() as tape:
            value = loss()
        grads = dc.backward(tape, value, params)
        for param, grad in zip(params, grads):
            numeric = dc.numerical_gradient(loss, param)
            scale = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1e-4)
            assert np.max(np.abs(grad - numeric) / scale) < 1e-5


class TestRollout:

    def test_single_step_equals_step(self):
        states = rollout(config_state(1.0, 2.0), [NO_CONTROL], StepSpec(0.1, VARIANT_VV), ZERO)
        assert len(states) == 1
        assert states[0].q.data[0, 0] == 1.2

    def test_ten_step_drift(self):
        states = rollout(config_state(0.0, 1.0), [NO_CONTROL] * 10, StepSpec(0.1, VARIANT_VV), ZERO)
        assert states[-1].q.data[0, 0] == pytest.approx(1.0, abs=1e-14)

    def test_empty_controls_rejected(self):
        with pytest.raises(RolloutError):
            rollout(config_state(0.0, 1.0), [], StepSpec(), ZERO)

    def test_failing_step_is_reported(self):
        # two gradient evaluations per step: steps 0-2 stay finite
        heads = ExplodingGradient(finite_calls=6)
        with pytest.raises(RolloutError) as excinfo:
            rollout(config_state(0.0, 1.0), [NO_CONTROL] * 10, StepSpec(0.1, VARIANT_VV), heads)
        assert excinfo.value.step == 3

    def test_rollout_is_differentiable(self, pendulum_state, perturb):
        heads = perturb(ModelParams.build(VARIANT_VV, pendulum_state, (6,), seed=0), scale=0.2)
        with dc.Tape() as tape:
            states = rollout(config_state(0.3, 0.1), [dc.constant([[0.5]])] * 5, StepSpec(0.1, VARIANT_VV), heads)
            loss = dc.sum_all(dc.square(states[-1].vector()))
        grads = dc.backward(tape, loss, heads.parameters())
        assert all(np.all(np.isfinite(g)) for g in grads)
        assert any(np.any(g != 0.0) for g in grads)


def test_step_spec_validation():
    with pytest.raises(ConfigError):
        StepSpec(h=0.0)
    with pytest.raises(ConfigError):
        StepSpec(variant="leapfrog")
