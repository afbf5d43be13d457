"""
Tests for the analytic environments and the tabular MDP

Copyright (c) 2026 flow-drl authors
"""

import numpy as np
import pytest

from flow_drl import envs
from flow_drl.envs import (
    BimodalBandit,
    EnvState,
    PendulumSwingUp,
    TabularMDP,
    TwoGoalPointMass,
    make_env,
    monte_carlo_q,
    solve_q,
    tabular_mdp,
    wrap_angle,
)


class TestRegistry:
    """Environment lookup by name."""

    @pytest.mark.parametrize(
        "name,state_dim,action_dim,horizon",
        [
            ("bimodal_bandit", 1, 1, 1),
            ("two_goal_point_mass", 4, 2, 100),
            ("pendulum_swingup", 3, 1, 200),
        ],
    )
    def test_specs(self, name, state_dim, action_dim, horizon):
        """Each registered environment exposes its dimensions and horizon."""
        spec = make_env(name).spec
        assert (spec.state_dim, spec.action_dim, spec.horizon) == (state_dim, action_dim, horizon)
        assert (spec.action_low, spec.action_high) == (-1.0, 1.0)

    def test_unknown_name(self):
        """Unknown names list the valid choices."""
        with pytest.raises(ValueError, match="unknown environment"):
            make_env("cartpole")

    def test_reset_is_seeded(self):
        """Equal seeds give equal initial observations."""
        env = make_env("pendulum_swingup")
        a = envs.reset(env, np.random.default_rng(5))
        b = envs.reset(env, np.random.default_rng(5))
        np.testing.assert_array_equal(a.observation, b.observation)
        assert a.elapsed == 0


class TestActionChecks:
    """Actions are validated before the dynamics run."""

    def test_out_of_bounds(self, rng):
        """Actions outside [-1, 1] are rejected."""
        env = BimodalBandit()
        with pytest.raises(ValueError, match="outside bounds"):
            env.step(env.reset(rng), np.array([1.5]))

    def test_wrong_dimension(self, rng):
        """Actions of the wrong width are rejected."""
        env = TwoGoalPointMass()
        with pytest.raises(ValueError, match="expected 2"):
            env.step(env.reset(rng), np.array([0.1]))

    def test_bounds_are_inclusive(self, rng):
        """The bounds themselves are valid actions."""
        env = BimodalBandit()
        transition, _ = env.step(env.reset(rng), np.array([-1.0]))
        assert np.isfinite(transition.r)


class TestBimodalBandit:
    """Single-step bandit with two symmetric optima."""

    def test_peak_reward(self):
        """The optima pay almost exactly 1."""
        r = BimodalBandit().reward(np.array([[0.6], [-0.6]]))
        np.testing.assert_allclose(r, [1.0, 1.0], atol=1e-30)

    def test_reward_between_modes(self):
        """At a = 0 both bumps contribute exp(-18)."""
        r = BimodalBandit().reward(np.array([[0.0]]))
        assert r[0] == pytest.approx(2.0 * np.exp(-18.0), rel=1e-12)

    def test_symmetry(self, rng):
        """r(a) = r(-a)."""
        a = rng.uniform(-1.0, 1.0, (50, 1))
        bandit = BimodalBandit()
        np.testing.assert_allclose(bandit.reward(a), bandit.reward(-a), rtol=1e-12)

    def test_single_step_episode(self, rng):
        """Every pull ends the episode as terminal, never truncated."""
        env = BimodalBandit()
        transition, state = envs.step(env, envs.reset(env, rng), np.array([0.6]))
        assert transition.terminal
        assert not transition.truncated
        assert transition.r == pytest.approx(1.0)
        assert state.elapsed == 1


class TestTwoGoalPointMass:
    """Damped 2-D point mass with two goals."""

    def test_reset_near_origin(self, rng):
        """Start positions lie in [-0.1, 0.1]^2 with zero velocity."""
        obs = TwoGoalPointMass().initial_observations(rng, 200)
        assert np.all(np.abs(obs[:, :2]) <= 0.1)
        np.testing.assert_array_equal(obs[:, 2:], 0.0)

    def test_truncation_at_horizon(self, rng):
        """With zero action the episode is truncated at step 100, not terminated."""
        env = TwoGoalPointMass()
        state = env.reset(rng)
        flags = []
        for _ in range(100):
            transition, state = env.step(state, np.zeros(2))
            flags.append((transition.terminal, transition.truncated))
        assert flags[:-1] == [(False, False)] * 99
        assert flags[-1] == (False, True)

    def test_goal_is_terminal(self):
        """Reaching a goal disk terminates with reward close to 0."""
        env = TwoGoalPointMass()
        state = EnvState(np.array([0.5, 0.5, 0.0, 0.0]))
        transition, _ = env.step(state, np.zeros(2))
        assert transition.terminal
        assert transition.r == pytest.approx(0.0, abs=1e-12)

    def test_goals_are_symmetric(self):
        """Mirror-image positions are equally far from the nearest goal."""
        env = TwoGoalPointMass()
        points = np.array([[0.2, 0.1], [-0.2, 0.1]])
        d = env.goal_distance(points)
        assert d[0] == pytest.approx(d[1])

    def test_semi_implicit_update(self):
        """Velocity updates first, then position moves with the new velocity."""
        env = TwoGoalPointMass()
        obs = np.array([[0.0, 0.0, 1.0, 0.0]])
        next_obs, _, _ = env.dynamics(obs, np.array([[1.0, 0.0]]))
        v_next = 1.0 + 0.05 * (1.0 - 0.5)
        np.testing.assert_allclose(next_obs[0], [0.05 * v_next, 0.0, v_next, 0.0])

    def test_deterministic_dynamics(self, rng):
        """Dynamics ignore the rng."""
        env = TwoGoalPointMass()
        state = env.reset(rng)
        first, _ = env.step(state, np.array([0.3, -0.2]), np.random.default_rng(1))
        second, _ = env.step(state, np.array([0.3, -0.2]), np.random.default_rng(2))
        np.testing.assert_array_equal(first.s_next, second.s_next)
        assert first.r == second.r


class TestPendulum:
    """Swing-up pendulum with upright at theta = 0."""

    def test_upright_is_fixed_point(self):
        """Upright and at rest with zero torque stays put with reward 0."""
        env = PendulumSwingUp()
        state = EnvState(PendulumSwingUp.observe(np.array(0.0), np.array(0.0)))
        transition, next_state = env.step(state, np.zeros(1))
        np.testing.assert_allclose(next_state.observation, [1.0, 0.0, 0.0], atol=1e-15)
        assert transition.r == 0.0

    def test_bottom_is_fixed_point(self):
        """Hanging down at rest stays down."""
        env = PendulumSwingUp()
        obs = PendulumSwingUp.observe(np.array([np.pi]), np.array([0.0]))
        next_obs, reward, _ = env.dynamics(obs, np.zeros((1, 1)))
        np.testing.assert_allclose(next_obs, obs, atol=1e-12)
        assert reward[0] == pytest.approx(-(np.pi**2))

    def test_speed_is_clipped(self):
        """Angular velocity never leaves [-8, 8]."""
        env = PendulumSwingUp()
        obs = PendulumSwingUp.observe(np.array([np.pi / 2]), np.array([7.99]))
        next_obs, _, _ = env.dynamics(obs, np.ones((1, 1)))
        assert next_obs[0, 2] == 8.0

    def test_never_terminal(self, rng):
        """Only the horizon ends a pendulum episode."""
        env = PendulumSwingUp()
        obs = env.initial_observations(rng, 64)
        _, _, terminal = env.dynamics(obs, rng.uniform(-1, 1, (64, 1)))
        assert not np.any(terminal)

    def test_wrap_angle(self):
        """Angles map into (-pi, pi]."""
        np.testing.assert_allclose(wrap_angle(np.array([1.5 * np.pi, -0.25 * np.pi])),
                                   [-0.5 * np.pi, -0.25 * np.pi])

    def test_energy_of_upright_rest(self):
        """Potential energy at the top is m g l / 2."""
        obs = PendulumSwingUp.observe(np.array(0.0), np.array(0.0))
        assert float(PendulumSwingUp().energy(obs)) == pytest.approx(5.0)


class TestTabularMDP:
    """Finite MDP used for distributional Bellman checks."""

    def test_rows_are_distributions(self):
        """Transition and policy rows each sum to 1."""
        mdp = tabular_mdp()
        np.testing.assert_allclose(mdp.transitions.sum(axis=-1), 1.0)
        np.testing.assert_allclose(mdp.policy.sum(axis=-1), 1.0)
        np.testing.assert_allclose(mdp.successor_matrix().sum(axis=-1), 1.0)

    def test_single_state_value(self):
        """One state, one action, reward 1, gamma 0.9 gives Q = 10."""
        mdp = TabularMDP(
            transitions=np.ones((1, 1, 1)),
            rewards=np.ones((1, 1)),
            policy=np.ones((1, 1)),
            gamma=0.9,
        )
        assert solve_q(mdp)[0, 0] == pytest.approx(10.0)

    def test_bellman_consistency(self):
        """Exact Q satisfies Q = r + gamma P pi Q."""
        mdp = tabular_mdp()
        q = solve_q(mdp)
        rebuilt = mdp.rewards + mdp.gamma * (mdp.successor_matrix() @ q.reshape(-1)).reshape(2, 2)
        np.testing.assert_allclose(rebuilt, q, atol=1e-12)

    @pytest.mark.slow
    def test_monte_carlo_agrees(self):
        """Sampled discounted returns match the exact solution within 4 standard errors."""
        mdp = tabular_mdp()
        means, sems = monte_carlo_q(mdp, np.random.default_rng(0), samples=400_000)
        exact = solve_q(mdp)
        assert np.all(np.abs(means - exact) < 4.0 * sems)
