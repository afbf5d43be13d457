"""
Analytic continuous-control environments

  - bimodal_bandit: one pull, two symmetric optima at a = +-0.6
  - two_goal_point_mass: 2-D point mass with two equally good goals
  - pendulum_swingup: classic swing-up, upright is theta = 0

All dynamics are pure numpy functions of (observation, action), vectorized
over a leading batch axis so evaluation can step many episodes in lockstep.
The rng only matters for reset.

Also: the 2-state tabular MDP used by the distributional Bellman checks.

Copyright (c) 2026 flow-drl authors
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple, Type

import numpy as np

logger = logging.getLogger("flow-drl")


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    horizon: int
    action_low: float = -1.0
    action_high: float = 1.0


@dataclass
class EnvState:
    observation: np.ndarray
    elapsed: int = 0


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    terminal: bool
    truncated: bool = False


class Environment:
    """Base class; subclasses define spec, initial_observations and dynamics."""

    spec: EnvSpec

    def initial_observations(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def dynamics(
        self, obs: np.ndarray, actions: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(B, state_dim), (B, action_dim) -> next obs, rewards (B,), terminal (B,)"""
        raise NotImplementedError

    def check_actions(self, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape[-1] != self.spec.action_dim:
            raise ValueError(
                f"{self.spec.name}: action has dim {actions.shape[-1]}, "
                f"expected {self.spec.action_dim}"
            )
        inside = (actions >= self.spec.action_low) & (actions <= self.spec.action_high)
        if not np.all(inside):
            raise ValueError(
                f"{self.spec.name}: action {actions.tolist()} outside bounds "
                f"[{self.spec.action_low}, {self.spec.action_high}]"
            )
        return actions

    def reset(self, rng: np.random.Generator) -> EnvState:
        return EnvState(self.initial_observations(rng, 1)[0], 0)

    def step(
        self, state: EnvState, action, rng: np.random.Generator = None
    ) -> Tuple[Transition, EnvState]:
        action = self.check_actions(action)
        next_obs, reward, terminal = self.dynamics(state.observation[None, :], action[None, :])
        elapsed = state.elapsed + 1
        is_terminal = bool(terminal[0])
        truncated = (not is_terminal) and elapsed >= self.spec.horizon
        transition = Transition(
            s=state.observation.copy(),
            a=action.copy(),
            r=float(reward[0]),
            s_next=next_obs[0],
            terminal=is_terminal,
            truncated=truncated,
        )
        return transition, EnvState(next_obs[0], elapsed)


# ============ BIMODAL BANDIT ============


class BimodalBandit(Environment):
    spec = EnvSpec("bimodal_bandit", state_dim=1, action_dim=1, horizon=1)
    optima = (0.6, -0.6)
    width = 0.02

    def initial_observations(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.zeros((n, 1))

    def reward(self, actions: np.ndarray) -> np.ndarray:
        a = actions[..., 0]
        return np.exp(-((a - 0.6) ** 2) / self.width) + np.exp(-((a + 0.6) ** 2) / self.width)

    def dynamics(self, obs, actions):
        n = obs.shape[0]
        return np.zeros((n, 1)), self.reward(actions), np.ones(n, dtype=bool)


# ============ TWO-GOAL POINT MASS ============


class TwoGoalPointMass(Environment):
    spec = EnvSpec("two_goal_point_mass", state_dim=4, action_dim=2, horizon=100)
    dt = 0.05
    damping = 0.5
    goals = np.array([[0.5, 0.5], [-0.5, 0.5]])
    goal_radius = 0.05

    def initial_observations(self, rng: np.random.Generator, n: int) -> np.ndarray:
        obs = np.zeros((n, 4))
        obs[:, :2] = rng.uniform(-0.1, 0.1, size=(n, 2))
        return obs

    def goal_distance(self, positions: np.ndarray) -> np.ndarray:
        diffs = positions[:, None, :] - self.goals[None, :, :]
        return np.min(np.linalg.norm(diffs, axis=-1), axis=1)

    def dynamics(self, obs, actions):
        p, v = obs[:, :2], obs[:, 2:]
        # semi-implicit Euler: velocity first, then position with the new velocity
        v_next = v + self.dt * (actions - self.damping * v)
        p_next = p + self.dt * v_next
        distance = self.goal_distance(p_next)
        reward = -distance - 0.01 * np.sum(actions**2, axis=-1)
        terminal = distance <= self.goal_radius
        return np.concatenate([p_next, v_next], axis=1), reward, terminal


# ============ PENDULUM SWING-UP ============


def wrap_angle(theta: np.ndarray) -> np.ndarray:
    """Map to (-pi, pi]."""
    return np.arctan2(np.sin(theta), np.cos(theta))


class PendulumSwingUp(Environment):
    spec = EnvSpec("pendulum_swingup", state_dim=3, action_dim=1, horizon=200)
    g = 10.0
    m = 1.0
    l = 1.0  # noqa: E741
    dt = 0.05
    max_speed = 8.0
    max_torque = 2.0

    def initial_observations(self, rng: np.random.Generator, n: int) -> np.ndarray:
        theta = rng.uniform(-np.pi, np.pi, size=n)
        theta_dot = rng.uniform(-1.0, 1.0, size=n)
        return self.observe(theta, theta_dot)

    @staticmethod
    def observe(theta: np.ndarray, theta_dot: np.ndarray) -> np.ndarray:
        return np.stack([np.cos(theta), np.sin(theta), theta_dot], axis=-1)

    @staticmethod
    def angle(obs: np.ndarray) -> np.ndarray:
        return np.arctan2(obs[..., 1], obs[..., 0])

    def energy(self, obs: np.ndarray) -> np.ndarray:
        """Mechanical energy of a uniform rod pivoting at one end."""
        theta, theta_dot = self.angle(obs), obs[..., 2]
        inertia = self.m * self.l**2 / 3.0
        return 0.5 * inertia * theta_dot**2 + self.m * self.g * (self.l / 2.0) * np.cos(theta)

    def dynamics(self, obs, actions):
        theta, theta_dot = self.angle(obs), obs[:, 2]
        u = self.max_torque * actions[:, 0]
        reward = -(wrap_angle(theta) ** 2 + 0.1 * theta_dot**2 + 0.001 * u**2)
        theta_ddot = 3.0 * self.g / (2.0 * self.l) * np.sin(theta) + 3.0 * u / (
            self.m * self.l**2
        )
        # explicit Euler on both coordinates
        theta_next = theta + self.dt * theta_dot
        theta_dot_next = np.clip(theta_dot + self.dt * theta_ddot, -self.max_speed, self.max_speed)
        terminal = np.zeros(obs.shape[0], dtype=bool)
        return self.observe(theta_next, theta_dot_next), reward, terminal


ENVIRONMENTS: Dict[str, Type[Environment]] = {
    "bimodal_bandit": BimodalBandit,
    "two_goal_point_mass": TwoGoalPointMass,
    "pendulum_swingup": PendulumSwingUp,
}


def make_env(name: str) -> Environment:
    try:
        return ENVIRONMENTS[name]()
    except KeyError:
        raise ValueError(
            f"unknown environment '{name}' (choose from {', '.join(ENVIRONMENTS)})"
        ) from None


def reset(env: Environment, rng: np.random.Generator) -> EnvState:
    """Start an episode.

    Args:
        env: Environment to reset
        rng: Generator for the initial-state draw

    Returns:
        EnvState with the first observation and elapsed = 0
    """
    return env.reset(rng)


def step(env: Environment, state: EnvState, action, rng: np.random.Generator = None):
    """Advance one step.

    Args:
        env: Environment to step
        state: Current EnvState
        action: Action of shape (action_dim,) inside the action bounds
        rng: Unused by the bundled environments, whose dynamics are deterministic

    Returns:
        (Transition, next EnvState). truncated is set only when the step
        reaches the horizon without a terminal.

    Raises:
        ValueError: if the action has the wrong dimension or leaves the bounds
    """
    return env.step(state, action, rng)


# ============ TABULAR MDP ============


@dataclass(frozen=True)
class TabularMDP:
    """Finite MDP under a fixed stochastic policy.

    transitions[s, a, s'], rewards[s, a], policy[s, a].
    """

    transitions: np.ndarray
    rewards: np.ndarray
    policy: np.ndarray
    gamma: float
    labels: Tuple[str, ...] = field(default=())

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[1]

    def successor_matrix(self) -> np.ndarray:
        """M[(s,a), (s',a')] = P(s'|s,a) pi(a'|s')"""
        joint = self.transitions[:, :, :, None] * self.policy[None, None, :, :]
        n = self.n_states * self.n_actions
        return joint.reshape(n, n)


def tabular_mdp() -> TabularMDP:
    return TabularMDP(
        transitions=np.array(
            [
                [[0.7, 0.3], [0.2, 0.8]],
                [[0.4, 0.6], [0.9, 0.1]],
            ]
        ),
        rewards=np.array([[1.0, 0.0], [-0.5, 2.0]]),
        policy=np.array([[0.6, 0.4], [0.3, 0.7]]),
        gamma=0.9,
    )


def solve_q(mdp: TabularMDP) -> np.ndarray:
    """Exact Q^pi from (I - gamma M) q = r."""
    n = mdp.n_states * mdp.n_actions
    system = np.eye(n) - mdp.gamma * mdp.successor_matrix()
    q = np.linalg.solve(system, mdp.rewards.reshape(n))
    return q.reshape(mdp.n_states, mdp.n_actions)


def monte_carlo_q(
    mdp: TabularMDP,
    rng: np.random.Generator,
    samples: int = 1_000_000,
    horizon: int = 150,
) -> Tuple[np.ndarray, np.ndarray]:
    """Discounted-return estimate of Q^pi with its standard error per (s, a).

    `samples` is split evenly over the state-action pairs. The horizon
    truncation bias is below gamma^horizon * max|r| / (1 - gamma).
    """
    n_pairs = mdp.n_states * mdp.n_actions
    per_pair = samples // n_pairs
    state_cdf = np.cumsum(mdp.transitions, axis=-1)
    action_cdf = np.cumsum(mdp.policy, axis=-1)
    means = np.zeros((mdp.n_states, mdp.n_actions))
    sems = np.zeros_like(means)

    for s0 in range(mdp.n_states):
        for a0 in range(mdp.n_actions):
            s = np.full(per_pair, s0)
            a = np.full(per_pair, a0)
            returns = np.zeros(per_pair)
            discount = 1.0
            for _ in range(horizon):
                returns += discount * mdp.rewards[s, a]
                discount *= mdp.gamma
                u = rng.random(per_pair)
                s = np.minimum((u[:, None] > state_cdf[s, a]).sum(axis=1), mdp.n_states - 1)
                u = rng.random(per_pair)
                a = np.minimum((u[:, None] > action_cdf[s]).sum(axis=1), mdp.n_actions - 1)
            means[s0, a0] = returns.mean()
            sems[s0, a0] = returns.std(ddof=1) / np.sqrt(per_pair)
    return means, sems
