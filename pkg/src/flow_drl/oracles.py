"""
Verification suites

Independent oracles for the numerical claims the training code relies on:
finite differences for every primitive and composite loss, closed-form flow
log-densities, a brute-force quantile Huber loss, the tabular distributional
Bellman operator (contraction and fixed point), Hutchinson convergence,
environment invariants, autodiff and Adam determinism, Euler exactness, target
critic algebra (EMA, translation, min rule), replay uniformity and gradient
isolation between the critic and actor losses.

Suites register themselves in SUITES; `flow-drl verify` runs all of them.

Copyright (c) 2026 flow-drl authors
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from scipy import stats

from . import distcritic
from .core import diffcore as dc
from .core.diffcore import CompGraph, Operand
from .distcritic import CriticEnsemble, wasserstein1
from .envs import EnvState, TabularMDP, Transition, make_env, solve_q, tabular_mdp
from .flowpolicy import (
    FlowPolicy,
    VelocityNetConfig,
    exact_trace,
    flow_rollout,
    hutchinson_trace,
    log_prob,
    pre_squash_log_prob,
    squash_correction,
    standard_normal_log_density,
)
from .trainer import ReplayBuffer, policy_loss, temperature_loss

logger = logging.getLogger("flow-drl")


@dataclass
class SuiteResult:
    suite: str
    passed: bool
    seconds: float = 0.0
    checks: Dict[str, float] = field(default_factory=dict)
    failures: List[str] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "suite": self.suite,
            "passed": self.passed,
            "seconds": round(self.seconds, 3),
            "checks": self.checks,
            "failures": self.failures,
        }


SUITES: Dict[str, Callable[[], SuiteResult]] = {}


def suite(name: str):
    def register(fn: Callable[..., Tuple[Dict[str, float], List[str]]]):
        def run(**kwargs) -> SuiteResult:
            started = time.perf_counter()
            try:
                checks, failures = fn(**kwargs)
            except Exception as e:  # a crashing oracle is a failed oracle
                checks, failures = {}, [f"{type(e).__name__}: {e}"]
            return SuiteResult(name, not failures, time.perf_counter() - started, checks, failures)

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        SUITES[name] = run
        return run

    return register


def run_suites(names: Sequence[str] = ()) -> List[SuiteResult]:
    selected = list(names) or list(SUITES)
    unknown = [n for n in selected if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown verification suite(s): {', '.join(unknown)}")
    results = []
    for name in selected:
        result = SUITES[name]()
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"[VERIFY] {name}: {'pass' if result.passed else 'FAIL'} "
                          f"({result.seconds:.2f}s)")
        results.append(result)
    return results


# ============ FINITE DIFFERENCES ============


def gradient_error(
    fn: Callable[..., Operand], inputs: Sequence[np.ndarray], h: float = 1e-5
) -> float:
    """Max over inputs of the norm-wise relative error, analytic vs central differences.

    `fn` maps operands to a scalar and must run both on graph nodes and on
    plain arrays.
    """
    worst = 0.0
    for k in range(len(inputs)):
        graph = CompGraph()
        nodes = [graph.variable(x) if i == k else graph.constant(x) for i, x in enumerate(inputs)]
        analytic = graph.backward(graph.lift(fn(*nodes))).of(nodes[k])

        numeric = np.zeros_like(inputs[k])
        flat = numeric.reshape(-1)
        for j in range(flat.size):
            plus = [x.copy() for x in inputs]
            minus = [x.copy() for x in inputs]
            plus[k].reshape(-1)[j] += h
            minus[k].reshape(-1)[j] -= h
            flat[j] = (float(fn(*plus)) - float(fn(*minus))) / (2.0 * h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _away_from_zero(x: np.ndarray, margin: float = 0.1) -> np.ndarray:
    return np.where(x >= 0.0, x + margin, x - margin)


def primitive_cases(rng: np.random.Generator) -> Dict[str, Tuple[Callable, List[np.ndarray]]]:
    """One (scalar fn, inputs) case per primitive; the fn weights the output randomly."""

    def weighted(op, out_shape):
        weights = rng.standard_normal(out_shape)
        return lambda *xs: dc.sum(dc.mul(op(*xs), weights))

    x34 = rng.standard_normal((3, 4))
    a = rng.standard_normal((3, 4))
    b = a + _away_from_zero(rng.standard_normal((3, 4)))
    return {
        "add": (weighted(dc.add, (3, 4)), [x34, rng.standard_normal((3, 4))]),
        "sub": (weighted(dc.sub, (3, 4)), [x34, rng.standard_normal((3, 4))]),
        "mul": (weighted(dc.mul, (3, 4)), [x34, rng.standard_normal((3, 4))]),
        "matmul": (weighted(dc.matmul, (3, 2)), [x34, rng.standard_normal((4, 2))]),
        "batched_matmul": (
            weighted(dc.matmul, (2, 3, 2)),
            [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 2))],
        ),
        "relu": (weighted(dc.relu, (3, 4)), [_away_from_zero(x34)]),
        "tanh": (weighted(dc.tanh, (3, 4)), [x34]),
        "exp": (weighted(dc.exp, (3, 4)), [0.5 * x34]),
        "log": (weighted(dc.log, (3, 4)), [np.abs(x34) + 0.5]),
        "square": (weighted(dc.square, (3, 4)), [x34]),
        "sum": (weighted(lambda x: dc.sum(x, axis=1), (3,)), [x34]),
        "mean": (weighted(lambda x: dc.mean(x, axis=0, keepdims=True), (1, 4)), [x34]),
        "broadcast": (
            weighted(lambda x: dc.broadcast(x, (3, 4)), (3, 4)),
            [rng.standard_normal((1, 4))],
        ),
        "concat": (
            weighted(lambda x, y: dc.concat([x, y], axis=1), (3, 6)),
            [x34, rng.standard_normal((3, 2))],
        ),
        "slice": (weighted(lambda x: dc.slice_(x, 1, 1, 3), (3, 2)), [x34]),
        "softmax": (weighted(dc.softmax, (3, 4)), [x34]),
        "scale": (weighted(lambda x: dc.scale(x, -1.7), (3, 4)), [x34]),
        "minimum": (weighted(dc.minimum, (3, 4)), [a, b]),
        "abs": (weighted(dc.abs, (3, 4)), [_away_from_zero(x34)]),
        "reshape": (weighted(lambda x: dc.reshape(x, (2, 6)), (2, 6)), [x34]),
        "transpose": (weighted(dc.transpose, (4, 3)), [x34]),
        "swapaxes": (
            weighted(lambda x: dc.swapaxes(x, 1, 2), (2, 4, 3, 2)),
            [rng.standard_normal((2, 3, 4, 2))],
        ),
    }


def _small_flow_setup(seed: int, flow_steps: int = 2, action_dim: int = 1):
    rng = np.random.default_rng(seed)
    net = VelocityNetConfig(
        action_dim=action_dim, state_dim=2, d_model=8, heads=2, layers=1,
        flow_steps=flow_steps, time_frequencies=4,
    )
    policy = FlowPolicy(net, rng)
    policy.params["head.w"].value = 0.3 * rng.standard_normal((8, action_dim))
    critics = CriticEnsemble(2, action_dim, 4, 8, rng, twin=True)
    for member in critics.members:
        member.params["mlp2.w"].value = 0.3 * rng.standard_normal((8, 4))
    states = rng.standard_normal((3, 2))
    return policy, critics, states


def flow_objective_error(seed: int, alpha: float = 0.2, coordinates: int = 12) -> float:
    """Relative error of dJ_pi/dphi on a d=1, K=2 flow against central differences."""
    policy, critics, states = _small_flow_setup(seed)

    def objective() -> Tuple[CompGraph, dc.Node]:
        graph = CompGraph()
        sample = policy.sample(graph, states, np.random.default_rng(seed + 1), trainable=True)
        q_value = critics.min_mean(graph, states, sample.action)
        return graph, policy_loss(sample.log_prob, q_value, alpha)

    graph, loss = objective()
    policy.params.zero_grads()
    graph.backward(loss)

    rng = np.random.default_rng(seed + 2)
    names = policy.params.names()
    analytic, numeric = [], []
    h = 1e-5
    for _ in range(coordinates):
        entry = policy.params[names[rng.integers(len(names))]]
        j = rng.integers(entry.value.size)
        original = entry.value.copy()
        analytic.append(entry.grad.reshape(-1)[j])
        bumped = original.copy()
        bumped.reshape(-1)[j] += h
        entry.value = bumped
        up = float(objective()[1].value)
        bumped = original.copy()
        bumped.reshape(-1)[j] -= h
        entry.value = bumped
        down = float(objective()[1].value)
        entry.value = original
        numeric.append((up - down) / (2.0 * h))
    return relative_error(np.array(analytic), np.array(numeric))


def flow_log_prob_error(seed: int) -> float:
    """Relative error of d log pi / d(head weights) through a K=2, d=2 rollout."""
    policy, _, states = _small_flow_setup(seed, flow_steps=2, action_dim=2)
    a0 = np.random.default_rng(seed + 3).standard_normal((3, 2))
    base = policy.params.values()

    def total_log_prob(head_w: Operand) -> Operand:
        weights = dict(base)
        weights["head.w"] = head_w
        graph = head_w.graph if isinstance(head_w, dc.Node) else None
        field = policy.field(weights)
        rollout = flow_rollout(field, states, a0, 2, graph=graph)
        total = dc.sum(log_prob(rollout))
        return total if graph is not None else dc.value_of(total)

    return gradient_error(total_log_prob, [base["head.w"].copy()])


@suite("gradients")
def gradients_suite(seeds: int = 100, composite_seeds: int = 3):
    """Analytic gradients of every primitive and composite vs central differences."""
    checks: Dict[str, float] = {}
    failures: List[str] = []
    for seed in range(seeds):
        for name, (fn, inputs) in primitive_cases(np.random.default_rng(seed)).items():
            err = gradient_error(fn, inputs)
            checks[name] = max(checks.get(name, 0.0), err)
    for name, err in list(checks.items()):
        if err >= 1e-4:
            failures.append(f"{name}: relative error {err:.2e} >= 1e-4")

    composites: Dict[str, Callable[[int], float]] = {
        "quantile_huber": lambda s: gradient_error(
            lambda theta: distcritic.quantile_huber_loss(
                theta, np.random.default_rng(s + 7).standard_normal((4, 6)), 1.0
            ),
            [np.random.default_rng(s).standard_normal((4, 5))],
        ),
        "temperature": lambda s: gradient_error(
            lambda la: temperature_loss(
                np.random.default_rng(s).standard_normal(16), la, -1.0
            ),
            [np.array(np.log(0.2))],
        ),
        "policy_objective": flow_objective_error,
        "flow_log_prob": flow_log_prob_error,
    }
    for name, check in composites.items():
        err = max(check(seed) for seed in range(composite_seeds))
        checks[name] = err
        if err >= 1e-3:
            failures.append(f"{name}: relative error {err:.2e} >= 1e-3")
    return checks, failures


# ============ FLOW LOG-DENSITY ============


def zero_field(times, history, state):
    return dc.scale(history[-1], 0.0)


def constant_field(c: np.ndarray):
    def field(times, history, state):
        return dc.add(dc.scale(history[-1], 0.0), np.broadcast_to(c, dc.shape_of(history[-1])))

    return field


def linear_field(rate: float):
    def field(times, history, state):
        return dc.scale(history[-1], rate)

    return field


@suite("flow_logprob")
def flow_logprob_suite():
    """Closed-form log-densities for zero, constant and linear velocity fields."""
    rng = np.random.default_rng(0)
    checks: Dict[str, float] = {}
    failures: List[str] = []
    state = np.zeros((64, 1))

    a0 = rng.standard_normal((64, 2))
    rollout = flow_rollout(zero_field, state, a0, 4)
    expected = standard_normal_log_density(a0) - dc.value_of(squash_correction(a0))
    err = float(np.max(np.abs(dc.value_of(log_prob(rollout)) - expected)))
    checks["zero_field"] = err
    if err > 1e-12:
        failures.append(f"zero field log-prob off by {err:.2e}")

    rollout = flow_rollout(constant_field(np.array([0.3, -0.7])), state, a0, 7)
    trace_total = float(np.max(np.abs(dc.value_of(rollout.trace_integral))))
    checks["constant_field_trace"] = trace_total
    if trace_total != 0.0:
        failures.append(f"constant field trace integral {trace_total!r} != 0")

    a0 = rng.standard_normal((64, 1))
    rollout = flow_rollout(linear_field(-1.0), state, a0, 100)
    shift = dc.value_of(pre_squash_log_prob(rollout)) - standard_normal_log_density(a0)
    err = float(np.max(np.abs(shift - 1.0)))
    checks["linear_field_shift"] = err
    if err > 0.02:
        failures.append(f"linear field log-density shift off by {err:.3f}")
    return checks, failures


# ============ HUTCHINSON ============


def matrix_field(matrix: np.ndarray):
    """v(z) = M z row-wise, so the Jacobian is M."""

    def field(times, history, state):
        return dc.matmul(history[-1], matrix.T)

    return field


def hutchinson_rms_errors(
    matrix: np.ndarray, probe_counts: Sequence[int], repeats: int, rng: np.random.Generator
) -> np.ndarray:
    d = matrix.shape[0]
    exact = float(np.trace(matrix))
    errors = []
    for probes in probe_counts:
        rows = probes * repeats
        per_probe = hutchinson_trace(
            matrix_field(matrix), 0.0, [np.zeros((rows, d))], np.zeros((rows, 1)), 1, rng
        )
        estimates = per_probe.reshape(repeats, probes).mean(axis=1)
        errors.append(np.sqrt(np.mean((estimates - exact) ** 2)))
    return np.array(errors)


@suite("hutchinson")
def hutchinson_suite(matrices: int = 20, probes: int = 10_000):
    """Exact trace is exact; 10^4 Rademacher probes land within 1%; error decays as P^-1/2."""
    rng = np.random.default_rng(0)
    checks: Dict[str, float] = {}
    failures: List[str] = []
    worst_exact, worst_rel = 0.0, 0.0
    for _ in range(matrices):
        matrix = rng.standard_normal((8, 8)) / np.sqrt(8.0) + 2.0 * np.eye(8)
        truth = float(np.trace(matrix))
        point = [rng.standard_normal((1, 8))]
        state = np.zeros((1, 1))
        worst_exact = max(
            worst_exact, abs(float(exact_trace(matrix_field(matrix), 0.0, point, state)[0]) - truth)
        )
        batch = [np.zeros((probes, 8))]
        estimate = float(
            np.mean(
                hutchinson_trace(matrix_field(matrix), 0.0, batch, np.zeros((probes, 1)), 1, rng)
            )
        )
        worst_rel = max(worst_rel, abs(estimate - truth) / abs(truth))
    checks["exact_trace_abs_error"] = worst_exact
    checks["hutchinson_rel_error"] = worst_rel
    if worst_exact > 1e-10:
        failures.append(f"exact trace off by {worst_exact:.2e}")
    if worst_rel > 0.01:
        failures.append(f"Hutchinson estimate off by {100 * worst_rel:.2f}%")

    matrix = rng.standard_normal((8, 8)) / np.sqrt(8.0) + 2.0 * np.eye(8)
    counts = np.array([10, 100, 1000])
    errors = hutchinson_rms_errors(matrix, counts, 400, rng)
    slope = float(np.polyfit(np.log(counts), np.log(errors), 1)[0])
    checks["error_slope"] = slope
    if abs(slope + 0.5) > 0.1:
        failures.append(f"error-vs-probes slope {slope:.3f} not within 0.1 of -0.5")
    return checks, failures


# ============ QUANTILE HUBER ============


def brute_force_quantile_huber(theta: np.ndarray, targets: np.ndarray, kappa: float) -> float:
    """Direct triple loop over (batch, i, j)."""
    batch, n = theta.shape
    n_targets = targets.shape[1]
    total = 0.0
    for b in range(batch):
        for i in range(n):
            tau = (2 * i + 1) / (2 * n)
            for j in range(n_targets):
                delta = targets[b, j] - theta[b, i]
                if abs(delta) <= kappa:
                    loss = 0.5 * delta * delta
                else:
                    loss = kappa * (abs(delta) - 0.5 * kappa)
                weight = abs(tau - (1.0 if delta < 0 else 0.0))
                total += weight * loss
    return total / (batch * n * n_targets)


@suite("quantile_huber")
def quantile_huber_suite(instances: int = 1000):
    """Vectorized quantile Huber loss equals the triple-loop definition."""
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(instances):
        batch = int(rng.integers(1, 5))
        n, n_targets = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        kappa = float(rng.choice([0.5, 1.0, 2.0]))
        theta = 2.0 * rng.standard_normal((batch, n))
        targets = 2.0 * rng.standard_normal((batch, n_targets))
        fast = float(distcritic.quantile_huber_loss(theta, targets, kappa))
        worst = max(worst, abs(fast - brute_force_quantile_huber(theta, targets, kappa)))
    failures = [] if worst <= 1e-10 else [f"max deviation {worst:.2e} > 1e-10"]
    return {"max_abs_deviation": worst}, failures


# ============ TABULAR DISTRIBUTIONAL BELLMAN ============


def project_quantiles(values: np.ndarray, weights: np.ndarray, n: int) -> np.ndarray:
    """Project a discrete distribution onto n uniform Diracs.

    Each location is the average of the quantile function over one of the
    n equal-mass bins; the mean is preserved.
    """
    order = np.argsort(values, kind="stable")
    v = values[order]
    cum = np.concatenate([[0.0], np.cumsum(weights[order])])
    cum /= cum[-1]
    edges = np.arange(n + 1) / n
    lo = np.maximum(edges[:-1, None], cum[None, :-1])
    hi = np.minimum(edges[1:, None], cum[None, 1:])
    overlap = np.clip(hi - lo, 0.0, None)
    return n * (overlap @ v)


def distributional_bellman(mdp: TabularMDP, table: np.ndarray) -> np.ndarray:
    """Projected evaluation operator on a (S, A, N) quantile table."""
    n_states, n_actions, n = table.shape
    out = np.empty_like(table)
    successor = mdp.transitions[:, :, :, None] * mdp.policy[None, None, :, :]
    for s in range(n_states):
        for a in range(n_actions):
            atoms = mdp.rewards[s, a] + mdp.gamma * table  # (S, A, N)
            weights = np.repeat(successor[s, a][:, :, None] / n, n, axis=2)
            out[s, a] = project_quantiles(atoms.ravel(), weights.ravel(), n)
    return out


def max_w1(table_a: np.ndarray, table_b: np.ndarray) -> float:
    n_states, n_actions, _ = table_a.shape
    return max(
        wasserstein1(table_a[s, a], table_b[s, a])
        for s in range(n_states)
        for a in range(n_actions)
    )


def wasserstein1_discrete(
    values_a: np.ndarray, weights_a: np.ndarray, values_b: np.ndarray, weights_b: np.ndarray
) -> float:
    """Exact W1 = integral of |F_a - F_b| between two finite weighted distributions."""
    support = np.unique(np.concatenate([values_a, values_b]))
    if support.size < 2:
        return 0.0
    wa = weights_a / np.sum(weights_a)
    wb = weights_b / np.sum(weights_b)
    cdf_a = np.array([np.sum(wa[values_a <= x]) for x in support[:-1]])
    cdf_b = np.array([np.sum(wb[values_b <= x]) for x in support[:-1]])
    return float(np.sum(np.abs(cdf_a - cdf_b) * np.diff(support)))


@suite("contraction")
def contraction_suite(pairs: int = 100, n: int = 16):
    """One projected Bellman application shrinks max-W1 by at most gamma + 0.01."""
    mdp = tabular_mdp()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(pairs):
        shape = (mdp.n_states, mdp.n_actions, n)
        z1 = np.sort(rng.normal(0.0, 5.0, size=shape), axis=-1)
        z2 = np.sort(rng.normal(rng.normal(0.0, 3.0), 5.0, size=shape), axis=-1)
        before = max_w1(z1, z2)
        after = max_w1(distributional_bellman(mdp, z1), distributional_bellman(mdp, z2))
        worst = max(worst, after / before)
    bound = mdp.gamma + 0.01
    failures = [] if worst <= bound else [f"contraction factor {worst:.4f} > {bound}"]
    return {"worst_factor": worst}, failures


@suite("fixed_point")
def fixed_point_suite(iterations: int = 200, n: int = 16):
    """Iterating the projected operator recovers the linear-algebra Q^pi in the mean."""
    mdp = tabular_mdp()
    table = np.zeros((mdp.n_states, mdp.n_actions, n))
    for _ in range(iterations):
        table = distributional_bellman(mdp, table)
    err = float(np.max(np.abs(table.mean(axis=-1) - solve_q(mdp))))
    failures = [] if err <= 1e-6 else [f"mean(theta) differs from Q^pi by {err:.2e}"]
    return {"max_abs_error": err}, failures


# ============ ENVIRONMENTS ============


@suite("env_invariants")
def env_invariants_suite(samples: int = 2000):
    """Reward bounds, bandit symmetry, pendulum fixed point and energy drift."""
    rng = np.random.default_rng(0)
    checks: Dict[str, float] = {}
    failures: List[str] = []

    bandit = make_env("bimodal_bandit")
    actions = rng.uniform(-1.0, 1.0, size=(samples, 1))
    rewards = bandit.reward(actions)
    checks["bandit_asymmetry"] = float(np.max(np.abs(rewards - bandit.reward(-actions))))
    if checks["bandit_asymmetry"] != 0.0:
        failures.append("bandit reward is not symmetric")
    if not (np.all(rewards > 0.0) and np.all(rewards <= 1.0 + np.exp(-72.0))):
        failures.append("bandit reward out of (0, 1 + exp(-72)]")

    pendulum = make_env("pendulum_swingup")
    obs = pendulum.initial_observations(rng, samples)
    obs[:, 2] = rng.uniform(-8.0, 8.0, size=samples)
    _, rewards, _ = pendulum.dynamics(obs, rng.uniform(-1.0, 1.0, size=(samples, 1)))
    floor = -(np.pi**2 + 0.1 * 64.0 + 0.001 * 4.0)
    if not (np.all(rewards <= 0.0) and np.all(rewards >= floor)):
        failures.append("pendulum reward out of bounds")

    upright = pendulum.observe(np.zeros(1), np.zeros(1))
    next_obs, reward, _ = pendulum.dynamics(upright, np.zeros((1, 1)))
    if reward[0] != 0.0 or not np.array_equal(next_obs, upright):
        failures.append("pendulum upright state is not a fixed point")

    theta = rng.uniform(-np.pi, np.pi, size=samples)
    theta_dot = rng.uniform(-3.0, 3.0, size=samples)
    obs = pendulum.observe(theta, theta_dot)
    next_obs, _, _ = pendulum.dynamics(obs, np.zeros((samples, 1)))
    drift = np.abs(pendulum.energy(next_obs) - pendulum.energy(obs))
    scale = pendulum.m * pendulum.g * pendulum.l
    checks["energy_drift_fraction"] = float(np.max(drift) / scale)
    if checks["energy_drift_fraction"] >= 0.02:
        failures.append(f"pendulum energy drift {checks['energy_drift_fraction']:.4f} >= 2%")

    return checks, failures


# ============ AUTODIFF DETERMINISM ============


def _critic_loss_graph(critics: CriticEnsemble, seed: int) -> Tuple[CompGraph, dc.Node]:
    rng = np.random.default_rng(seed)
    batch = distcritic.CriticBatch(
        s=rng.standard_normal((5, 2)), a=rng.uniform(-1.0, 1.0, size=(5, 1)),
        r=rng.standard_normal(5), s_next=rng.standard_normal((5, 2)),
        terminal=(rng.uniform(size=5) < 0.3).astype(np.float64),
    )
    targets = rng.standard_normal((5, 4))
    graph = CompGraph()
    return graph, distcritic.critic_loss(critics, 0, graph, batch, targets, 1.0)


def _grad_snapshot(params: dc.ParamSet) -> Dict[str, np.ndarray]:
    return {entry.name: entry.grad.copy() for entry in params}


def _bit_identical(a: Dict[str, np.ndarray], b: Dict[str, np.ndarray]) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


@suite("backward_determinism")
def backward_determinism_suite(seeds: int = 5):
    """The same graph and seed give bit-identical gradients, rebuilt or re-run."""
    checks: Dict[str, float] = {}
    failures: List[str] = []
    for seed in range(seeds):
        policy, critics, states = _small_flow_setup(seed)
        params = critics.members[0].params

        runs = []
        for _ in range(2):
            graph, loss = _critic_loss_graph(critics, seed)
            params.zero_grads()
            graph.backward(loss)
            runs.append(_grad_snapshot(params))
        if not _bit_identical(*runs):
            failures.append(f"seed {seed}: rebuilt critic graph gave different gradients")

        graph, loss = _critic_loss_graph(critics, seed)
        replays = []
        for _ in range(2):
            params.zero_grads()
            graph.backward(loss)
            replays.append(_grad_snapshot(params))
        if not _bit_identical(*replays) or not _bit_identical(runs[0], replays[0]):
            failures.append(f"seed {seed}: repeated backward on one graph drifted")

        actor_runs = []
        for _ in range(2):
            graph = CompGraph()
            sample = policy.sample(graph, states, np.random.default_rng(seed + 1))
            loss = policy_loss(sample.log_prob, critics.min_mean(graph, states, sample.action), 0.2)
            policy.params.zero_grads()
            graph.backward(loss)
            actor_runs.append(_grad_snapshot(policy.params))
        if not _bit_identical(*actor_runs):
            failures.append(f"seed {seed}: actor gradients differ between identical graphs")
    checks["seeds"] = float(seeds)
    return checks, failures


@suite("graph_replay")
def graph_replay_suite(seeds: int = 5):
    """Forward passes on the same inputs reproduce every output bit for bit."""
    checks: Dict[str, float] = {}
    failures: List[str] = []
    for seed in range(seeds):
        policy, critics, states = _small_flow_setup(seed)
        samples = [
            policy.sample(CompGraph(), states, np.random.default_rng(seed + 1), trainable=False)
            for _ in range(2)
        ]
        first, second = samples
        if not (
            np.array_equal(first.action_value, second.action_value)
            and np.array_equal(first.log_prob_value, second.log_prob_value)
        ):
            failures.append(f"seed {seed}: policy sample changed between replays")

        bound = policy.sample(CompGraph(), states, np.random.default_rng(seed + 1), trainable=True)
        if not np.array_equal(bound.action_value, first.action_value):
            failures.append(f"seed {seed}: trainable binding changed the forward value")

        actions = first.action_value
        outputs = [
            critics.quantiles(states, actions, which=1, graph=CompGraph()).values
            for _ in range(2)
        ]
        if not np.array_equal(*outputs):
            failures.append(f"seed {seed}: critic quantiles changed between replays")
        if not np.array_equal(outputs[0], critics.quantiles(states, actions, which=1).values):
            failures.append(f"seed {seed}: recorded and eager critic outputs differ")
    checks["seeds"] = float(seeds)
    return checks, failures


@suite("adam_zero_grad")
def adam_zero_grad_suite(seeds: int = 5):
    """A fresh Adam state fed zero gradients leaves parameters bit-identical."""
    checks: Dict[str, float] = {}
    failures: List[str] = []
    for seed in range(seeds):
        policy, critics, _ = _small_flow_setup(seed)
        for params in (policy.params, critics.members[0].params):
            before = params.values()
            params.zero_grads()
            state = dc.AdamState.for_params(params, lr=10.0 ** -(seed + 1))
            dc.adam_step(params, state)
            if state.t != 1:
                failures.append(f"{params.name}: step counter {state.t} after one step")
            if not _bit_identical(before, params.values()):
                failures.append(f"seed {seed}: {params.name} moved under zero gradients")
    checks["seeds"] = float(seeds)
    return checks, failures


# ============ EULER INTEGRATION ============


@suite("euler_exactness")
def euler_exactness_suite(steps: Sequence[int] = (1, 2, 4, 7, 10, 12, 50)):
    """A constant velocity c moves every start point to A_0 + c for any step count."""
    rng = np.random.default_rng(0)
    checks: Dict[str, float] = {}
    failures: List[str] = []
    a0 = rng.standard_normal((32, 3))
    c = rng.standard_normal(3)
    state = np.zeros((32, 1))
    for k in steps:
        rollout = flow_rollout(constant_field(c), state, a0, k, with_trace=False)
        err = float(np.max(np.abs(dc.value_of(rollout.points[-1]) - (a0 + c))))
        checks[f"K={k}"] = err
        if err > 1e-12:
            failures.append(f"K={k}: endpoint off by {err:.2e}")
    return checks, failures


# ============ TARGET CRITICS ============


def _target_inputs(rng: np.random.Generator, batch: int = 64, n: int = 8, critics: int = 2):
    r = rng.standard_normal(batch)
    terminal = (rng.uniform(size=batch) < 0.3).astype(np.float64)
    next_quantiles = [np.sort(rng.standard_normal((batch, n)), axis=1) for _ in range(critics)]
    next_log_prob = rng.standard_normal(batch)
    return r, terminal, next_quantiles, next_log_prob


@suite("ema_fixed_point")
def ema_fixed_point_suite(rates: Sequence[float] = (0.0, 0.005, 0.5, 1.0)):
    """With target equal to online, the EMA update is the identity up to round-off."""
    checks: Dict[str, float] = {}
    failures: List[str] = []
    _, critics, _ = _small_flow_setup(0)
    member = critics.members[0]
    member.target.assign(member.params)
    for rate in rates:
        distcritic.ema_update(member.params, member.target, rate)
        err = max(
            float(np.max(np.abs(entry.value - member.params[entry.name].value)
                         / np.maximum(np.abs(entry.value), 1.0)))
            for entry in member.target
        )
        checks[f"rate={rate}"] = err
        if err > 4.0 * np.finfo(np.float64).eps:
            failures.append(f"rate {rate}: target drifted by {err:.2e}")
    return checks, failures


@suite("target_equivariance")
def target_equivariance_suite(cases: int = 200, gamma: float = 0.99, alpha: float = 0.2):
    """Shifting every target critic by c shifts targets by gamma * c on continuing rows."""
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(cases):
        r, terminal, next_quantiles, next_log_prob = _target_inputs(rng)
        c = float(rng.uniform(-10.0, 10.0))
        base = distcritic.soft_target_quantiles(
            r, terminal, next_quantiles, next_log_prob, alpha, gamma
        )
        shifted = distcritic.soft_target_quantiles(
            r, terminal, [q + c for q in next_quantiles], next_log_prob, alpha, gamma
        )
        expected = base + gamma * c * (1.0 - terminal)[:, None]
        worst = max(worst, float(np.max(np.abs(shifted - expected))))
    failures = [] if worst <= 1e-10 else [f"translation error {worst:.2e} > 1e-10"]
    return {"max_error": worst}, failures


@suite("min_rule")
def min_rule_suite(cases: int = 200, gamma: float = 0.99, alpha: float = 0.2):
    """The bootstrapped mean never exceeds any single target critic's soft mean."""
    rng = np.random.default_rng(0)
    worst = -np.inf
    for _ in range(cases):
        r, _, next_quantiles, next_log_prob = _target_inputs(rng, critics=int(rng.integers(1, 4)))
        terminal = np.zeros_like(r)
        targets = distcritic.soft_target_quantiles(
            r, terminal, next_quantiles, next_log_prob, alpha, gamma
        )
        bootstrap = np.mean((targets - r[:, None]) / gamma, axis=1)
        for q in next_quantiles:
            soft_mean = np.mean(q, axis=1) - alpha * next_log_prob
            worst = max(worst, float(np.max(bootstrap - soft_mean)))
    failures = [] if worst <= 1e-10 else [f"bootstrap mean exceeds a critic by {worst:.2e}"]
    return {"max_excess": worst}, failures


# ============ ENVIRONMENT ROLLOUTS ============


@suite("env_determinism")
def env_determinism_suite(seeds: int = 5, steps: int = 50):
    """One seed and one action sequence reproduce every reset and transition."""
    checks: Dict[str, float] = {}
    failures: List[str] = []
    for name in ("bimodal_bandit", "two_goal_point_mass", "pendulum_swingup"):
        env = make_env(name)
        for seed in range(seeds):
            actions = np.random.default_rng(seed + 100).uniform(
                env.spec.action_low, env.spec.action_high, size=(steps, env.spec.action_dim)
            )
            traces = []
            for _ in range(2):
                rng = np.random.default_rng(seed)
                state = env.reset(rng)
                trace = [state.observation.copy()]
                for action in actions:
                    transition, state = env.step(state, action, rng)
                    trace.append((transition.r, transition.terminal, transition.truncated))
                    trace.append(transition.s_next.copy())
                    if transition.terminal or transition.truncated:
                        state = env.reset(rng)
                        trace.append(state.observation.copy())
                traces.append(trace)
            same = len(traces[0]) == len(traces[1]) and all(
                np.array_equal(np.asarray(x), np.asarray(y)) for x, y in zip(*traces)
            )
            if not same:
                failures.append(f"{name} seed {seed}: replay diverged")
        checks[name] = float(seeds)
    return checks, failures


@suite("horizon_truncation")
def horizon_truncation_suite():
    """truncated is raised exactly at step == horizon, and never alongside terminal."""
    checks: Dict[str, float] = {}
    failures: List[str] = []
    for name in ("bimodal_bandit", "two_goal_point_mass", "pendulum_swingup"):
        env = make_env(name)
        horizon = env.spec.horizon
        state = env.reset(np.random.default_rng(0))
        action = np.zeros(env.spec.action_dim)
        flags = []
        for _ in range(horizon):
            transition, state = env.step(state, action)
            flags.append(transition.truncated)
            if transition.terminal:
                break
        if name == "bimodal_bandit":
            # every bandit pull ends the episode as a genuine terminal
            if not transition.terminal or any(flags):
                failures.append("bandit pull must be terminal and never truncated")
        elif transition.terminal or flags != [False] * (horizon - 1) + [True]:
            failures.append(f"{name}: truncation not raised exactly at step {horizon}")
        checks[name] = float(len(flags))

    point_mass = make_env("two_goal_point_mass")
    at_goal = np.concatenate([point_mass.goals[0], np.zeros(2)])
    last = EnvState(at_goal, point_mass.spec.horizon - 1)
    transition, _ = point_mass.step(last, np.zeros(2))
    if not transition.terminal or transition.truncated:
        failures.append("terminal step at the horizon was flagged as truncated")
    return checks, failures


# ============ REPLAY AND TARGET ISOLATION ============


@suite("replay_uniformity")
def replay_uniformity_suite(draws: int = 100_000, capacity: int = 100, seeds: int = 3):
    """Replay indices are uniform over stored transitions (chi-square p > 0.001)."""
    checks: Dict[str, float] = {}
    failures: List[str] = []
    for seed in range(seeds):
        buffer = ReplayBuffer(capacity, state_dim=1, action_dim=1)
        # wrap the ring once so overwritten slots count too
        for i in range(capacity + capacity // 2):
            buffer.push(Transition(np.array([i]), np.zeros(1), 0.0, np.zeros(1), False))
        counts = np.bincount(
            buffer.sample_indices(draws, np.random.default_rng(seed)), minlength=capacity
        )
        p_value = float(stats.chisquare(counts).pvalue)
        checks[f"p_value_seed{seed}"] = p_value
        if counts.size != capacity or p_value <= 1e-3:
            failures.append(f"seed {seed}: replay sampling not uniform (p = {p_value:.2e})")
    return checks, failures


@suite("target_leakage")
def target_leakage_suite(seeds: int = 3):
    """Critic loss never reaches target params; the actor loss never reaches critic params."""
    checks: Dict[str, float] = {}
    failures: List[str] = []
    for seed in range(seeds):
        policy, critics, states = _small_flow_setup(seed)
        for member in critics.members:
            member.target.zero_grads()

        rng = np.random.default_rng(seed)
        batch = distcritic.CriticBatch(
            s=states, a=rng.uniform(-1.0, 1.0, size=(3, 1)), r=rng.standard_normal(3),
            s_next=states, terminal=np.zeros(3),
        )
        sample = policy.sample(CompGraph(), states, rng, trainable=False)
        targets = distcritic.compute_targets(
            critics, batch, sample.action_value, sample.log_prob_value, 0.2, 0.99
        )
        for which in range(len(critics)):
            graph = CompGraph()
            graph.backward(distcritic.critic_loss(critics, which, graph, batch, targets, 1.0))
        target_grad = max(
            float(np.max(np.abs(entry.grad))) for m in critics.members for entry in m.target
        )
        checks[f"target_grad_seed{seed}"] = target_grad
        if target_grad != 0.0:
            failures.append(f"seed {seed}: critic loss leaked {target_grad:.2e} into targets")

        for member in critics.members:
            member.params.zero_grads()
        policy.params.zero_grads()
        graph = CompGraph()
        sample = policy.sample(graph, states, np.random.default_rng(seed + 1))
        loss = policy_loss(sample.log_prob, critics.min_mean(graph, states, sample.action), 0.2)
        graph.backward(loss)
        critic_grad = max(
            float(np.max(np.abs(entry.grad))) for m in critics.members for entry in m.params
        )
        actor_grad = max(float(np.max(np.abs(entry.grad))) for entry in policy.params)
        checks[f"critic_grad_seed{seed}"] = critic_grad
        if critic_grad != 0.0:
            failures.append(f"seed {seed}: actor loss leaked {critic_grad:.2e} into critics")
        if actor_grad == 0.0:
            failures.append(f"seed {seed}: actor loss produced no policy gradient")
    return checks, failures
