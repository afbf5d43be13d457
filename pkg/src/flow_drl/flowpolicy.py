"""
Flow-matching policy

Actions are produced by integrating a learned, state-conditioned velocity
field from a standard-normal prior point A_0 to A_1 with K Euler steps on the
uniform grid t_i = i/K, then squashing with tanh:

    A_{i+1} = A_i + (1/K) * v(t_i, A_0..A_i, s)
    log pi(a|s) = log N(A_0) - sum_i (1/K) Tr(dv/dA_i) - sum_k log(1 - tanh(A_1k)^2 + eps)

The velocity field is a small causal transformer over the token sequence
[state, (A_0, t_0), ..., (A_i, t_i)], read out at the last token. The trace
term is computed exactly from d Jacobian columns or estimated with
Rademacher probes (Hutchinson); either way it stays on the graph, so the
log-probability is differentiable in the policy parameters.

GaussianPolicy is the squashed-Gaussian actor used by the policy ablation.

Copyright (c) 2026 flow-drl authors
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .config import Config
from .core import diffcore as dc
from .core.diffcore import CompGraph, NonFiniteError, Operand, ParamSet, ShapeError, value_of
from .core.layers import dense, init_dense, init_mlp, mlp

logger = logging.getLogger("flow-drl")

SQUASH_EPS = 1e-6
LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
MASK_VALUE = -1e9
TIME_BASE = 100.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

# field(times t_0..t_i, history A_0..A_i, state) -> velocity at the last point
VelocityField = Callable[[Sequence[float], Sequence[Operand], Operand], Operand]


class RolloutError(NonFiniteError):
    """A flow point went non-finite; `rollout` holds the points reached so far."""

    def __init__(self, message: str, rollout: "FlowRollout"):
        super().__init__(message, payload={"step": len(rollout.points) - 1})
        self.rollout = rollout


@dataclass(frozen=True)
class VelocityNetConfig:
    action_dim: int
    state_dim: int
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    flow_steps: int = 4
    time_frequencies: int = 16

    def __post_init__(self):
        for key in ("action_dim", "state_dim", "d_model", "heads", "layers", "flow_steps"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by heads ({self.heads})")


@dataclass
class FlowRollout:
    times: np.ndarray
    points: List[Operand]
    step_sizes: np.ndarray
    trace_integral: Optional[Operand]
    log_p0: np.ndarray

    def point_values(self) -> np.ndarray:
        """(K+1, B, d) array of the flow points."""
        return np.stack([value_of(p) for p in self.points])


@dataclass
class PolicySample:
    pre_squash: Operand
    action: Operand
    log_prob: Operand

    @property
    def action_value(self) -> np.ndarray:
        return value_of(self.action)

    @property
    def log_prob_value(self) -> np.ndarray:
        return value_of(self.log_prob)


# ============ VELOCITY NETWORK ============


def time_features(t: float, frequencies: int) -> np.ndarray:
    """Sinusoidal embedding [sin(w_k t), cos(w_k t)] with geometric w_k in [1, TIME_BASE]."""
    omegas = TIME_BASE ** (np.arange(frequencies) / max(frequencies - 1, 1))
    return np.concatenate([np.sin(omegas * t), np.cos(omegas * t)])


def causal_mask(batch: int, heads: int, length: int) -> np.ndarray:
    """Additive mask of shape (B, H, L, L); MASK_VALUE above the diagonal."""
    upper = np.triu(np.ones((length, length)), k=1) * MASK_VALUE
    return np.broadcast_to(upper, (batch, heads, length, length)).copy()


def init_velocity_params(cfg: VelocityNetConfig, rng: np.random.Generator, name="actor"):
    params = ParamSet(name)
    dm = cfg.d_model
    init_dense(params, "state_embed", cfg.state_dim, dm, rng)
    init_dense(params, "action_embed", cfg.action_dim, dm, rng)
    init_dense(params, "time_embed", 2 * cfg.time_frequencies, dm, rng)
    for layer in range(cfg.layers):
        prefix = f"block{layer}"
        for proj in ("query", "key", "value", "out"):
            init_dense(params, f"{prefix}.{proj}", dm, dm, rng)
        init_dense(params, f"{prefix}.ff0", dm, 2 * dm, rng)
        init_dense(params, f"{prefix}.ff1", 2 * dm, dm, rng)
    init_dense(params, "head", dm, cfg.action_dim, rng, zero=True)
    return params


class TransformerVelocity:
    """Causal transformer velocity field over one weight binding.

    Two ways in: calling the field recomputes every token of the sequence,
    while `start(state)` returns a VelocityCache that takes one flow point
    per step and reuses the keys and values of the earlier tokens. Under the
    causal mask both give the same velocity.
    """

    def __init__(self, cfg: VelocityNetConfig, weights):
        self.cfg = cfg
        self.weights = weights

    # ---- token embedding ----

    def _check_state(self, state: Operand) -> int:
        state_shape = dc.shape_of(state)
        if len(state_shape) != 2 or state_shape[1] != self.cfg.state_dim:
            raise ShapeError(
                f"state shape {state_shape} does not match state_dim {self.cfg.state_dim}"
            )
        return state_shape[0]

    def _state_token(self, state: Operand, batch: int) -> Operand:
        return dc.reshape(dense(state, self.weights, "state_embed"), (batch, 1, self.cfg.d_model))

    def _point_token(self, t: float, point: Operand, batch: int) -> Operand:
        cfg = self.cfg
        if dc.shape_of(point) != (batch, cfg.action_dim):
            raise ShapeError(
                f"flow point shape {dc.shape_of(point)} does not match "
                f"(batch={batch}, action_dim={cfg.action_dim})"
            )
        feats = np.tile(time_features(t, cfg.time_frequencies), (batch, 1))
        embedded = dc.add(
            dense(point, self.weights, "action_embed"),
            dense(feats, self.weights, "time_embed"),
        )
        return dc.reshape(embedded, (batch, 1, cfg.d_model))

    # ---- attention ----

    def _split_heads(self, z: Operand) -> Operand:
        """(B, L, d_model) -> (B, H, L, d_model / H)"""
        batch, length, _ = dc.shape_of(z)
        heads = self.cfg.heads
        split = dc.reshape(z, (batch, length, heads, self.cfg.d_model // heads))
        return dc.swapaxes(split, 1, 2)

    def _merge_heads(self, z: Operand) -> Operand:
        batch, _, length, _ = dc.shape_of(z)
        return dc.reshape(dc.swapaxes(z, 1, 2), (batch, length, self.cfg.d_model))

    def _projections(self, x: Operand, prefix: str) -> Tuple[Operand, Operand, Operand]:
        return tuple(
            self._split_heads(dense(x, self.weights, f"{prefix}.{proj}"))
            for proj in ("query", "key", "value")
        )

    def _attend(self, q: Operand, k: Operand, v: Operand, mask: Optional[np.ndarray]) -> Operand:
        """All heads at once: softmax(q k^T / sqrt(d_head) + mask) v, merged back."""
        dh = self.cfg.d_model // self.cfg.heads
        scores = dc.scale(dc.matmul(q, dc.transpose(k)), 1.0 / np.sqrt(dh))
        if mask is not None:
            scores = dc.add(scores, mask)
        return self._merge_heads(dc.matmul(dc.softmax(scores), v))

    def _residual(self, x: Operand, attended: Operand, prefix: str) -> Operand:
        w = self.weights
        x = dc.add(x, dense(attended, w, f"{prefix}.out"))
        hidden = dc.relu(dense(x, w, f"{prefix}.ff0"))
        return dc.add(x, dense(hidden, w, f"{prefix}.ff1"))

    def _attention_block(self, x: Operand, mask: np.ndarray, prefix: str) -> Operand:
        q, k, v = self._projections(x, prefix)
        return self._residual(x, self._attend(q, k, v, mask), prefix)

    # ---- full sequence ----

    def token_outputs(
        self, times: Sequence[float], history: Sequence[Operand], state: Operand
    ) -> Operand:
        """Head output at every token position, shape (B, 1 + len(history), d)."""
        cfg = self.cfg
        if not history:
            raise ValueError("velocity needs at least one flow point")
        if len(times) != len(history):
            raise ValueError(f"{len(times)} times for {len(history)} flow points")
        batch = self._check_state(state)

        tokens = [self._state_token(state, batch)]
        tokens.extend(self._point_token(t, point, batch) for t, point in zip(times, history))
        x = dc.concat(tokens, axis=1)
        mask = causal_mask(batch, cfg.heads, len(tokens))
        for layer in range(cfg.layers):
            x = self._attention_block(x, mask, f"block{layer}")
        return dense(x, self.weights, "head")

    def __call__(self, times, history, state) -> Operand:
        out = self.token_outputs(times, history, state)
        length = dc.shape_of(out)[1]
        last = dc.slice_(out, 1, length - 1, length)
        return dc.reshape(last, (dc.shape_of(out)[0], self.cfg.action_dim))

    # ---- incremental ----

    def start(self, state: Operand) -> "VelocityCache":
        return VelocityCache(self, state)


class VelocityCache:
    """Per-block keys and values of the tokens fed so far.

    The state token goes in on construction; each `step(t, point)` appends
    one flow-point token and returns the velocity read out at it. Only the
    new token's path is recorded, so a Jacobian of the returned velocity
    with respect to `point` never walks back through earlier tokens.
    """

    def __init__(self, net: TransformerVelocity, state: Operand):
        self.net = net
        self.batch = net._check_state(state)
        self.keys: List[Optional[Operand]] = [None] * net.cfg.layers
        self.values: List[Optional[Operand]] = [None] * net.cfg.layers
        self.length = 0
        self._advance(net._state_token(state, self.batch))

    def _advance(self, x: Operand) -> Operand:
        net = self.net
        for layer in range(net.cfg.layers):
            prefix = f"block{layer}"
            q, k, v = net._projections(x, prefix)
            if self.keys[layer] is not None:
                k = dc.concat([self.keys[layer], k], axis=2)
                v = dc.concat([self.values[layer], v], axis=2)
            self.keys[layer], self.values[layer] = k, v
            x = net._residual(x, net._attend(q, k, v, None), prefix)
        self.length += 1
        return x

    def step(self, t: float, point: Operand) -> Operand:
        """Velocity at `point`, the newest flow point, shape (B, d)."""
        x = self._advance(self.net._point_token(t, point, self.batch))
        out = dense(x, self.net.weights, "head")
        return dc.reshape(out, (self.batch, self.net.cfg.action_dim))


def velocity(t: float, history: Sequence[Operand], s: Operand, params, cfg: VelocityNetConfig):
    """Velocity at time t given history A_0..A_i (tokens spaced on the grid ending at t)."""
    weights = params.values() if isinstance(params, ParamSet) else params
    n = len(history)
    times = [t * j / (n - 1) for j in range(n)] if n > 1 else [t]
    return TransformerVelocity(cfg, weights)(times, history, s)


# ============ TRACE ============


def _diagonal_sum(columns: List[Operand]) -> Operand:
    """sum_j columns[j][:, j] -> (B,)"""
    picks = [dc.slice_(col, -1, j, j + 1) for j, col in enumerate(columns)]
    stacked = dc.concat(picks, axis=-1) if len(picks) > 1 else picks[0]
    return dc.sum(stacked, axis=-1)


def exact_trace_node(graph: CompGraph, v: dc.Node, point: dc.Node) -> Operand:
    """Tr(dv/dpoint) per batch row from d Jacobian columns (one backward pass each)."""
    d = point.shape[-1]
    return _diagonal_sum([graph.jacobian_column(v, point, j) for j in range(d)])


def hutchinson_trace_node(
    graph: CompGraph, v: dc.Node, point: dc.Node, probes: int, rng: np.random.Generator
) -> Operand:
    """Mean of eps^T (dv/dpoint) eps over Rademacher probes, per batch row."""
    if probes < 1:
        raise ValueError("probes must be >= 1")
    estimates = []
    for _ in range(probes):
        eps = rng.choice((-1.0, 1.0), size=point.shape)
        vjp = graph.vjp(v, point, eps)
        estimates.append(dc.sum(dc.mul(vjp, eps), axis=-1))
    total = estimates[0]
    for estimate in estimates[1:]:
        total = dc.add(total, estimate)
    return dc.scale(total, 1.0 / probes)


def _point_on_graph(field: VelocityField, t, history, s):
    graph = CompGraph()
    nodes = [graph.constant(h) for h in history]
    v = field([t * j / max(len(history) - 1, 1) for j in range(len(history))], nodes, s)
    return graph, graph.lift(v), nodes[-1]


def exact_trace(field: VelocityField, t: float, history, s) -> np.ndarray:
    """Exact divergence of a velocity field at the last history point."""
    graph, v, point = _point_on_graph(field, t, history, s)
    return np.asarray(value_of(exact_trace_node(graph, v, point)))


def hutchinson_trace(
    field: VelocityField, t: float, history, s, probes: int, rng: np.random.Generator
) -> np.ndarray:
    graph, v, point = _point_on_graph(field, t, history, s)
    return np.asarray(value_of(hutchinson_trace_node(graph, v, point, probes, rng)))


def resolve_trace_mode(mode: str, action_dim: int) -> str:
    if mode == "exact" and action_dim > Config.EXACT_TRACE_CUTOFF:
        logger.debug(
            f"[ACTOR] action_dim {action_dim} exceeds exact-trace cutoff "
            f"{Config.EXACT_TRACE_CUTOFF}; using Hutchinson"
        )
        return "hutchinson"
    return mode


# ============ ROLLOUT AND LOG-PROB ============


def standard_normal_log_density(a0: np.ndarray) -> np.ndarray:
    return -0.5 * np.sum(a0**2, axis=-1) - a0.shape[-1] * HALF_LOG_2PI


def flow_rollout(
    field: VelocityField,
    state: Operand,
    a0: np.ndarray,
    flow_steps: int,
    graph: Optional[CompGraph] = None,
    with_trace: bool = True,
    trace: str = "exact",
    probes: int = 1,
    probe_rng: Optional[np.random.Generator] = None,
) -> FlowRollout:
    """Euler-integrate `field` from a0; accumulate the trace integral when asked.

    Without a graph and without the trace, the rollout runs eagerly on arrays.
    A field that offers `start(state)` is fed one point per step through the
    returned cache; plain callables see the whole history every step.

    Raises:
        RolloutError: if a flow point becomes non-finite.
    """
    if flow_steps < 1:
        raise ValueError("flow_steps must be >= 1")
    if with_trace and graph is None:
        graph = CompGraph()
    if trace == "hutchinson" and probe_rng is None:
        raise ValueError("Hutchinson trace needs a probe rng")

    a0 = dc.as_dense(a0)
    dt = 1.0 / flow_steps
    times = np.arange(flow_steps + 1) / flow_steps
    point: Operand = graph.constant(a0) if graph is not None else a0
    rollout = FlowRollout(
        times=times,
        points=[point],
        step_sizes=np.full(flow_steps, dt),
        trace_integral=None,
        log_p0=standard_normal_log_density(a0),
    )
    cache = field.start(state) if hasattr(field, "start") else None

    for i in range(flow_steps):
        if cache is not None:
            v = cache.step(float(times[i]), point)
        else:
            v = field(list(times[: i + 1]), rollout.points, state)
        if with_trace:
            v = graph.lift(v)
            if trace == "exact":
                tr = exact_trace_node(graph, v, point)
            else:
                tr = hutchinson_trace_node(graph, v, point, probes, probe_rng)
            term = dc.scale(tr, dt)
            rollout.trace_integral = (
                term if rollout.trace_integral is None else dc.add(rollout.trace_integral, term)
            )
        point = dc.add(point, dc.scale(v, dt))
        rollout.points.append(point)
        if not np.all(np.isfinite(value_of(point))):
            raise RolloutError(f"non-finite flow point at step {i + 1} of {flow_steps}", rollout)
    return rollout


def squash_correction(pre_squash: Operand) -> Operand:
    """sum_k log(1 - tanh(x_k)^2 + eps), shape (B,)"""
    return dc.sum(dc.log(dc.add(dc.sub(1.0, dc.square(dc.tanh(pre_squash))), SQUASH_EPS)), axis=-1)


def pre_squash_log_prob(rollout: FlowRollout) -> Operand:
    if rollout.trace_integral is None:
        raise ValueError("rollout was run without the trace integral")
    return dc.sub(rollout.log_p0, rollout.trace_integral)


def log_prob(rollout: FlowRollout) -> Operand:
    """log pi of the squashed action produced by the rollout, shape (B,)."""
    return dc.sub(pre_squash_log_prob(rollout), squash_correction(rollout.points[-1]))


def sample_action(
    field: VelocityField,
    s: Operand,
    rng: np.random.Generator,
    flow_steps: int,
    action_dim: int,
    graph: Optional[CompGraph] = None,
    deterministic: bool = False,
    trace: str = "exact",
    probes: int = 1,
    probe_rng: Optional[np.random.Generator] = None,
) -> Tuple[PolicySample, FlowRollout]:
    batch = dc.shape_of(s)[0]
    if deterministic:
        a0 = np.zeros((batch, action_dim))
    else:
        a0 = rng.standard_normal((batch, action_dim))
    rollout = flow_rollout(
        field, s, a0, flow_steps, graph=graph, trace=trace, probes=probes, probe_rng=probe_rng
    )
    final = rollout.points[-1]
    sample = PolicySample(pre_squash=final, action=dc.tanh(final), log_prob=log_prob(rollout))
    if not np.all(np.isfinite(sample.log_prob_value)):
        raise RolloutError("non-finite log-probability", rollout)
    return sample, rollout


# ============ POLICIES ============


class FlowPolicy:
    """Flow-matching actor with a transformer velocity field."""

    kind = "flow"

    def __init__(
        self,
        net: VelocityNetConfig,
        rng: np.random.Generator,
        trace: str = "exact",
        probes: int = 1,
    ):
        self.net = net
        self.params = init_velocity_params(net, rng)
        self.trace = resolve_trace_mode(trace, net.action_dim)
        self.probes = probes

    @property
    def action_dim(self) -> int:
        return self.net.action_dim

    def field(self, weights) -> TransformerVelocity:
        return TransformerVelocity(self.net, weights)

    def sample(
        self,
        graph: CompGraph,
        states: Operand,
        rng: np.random.Generator,
        trainable: bool = True,
        deterministic: bool = False,
        probe_rng: Optional[np.random.Generator] = None,
    ) -> PolicySample:
        weights = graph.bind(self.params, trainable=trainable)
        sample, _ = sample_action(
            self.field(weights),
            states,
            rng,
            self.net.flow_steps,
            self.net.action_dim,
            graph=graph,
            deterministic=deterministic,
            trace=self.trace,
            probes=self.probes,
            probe_rng=probe_rng,
        )
        return sample

    def act(
        self, observations: np.ndarray, rng: Optional[np.random.Generator] = None,
        deterministic: bool = True,
    ) -> np.ndarray:
        """Squashed actions for a batch of observations, no graph and no log-prob."""
        observations = np.atleast_2d(observations)
        batch = observations.shape[0]
        if deterministic:
            a0 = np.zeros((batch, self.action_dim))
        else:
            a0 = rng.standard_normal((batch, self.action_dim))
        rollout = flow_rollout(
            self.field(self.params.values()), observations, a0, self.net.flow_steps,
            with_trace=False,
        )
        return np.tanh(value_of(rollout.points[-1]))


class GaussianPolicy:
    """Squashed diagonal Gaussian actor on a three-layer ReLU MLP."""

    kind = "gaussian"

    def __init__(
        self, state_dim: int, action_dim: int, hidden_dim: int, rng: np.random.Generator
    ):
        self.state_dim = state_dim
        self._action_dim = action_dim
        self.params = ParamSet("actor")
        init_mlp(self.params, "mlp", [state_dim, hidden_dim, hidden_dim], rng)
        init_dense(self.params, "mlp2", hidden_dim, 2 * action_dim, rng, zero=True)

    @property
    def action_dim(self) -> int:
        return self._action_dim

    def distribution(self, weights, states: Operand) -> Tuple[Operand, Operand]:
        """(mean, log_std), each (B, d); log_std clamped to [LOG_STD_MIN, LOG_STD_MAX]."""
        if dc.shape_of(states)[-1] != self.state_dim:
            raise ShapeError(
                f"state shape {dc.shape_of(states)} does not match state_dim {self.state_dim}"
            )
        out = mlp(states, weights, "mlp", 3)
        d = self._action_dim
        mean = dc.slice_(out, -1, 0, d)
        log_std = dc.clip(dc.slice_(out, -1, d, 2 * d), LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def sample(
        self,
        graph: CompGraph,
        states: Operand,
        rng: np.random.Generator,
        trainable: bool = True,
        deterministic: bool = False,
        probe_rng: Optional[np.random.Generator] = None,
    ) -> PolicySample:
        weights = graph.bind(self.params, trainable=trainable)
        return gaussian_policy_sample(self, weights, states, rng, deterministic)

    def act(
        self, observations: np.ndarray, rng: Optional[np.random.Generator] = None,
        deterministic: bool = True,
    ) -> np.ndarray:
        observations = np.atleast_2d(observations)
        mean, log_std = self.distribution(self.params.values(), observations)
        if deterministic:
            return np.tanh(mean)
        noise = rng.standard_normal(mean.shape)
        return np.tanh(mean + np.exp(log_std) * noise)


def gaussian_policy_sample(
    policy: GaussianPolicy,
    weights,
    s: Operand,
    rng: np.random.Generator,
    deterministic: bool = False,
) -> PolicySample:
    """Reparameterized squashed-Gaussian sample and its log-probability."""
    mean, log_std = policy.distribution(weights, s)
    shape = dc.shape_of(mean)
    noise = np.zeros(shape) if deterministic else rng.standard_normal(shape)
    pre_squash = dc.add(mean, dc.mul(dc.exp(log_std), noise))
    base = dc.sub(
        dc.sum(dc.add(dc.scale(log_std, -1.0), -0.5 * noise**2), axis=-1),
        np.full(shape[:-1], shape[-1] * HALF_LOG_2PI),
    )
    return PolicySample(
        pre_squash=pre_squash,
        action=dc.tanh(pre_squash),
        log_prob=dc.sub(base, squash_correction(pre_squash)),
    )

