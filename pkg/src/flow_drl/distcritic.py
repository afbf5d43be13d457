"""
Quantile-regression distributional critic

Each critic maps concat(s, a) through a three-layer ReLU MLP to N quantile
locations theta_1..theta_N at the fixed fractions tau_i = (2i-1)/(2N); the
return distribution is the uniform Dirac mixture over those locations and
its mean is the scalar Q.

Targets are entropy-augmented and bootstrapped from EMA target networks:

    y_j = r + gamma * (1 - terminal) * (theta'_j(s', a') - alpha * log pi(a'|s'))

With twin critics the bootstrap takes the whole quantile vector of the
target critic whose soft mean is smaller, per transition.

Copyright (c) 2026 flow-drl authors
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import diffcore as dc
from .core.diffcore import (
    AdamState,
    CompGraph,
    NonFiniteError,
    Operand,
    ParamSet,
    ShapeError,
    adam_step,
    value_of,
)
from .core.layers import init_mlp, mlp

logger = logging.getLogger("flow-drl")


def quantile_fractions(n: int) -> np.ndarray:
    """Midpoint fractions (2i-1)/(2N), i = 1..N."""
    if n < 1:
        raise ValueError("number of quantiles must be >= 1")
    return (2.0 * np.arange(1, n + 1) - 1.0) / (2.0 * n)


@dataclass
class QuantileEstimate:
    locations: Operand  # (B, N)
    fractions: np.ndarray  # (N,)

    @property
    def values(self) -> np.ndarray:
        return value_of(self.locations)

    @property
    def mean(self) -> np.ndarray:
        """Scalar Q per row."""
        return np.mean(self.values, axis=-1)


class QuantileCritic:
    """Online network plus its EMA target."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        n_quantiles: int,
        hidden_dim: int,
        rng: np.random.Generator,
        name: str = "critic",
    ):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.n_quantiles = n_quantiles
        self.fractions = quantile_fractions(n_quantiles)
        self.params = ParamSet(name)
        init_mlp(
            self.params,
            "mlp",
            [state_dim + action_dim, hidden_dim, hidden_dim, n_quantiles],
            rng,
            zero_last=True,
        )
        self.target = self.params.copy(f"{name}_target")

    def quantiles(self, weights, s: Operand, a: Operand) -> QuantileEstimate:
        s_shape, a_shape = dc.shape_of(s), dc.shape_of(a)
        if s_shape[-1] != self.state_dim or a_shape[-1] != self.action_dim:
            raise ShapeError(
                f"critic expects state dim {self.state_dim} and action dim {self.action_dim}, "
                f"got shapes {s_shape} and {a_shape}"
            )
        locations = mlp(dc.concat([s, a], axis=-1), weights, "mlp", 3)
        return QuantileEstimate(locations, self.fractions)

    def online_quantiles(self, s, a) -> QuantileEstimate:
        return self.quantiles(self.params.values(), s, a)

    def target_quantiles(self, s, a) -> QuantileEstimate:
        return self.quantiles(self.target.values(), s, a)


class CriticEnsemble:
    """One or two quantile critics with matching targets and optimizers.

    kind "mean" is the expectation-critic ablation: one output per critic,
    trained with squared TD error.
    """

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        n_quantiles: int,
        hidden_dim: int,
        rng: np.random.Generator,
        twin: bool = True,
        kind: str = "quantile",
        lr: float = 3e-4,
    ):
        if kind not in ("quantile", "mean"):
            raise ValueError(f"critic kind must be quantile or mean (got {kind!r})")
        self.kind = kind
        outputs = n_quantiles if kind == "quantile" else 1
        count = 2 if twin else 1
        self.members: List[QuantileCritic] = [
            QuantileCritic(state_dim, action_dim, outputs, hidden_dim, rng, name=f"critic{i + 1}")
            for i in range(count)
        ]
        self.optimizers: List[AdamState] = [
            AdamState.for_params(member.params, lr=lr) for member in self.members
        ]

    def __len__(self) -> int:
        return len(self.members)

    def quantiles(
        self, s, a, which: int = 0, target: bool = False, graph: Optional[CompGraph] = None,
        trainable: bool = True,
    ) -> QuantileEstimate:
        """Quantiles of one member; on a graph the online params bind as requested."""
        member = self.members[which]
        params = member.target if target else member.params
        weights = params.values() if graph is None else graph.bind(params, trainable=trainable)
        return member.quantiles(weights, s, a)

    def min_mean(self, graph: CompGraph, s: Operand, a: Operand) -> Operand:
        """Elementwise min over members of the quantile mean; critic params gradient-stopped."""
        means = [
            dc.mean(self.quantiles(s, a, which=i, graph=graph, trainable=False).locations, axis=-1)
            for i in range(len(self.members))
        ]
        result = means[0]
        for m in means[1:]:
            result = dc.minimum(result, m)
        return result

    def mean_q(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return np.min([member.online_quantiles(s, a).mean for member in self.members], axis=0)


# ============ TARGETS AND LOSSES ============


def soft_target_quantiles(
    r: np.ndarray,
    terminal: np.ndarray,
    next_quantiles: Sequence[np.ndarray],
    next_log_prob: np.ndarray,
    alpha: float,
    gamma: float,
) -> np.ndarray:
    """Entropy-augmented target quantiles (B, N), chosen by the min rule.

    Args:
        r: rewards (B,)
        terminal: terminal flags (B,); truncated transitions are not terminal
        next_quantiles: per target critic, quantiles at (s', a'), each (B, N)
        next_log_prob: log pi(a'|s') (B,)
        alpha: temperature
        gamma: discount

    Returns:
        Plain array; no gradient reaches the targets.
    """
    stacked = np.stack([np.asarray(q, dtype=np.float64) for q in next_quantiles])  # (C, B, N)
    entropy_term = alpha * np.asarray(next_log_prob, dtype=np.float64)
    soft = stacked - entropy_term[None, :, None]
    chosen = np.argmin(np.mean(soft, axis=-1), axis=0)  # ties go to the first critic
    bootstrap = soft[chosen, np.arange(soft.shape[1])]
    continuing = 1.0 - np.asarray(terminal, dtype=np.float64)
    return np.asarray(r, dtype=np.float64)[:, None] + gamma * continuing[:, None] * bootstrap


def huber(delta: np.ndarray, kappa: float) -> np.ndarray:
    abs_delta = np.abs(delta)
    return np.where(abs_delta <= kappa, 0.5 * delta**2, kappa * (abs_delta - 0.5 * kappa))


def quantile_huber_loss(current: Operand, targets: np.ndarray, kappa: float = 1.0) -> Operand:
    """Mean over (batch, i, j) of |tau_i - 1{delta_ij < 0}| * L_kappa(delta_ij).

    delta_ij = y_j - theta_i. Differentiable in `current` (B, N); `targets`
    (B, N') are constants.
    """
    if kappa <= 0.0:
        raise ValueError("kappa must be positive")
    targets = np.asarray(value_of(targets), dtype=np.float64)
    batch, n = dc.shape_of(current)
    if targets.ndim != 2 or targets.shape[0] != batch:
        raise ShapeError(f"targets shape {targets.shape} does not match quantiles {(batch, n)}")
    n_targets = targets.shape[1]
    shape = (batch, n, n_targets)
    tau = quantile_fractions(n)

    theta = dc.broadcast(dc.reshape(current, (batch, n, 1)), shape)
    delta = dc.sub(np.broadcast_to(targets[:, None, :], shape).copy(), theta)
    delta_value = value_of(delta)
    quadratic = (np.abs(delta_value) <= kappa).astype(np.float64)
    weight = np.abs(tau[None, :, None] - (delta_value < 0.0).astype(np.float64))

    quad_part = dc.mul(dc.scale(dc.square(delta), 0.5), quadratic)
    linear_part = dc.mul(dc.scale(dc.sub(dc.abs(delta), 0.5 * kappa), kappa), 1.0 - quadratic)
    return dc.mean(dc.mul(dc.add(quad_part, linear_part), weight))


def mean_critic_loss(prediction: Operand, targets: np.ndarray) -> Operand:
    """Un-halved squared TD error, mean over the batch."""
    targets = np.asarray(value_of(targets), dtype=np.float64)
    if dc.shape_of(prediction) != targets.shape:
        raise ShapeError(
            f"prediction shape {dc.shape_of(prediction)} vs targets shape {targets.shape}"
        )
    return dc.mean(dc.square(dc.sub(prediction, targets)))


def wasserstein1(a: np.ndarray, b: np.ndarray) -> float:
    """W1 between equal-size uniform quantile sets: mean absolute sorted difference."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.shape != b.shape:
        raise ShapeError(f"wasserstein1 needs equal-size sets, got {a.size} and {b.size}")
    return float(np.mean(np.abs(a - b)))


def ema_update(online: ParamSet, target: ParamSet, rate: float) -> ParamSet:
    """target <- (1 - rate) * target + rate * online, elementwise."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"EMA rate must lie in [0,1] (got {rate})")
    for entry in target:
        source = online[entry.name].value
        entry.value = (1.0 - rate) * entry.value + rate * source
    return target


# ============ UPDATE ============


@dataclass
class CriticBatch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray


def compute_targets(
    ensemble: CriticEnsemble,
    batch: CriticBatch,
    next_actions: np.ndarray,
    next_log_prob: np.ndarray,
    alpha: float,
    gamma: float,
) -> np.ndarray:
    next_quantiles = [
        ensemble.quantiles(batch.s_next, next_actions, which=i, target=True).values
        for i in range(len(ensemble))
    ]
    return soft_target_quantiles(
        batch.r, batch.terminal, next_quantiles, next_log_prob, alpha, gamma
    )


def critic_loss(
    ensemble: CriticEnsemble, which: int, graph: CompGraph, batch: CriticBatch,
    targets: np.ndarray, kappa: float,
) -> dc.Node:
    estimate = ensemble.quantiles(batch.s, batch.a, which=which, graph=graph)
    if ensemble.kind == "mean":
        prediction = dc.reshape(estimate.locations, (batch.s.shape[0],))
        return mean_critic_loss(prediction, targets[:, 0])
    return quantile_huber_loss(estimate.locations, targets, kappa)


def critic_update(
    ensemble: CriticEnsemble,
    batch: CriticBatch,
    targets: np.ndarray,
    kappa: float = 1.0,
) -> Dict[str, float]:
    """One Adam step per member against the same targets; returns per-critic losses.

    Raises:
        NonFiniteError: if a loss or gradient is not finite.
    """
    losses: Dict[str, float] = {}
    for i, (member, adam) in enumerate(zip(ensemble.members, ensemble.optimizers)):
        graph = CompGraph()
        loss = critic_loss(ensemble, i, graph, batch, targets, kappa)
        value = float(loss.value)
        if not np.isfinite(value):
            raise NonFiniteError(
                f"non-finite loss in critic {i + 1}", payload={"critic": i + 1, "loss": value}
            )
        member.params.zero_grads()
        graph.backward(loss)
        adam_step(member.params, adam)
        losses[f"critic_loss_{i + 1}"] = value
    logger.debug(f"[CRITIC] losses {losses}")
    return losses


def update_targets(ensemble: CriticEnsemble, rate: float) -> None:
    for member in ensemble.members:
        ema_update(member.params, member.target, rate)
