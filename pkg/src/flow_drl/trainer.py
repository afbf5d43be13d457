"""
Training loop: soft actor-critic with a flow policy and a quantile critic

Every gradient step runs, in this order:
  1. critic:      quantile Huber loss against entropy-augmented targets
  2. actor:       J_pi = E[alpha * log pi(a|s) - min_c mean(theta_c(s, a))]
  3. temperature: J(alpha) = E[-alpha * (log pi + target_entropy)], in log alpha
  4. targets:     EMA of the online critics

One gradient step per `update_every` environment steps after a
uniform-random warmup. Randomness comes from independent streams spawned off
the master seed, so evaluation and diagnostics never perturb training.

Copyright (c) 2026 flow-drl authors
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import Config, TrainConfig, load_config_file, save_config
from .core import diffcore as dc
from .core.diffcore import (
    AdamState,
    CompGraph,
    NonFiniteError,
    Operand,
    ParamSet,
    adam_step,
    flatten_params,
    load_checkpoint,
    restore_params,
    save_checkpoint,
)
from .distcritic import CriticBatch, CriticEnsemble, compute_targets, critic_update, update_targets
from .envs import EnvSpec, EnvState, Environment, Transition, make_env
from .flowpolicy import FlowPolicy, GaussianPolicy, VelocityNetConfig, sample_action

logger = logging.getLogger("flow-drl")

STREAM_NAMES = ("env", "init", "buffer", "actor", "hutchinson")
EVAL_STREAM_KEY = 0xE7A1
DIAGNOSTIC_STREAM_KEY = 0xD1A6
DIAGNOSTIC_STATES = 32
BIMODAL_OPTIMA = (0.6, -0.6)
BIMODAL_SAMPLES = 1000

Hook = Callable[[str, int], None]
Policy = Union[FlowPolicy, GaussianPolicy]


class TrainingAborted(RuntimeError):
    """An update produced a non-finite value; the offending batch was dumped."""

    def __init__(self, message: str, step: int, dump_path: Optional[Path] = None):
        super().__init__(message)
        self.step = step
        self.dump_path = dump_path


# ============ SEED STREAMS ============


class SeedStreams:
    """Independent generators spawned from the master seed."""

    def __init__(self, seed: int):
        self.seed = seed
        children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
        self._generators: Dict[str, np.random.Generator] = {
            name: np.random.Generator(np.random.PCG64(child))
            for name, child in zip(STREAM_NAMES, children)
        }

    def __getattr__(self, name: str) -> np.random.Generator:
        generators = self.__dict__.get("_generators", {})
        if name in generators:
            return generators[name]
        raise AttributeError(name)

    def evaluation(self, step: int) -> np.random.Generator:
        """Fresh generator for the evaluation at `step`, outside the training streams."""
        return np.random.default_rng([self.seed, EVAL_STREAM_KEY, step])

    def diagnostics(self, step: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, DIAGNOSTIC_STREAM_KEY, step])

    def state_dict(self) -> Dict[str, dict]:
        return {name: gen.bit_generator.state for name, gen in self._generators.items()}

    def load_state_dict(self, states: Dict[str, dict]) -> None:
        for name, state in states.items():
            self._generators[name].bit_generator.state = state


# ============ REPLAY BUFFER ============


class ReplayBuffer:
    """Fixed-capacity ring buffer; overwrites the oldest transition first."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.terminal = np.zeros(capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, transition: Transition) -> None:
        i = self.cursor
        self.s[i] = transition.s
        self.a[i] = transition.a
        self.r[i] = transition.r
        self.s_next[i] = transition.s_next
        # time-limit truncation still bootstraps
        self.terminal[i] = 1.0 if transition.terminal else 0.0
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> CriticBatch:
        idx = self.sample_indices(batch_size, rng)
        return CriticBatch(
            s=self.s[idx], a=self.a[idx], r=self.r[idx], s_next=self.s_next[idx],
            terminal=self.terminal[idx],
        )

    def state_dict(self) -> Dict[str, np.ndarray]:
        n = self.size
        return {
            "buffer/s": self.s[:n],
            "buffer/a": self.a[:n],
            "buffer/r": self.r[:n],
            "buffer/s_next": self.s_next[:n],
            "buffer/terminal": self.terminal[:n],
        }

    def load_state_dict(self, entries: Dict[str, np.ndarray], cursor: int, size: int) -> None:
        self.s[:size] = entries["buffer/s"]
        self.a[:size] = entries["buffer/a"]
        self.r[:size] = entries["buffer/r"]
        self.s_next[:size] = entries["buffer/s_next"]
        self.terminal[:size] = entries["buffer/terminal"]
        self.cursor = cursor
        self.size = size


# ============ METRICS ============


@dataclass
class MetricsRow:
    step: int
    episode_return: Optional[float]
    episodes: int
    actor_loss: Optional[float]
    critic_loss_1: Optional[float]
    critic_loss_2: Optional[float]
    alpha: float
    alpha_loss: Optional[float]
    entropy: Optional[float]
    mean_q: Optional[float]
    eval_return_mean: float
    eval_return_std: float
    eval_stochastic_mean: float
    eval_stochastic_std: float
    entropy_estimate: Optional[float] = None
    wall_clock: float = field(default=0.0, compare=False)

    def to_record(self) -> dict:
        """JSON record for metrics.jsonl; wall-clock is kept out for reproducibility."""
        record = asdict(self)
        record.pop("wall_clock")
        return record


class MetricsLogger:
    """Append-only JSONL writer; writes are serialized."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / "metrics.jsonl"
        self.timing_path = Path(run_dir) / "timing.jsonl"
        self._lock = threading.RLock()

    def append(self, row: MetricsRow) -> None:
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(row.to_record(), sort_keys=True) + "\n")
            with open(self.timing_path, "a", encoding="utf-8") as f:
                f.write(json.dumps({"step": row.step, "wall_clock": row.wall_clock}) + "\n")

    def truncate_after(self, step: int) -> None:
        """Drop rows logged after `step` (used when resuming from a checkpoint)."""
        with self._lock:
            for path in (self.path, self.timing_path):
                if not path.exists():
                    continue
                kept = [
                    line
                    for line in path.read_text(encoding="utf-8").splitlines()
                    if line.strip() and json.loads(line)["step"] <= step
                ]
                path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")


def read_metrics(run_dir: Path) -> List[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]


# ============ LOSSES ============


def policy_loss(log_prob: Operand, q_value: Operand, alpha: float) -> Operand:
    """J_pi = mean(alpha * log pi - Q)."""
    return dc.mean(dc.sub(dc.scale(log_prob, alpha), q_value))


def temperature_loss(log_prob: np.ndarray, log_alpha: Operand, target_entropy: float) -> Operand:
    """J(alpha) = mean(-exp(log_alpha) * (log pi + target_entropy)); log-probs are constants."""
    gap = np.asarray(dc.value_of(log_prob), dtype=np.float64) + target_entropy
    alpha = dc.broadcast(dc.exp(log_alpha), gap.shape)
    return dc.mean(dc.scale(dc.mul(alpha, gap), -1.0))


# ============ POLICY CONSTRUCTION AND EVALUATION ============


def build_policy(config: TrainConfig, spec: EnvSpec, rng: np.random.Generator) -> Policy:
    if config.policy == "flow":
        net = VelocityNetConfig(
            action_dim=spec.action_dim,
            state_dim=spec.state_dim,
            d_model=config.d_model,
            heads=config.heads,
            layers=config.layers,
            flow_steps=config.flow_steps,
            time_frequencies=config.time_frequencies,
        )
        return FlowPolicy(net, rng, trace=config.trace, probes=config.hutchinson_probes)
    return GaussianPolicy(spec.state_dim, spec.action_dim, config.hidden_dim, rng)


def _run_episodes(
    policy: Policy, env: Environment, episodes: int, rng: np.random.Generator,
    deterministic: bool,
) -> np.ndarray:
    """Undiscounted returns of `episodes` episodes stepped in lockstep."""
    obs = env.initial_observations(rng, episodes)
    returns = np.zeros(episodes)
    active = np.ones(episodes, dtype=bool)
    for _ in range(env.spec.horizon):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        actions = env.check_actions(policy.act(obs[idx], rng, deterministic=deterministic))
        next_obs, rewards, terminal = env.dynamics(obs[idx], actions)
        returns[idx] += rewards
        obs[idx] = next_obs
        active[idx[terminal]] = False
    return returns


def evaluate(
    policy: Policy,
    env: Environment,
    episodes: int,
    rng: np.random.Generator,
    deterministic: bool = True,
    workers: Optional[int] = None,
) -> Tuple[float, float, np.ndarray]:
    """Mean and (population) std of undiscounted episode returns.

    Reads parameters only; buffer and parameters are untouched. With more than
    one worker, episode chunks run on threads against the same read-only
    snapshot and are joined before returning.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    workers = Config.EVAL_WORKERS if workers is None else workers
    if workers <= 1 or episodes == 1:
        returns = _run_episodes(policy, env, episodes, rng, deterministic)
    else:
        chunks = [c for c in np.array_split(np.arange(episodes), workers) if c.size]
        seeds = rng.integers(0, 2**63 - 1, size=len(chunks))
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [
                pool.submit(
                    _run_episodes, policy, env, c.size, np.random.default_rng(seed), deterministic
                )
                for c, seed in zip(chunks, seeds)
            ]
            returns = np.concatenate([f.result() for f in futures])
    return float(np.mean(returns)), float(np.std(returns)), returns


def policy_sampler(
    policy: Policy, rng: np.random.Generator, state_dim: int = 1
) -> Callable[[int], np.ndarray]:
    """Stochastic action sampler at the zero state (the bandit's only state)."""

    def sample(n: int) -> np.ndarray:
        return policy.act(np.zeros((n, state_dim)), rng, deterministic=False)

    return sample


def bimodality_score(
    sampler: Callable[[int], np.ndarray], samples: int = 1000, radius: float = 0.1
) -> Tuple[float, float]:
    """Fractions of sampled actions within `radius` of +0.6 and of -0.6."""
    actions = np.asarray(sampler(samples), dtype=np.float64).reshape(samples, -1)[:, 0]
    plus = float(np.mean(np.abs(actions - BIMODAL_OPTIMA[0]) <= radius))
    minus = float(np.mean(np.abs(actions - BIMODAL_OPTIMA[1]) <= radius))
    return plus, minus


def estimate_entropy(
    policy: Policy, states: np.ndarray, rng: np.random.Generator, probes: int
) -> Optional[float]:
    """-E[log pi(a|s)] over `states` with no parameter gradients; None if not finite.

    Flow policies take the trace from `probes` Hutchinson probes whatever
    their training trace mode; the Gaussian actor's density is closed form.
    """
    graph = CompGraph()
    try:
        if isinstance(policy, FlowPolicy):
            field = policy.field(graph.bind(policy.params, trainable=False))
            sample, _ = sample_action(
                field, states, rng, policy.net.flow_steps, policy.action_dim, graph=graph,
                trace="hutchinson", probes=probes, probe_rng=rng,
            )
        else:
            sample = policy.sample(graph, states, rng, trainable=False)
    except NonFiniteError as e:
        logger.warning(f"[EVAL] entropy estimate skipped: {e}")
        return None
    value = float(-np.mean(sample.log_prob_value))
    return value if np.isfinite(value) else None


def best_in_final_fraction(
    rows: Sequence[dict], total_steps: int, key: str = "eval_return_mean", fraction: float = 0.1
) -> Tuple[Optional[float], Optional[int]]:
    """Highest `key` among rows in the last `fraction` of steps (final row if none)."""
    if not rows:
        return None, None
    cutoff = total_steps - math.ceil(fraction * total_steps)
    window = [r for r in rows if r["step"] > cutoff] or [rows[-1]]
    best = max(window, key=lambda r: r[key])
    return float(best[key]), int(best["step"])


# ============ TRAINER ============


class Trainer:
    """Owns every piece of mutable training state for one run."""

    def __init__(
        self,
        config: TrainConfig,
        run_dir: Optional[Path] = None,
        hooks: Sequence[Hook] = (),
    ):
        self.config = config.validate()
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.hooks = list(hooks)
        self.env = make_env(config.env)
        spec = self.env.spec
        self.streams = SeedStreams(config.seed)

        self.policy = build_policy(config, spec, self.streams.init)
        self.critics = CriticEnsemble(
            spec.state_dim,
            spec.action_dim,
            config.n_quantiles,
            config.hidden_dim,
            self.streams.init,
            twin=config.critics == "twin",
            kind=config.critic,
            lr=config.lr_critic,
        )
        self.actor_adam = AdamState.for_params(self.policy.params, lr=config.lr_actor)
        self.temperature = ParamSet("temperature")
        self.temperature.add("log_alpha", np.array(np.log(config.alpha_init)))
        self.alpha_adam = AdamState.for_params(self.temperature, lr=config.lr_alpha)
        self.target_entropy = config.entropy_target(spec.action_dim)
        self.buffer = ReplayBuffer(config.buffer_capacity, spec.state_dim, spec.action_dim)

        self.step_count = 0
        self.updates = 0
        self.episodes = 0
        self.episode_return = 0.0
        self.last_episode_return: Optional[float] = None
        self.env_state: EnvState = self.env.reset(self.streams.env)
        self.last_update: Dict[str, float] = {}
        self.metrics: Optional[MetricsLogger] = None
        self._started = time.monotonic()

    @property
    def alpha(self) -> float:
        return float(np.exp(self.temperature["log_alpha"].value))

    def _emit(self, phase: str) -> None:
        for hook in self.hooks:
            hook(phase, self.step_count)

    # ============ UPDATES ============

    def actor_update(self, states: np.ndarray) -> Dict[str, float]:
        graph = CompGraph()
        sample = self.policy.sample(
            graph, states, self.streams.actor, trainable=True, probe_rng=self.streams.hutchinson
        )
        q_value = self.critics.min_mean(graph, states, sample.action)
        loss = policy_loss(sample.log_prob, q_value, self.alpha)
        value = float(loss.value)
        if not np.isfinite(value):
            raise NonFiniteError("non-finite actor loss", payload={"actor_loss": value})
        self.policy.params.zero_grads()
        graph.backward(loss)
        adam_step(self.policy.params, self.actor_adam)
        self._actor_log_prob = sample.log_prob_value
        return {
            "actor_loss": value,
            "entropy": float(-np.mean(sample.log_prob_value)),
            "mean_q": float(np.mean(dc.value_of(q_value))),
        }

    def temperature_update(self, log_prob: np.ndarray) -> Dict[str, float]:
        graph = CompGraph()
        log_alpha = graph.parameter(self.temperature, "log_alpha")
        loss = temperature_loss(log_prob, log_alpha, self.target_entropy)
        self.temperature.zero_grads()
        graph.backward(loss)
        adam_step(self.temperature, self.alpha_adam)
        return {"alpha_loss": float(loss.value), "alpha": self.alpha}

    def next_state_sample(self, batch: CriticBatch) -> Tuple[np.ndarray, np.ndarray]:
        """(a', log pi(a'|s')) for the bootstrap term.

        When every row is terminal the bootstrap term is multiplied out, so the
        rollout is skipped and zeros stand in; the bandit hits this every update.
        """
        if np.all(batch.terminal):
            return np.zeros_like(batch.a), np.zeros(batch.r.shape)
        sample = self.policy.sample(
            CompGraph(), batch.s_next, self.streams.actor, trainable=False,
            probe_rng=self.streams.hutchinson,
        )
        return sample.action_value, sample.log_prob_value

    def update(self, batch: CriticBatch) -> Dict[str, float]:
        cfg = self.config
        next_action, next_log_prob = self.next_state_sample(batch)
        targets = compute_targets(
            self.critics, batch, next_action, next_log_prob, self.alpha, cfg.gamma
        )
        stats = critic_update(self.critics, batch, targets, cfg.kappa)
        self._emit("critic")
        stats.update(self.actor_update(batch.s))
        self._emit("actor")
        stats.update(self.temperature_update(self._actor_log_prob))
        self._emit("temperature")
        update_targets(self.critics, cfg.ema_rate)
        self._emit("ema")
        self.updates += 1
        return stats

    def _guarded_update(self) -> None:
        batch = self.buffer.sample(self.config.batch_size, self.streams.buffer)
        try:
            self.last_update = self.update(batch)
        except (NonFiniteError, FloatingPointError, ValueError) as e:
            dump = self._dump_diagnostics(batch, e)
            raise TrainingAborted(
                f"update at step {self.step_count} failed: {e}", self.step_count, dump
            ) from e

    def _dump_diagnostics(self, batch: CriticBatch, error: Exception) -> Optional[Path]:
        if self.run_dir is None:
            return None
        path = self.run_dir / "diagnostics" / f"abort_{self.step_count}.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = getattr(error, "payload", {})
        np.savez(
            path,
            s=batch.s, a=batch.a, r=batch.r, s_next=batch.s_next, terminal=batch.terminal,
            error=np.array(str(error)), payload=np.array(json.dumps(payload, default=str)),
        )
        logger.error(f"[TRAIN] Aborted at step {self.step_count}; batch dumped to {path}")
        return path

    # ============ INTERACTION ============

    def env_step(self) -> Transition:
        cfg = self.config
        spec = self.env.spec
        if self.step_count < cfg.warmup_steps:
            action = self.streams.actor.uniform(spec.action_low, spec.action_high, spec.action_dim)
        else:
            obs = self.env_state.observation[None, :]
            action = self.policy.act(obs, self.streams.actor, deterministic=False)[0]
        transition, self.env_state = self.env.step(self.env_state, action, self.streams.env)
        self.buffer.push(transition)
        self.step_count += 1
        self.episode_return += transition.r
        if transition.terminal or transition.truncated:
            self.episodes += 1
            self.last_episode_return = self.episode_return
            self.episode_return = 0.0
            self.env_state = self.env.reset(self.streams.env)
        return transition

    def evaluate_now(self) -> MetricsRow:
        cfg = self.config
        det_mean, det_std, _ = evaluate(
            self.policy, self.env, cfg.eval_episodes, self.streams.evaluation(self.step_count),
            deterministic=True,
        )
        sto_mean, sto_std, _ = evaluate(
            self.policy, self.env, cfg.eval_episodes,
            self.streams.evaluation(self.step_count + cfg.steps + 1),
            deterministic=False,
        )
        diag_rng = self.streams.diagnostics(self.step_count)
        diag_states = self.env.initial_observations(diag_rng, DIAGNOSTIC_STATES)
        last = self.last_update
        return MetricsRow(
            step=self.step_count,
            episode_return=self.last_episode_return,
            episodes=self.episodes,
            actor_loss=last.get("actor_loss"),
            critic_loss_1=last.get("critic_loss_1"),
            critic_loss_2=last.get("critic_loss_2"),
            alpha=self.alpha,
            alpha_loss=last.get("alpha_loss"),
            entropy=last.get("entropy"),
            mean_q=last.get("mean_q"),
            eval_return_mean=det_mean,
            eval_return_std=det_std,
            eval_stochastic_mean=sto_mean,
            eval_stochastic_std=sto_std,
            entropy_estimate=estimate_entropy(
                self.policy, diag_states, diag_rng, Config.DIAGNOSTIC_PROBES
            ),
            wall_clock=time.monotonic() - self._started,
        )

    # ============ RUN ============

    def run(self) -> dict:
        """Train to config.steps, writing metrics, checkpoints and summary.json."""
        if self.run_dir is None:
            raise ValueError("Trainer.run needs a run directory")
        cfg = self.config
        self.run_dir.mkdir(parents=True, exist_ok=True)
        if not (self.run_dir / "config.yaml").exists():
            save_config(self.run_dir / "config.yaml", cfg)
        self.metrics = MetricsLogger(self.run_dir)
        logger.info(
            f"[TRAIN] {cfg.env} policy={cfg.policy} critic={cfg.critic}/{cfg.critics} "
            f"seed={cfg.seed} steps={cfg.steps} from step {self.step_count}"
        )

        while self.step_count < cfg.steps:
            self.env_step()
            if (
                self.step_count > cfg.warmup_steps
                and len(self.buffer) >= cfg.batch_size
                and self.step_count % cfg.update_every == 0
            ):
                self._guarded_update()
            if self.step_count % cfg.eval_interval == 0:
                row = self.evaluate_now()
                self.metrics.append(row)
                logger.info(
                    f"[EVAL] step {row.step}: return {row.eval_return_mean:.3f} "
                    f"+- {row.eval_return_std:.3f}, alpha {row.alpha:.4f}"
                )
            if cfg.checkpoint_interval and self.step_count % cfg.checkpoint_interval == 0:
                self.save()

        self.save()
        summary = self.summarize()
        (self.run_dir / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8"
        )
        return summary

    def summarize(self) -> dict:
        cfg = self.config
        rows = read_metrics(self.run_dir)
        key = "eval_return_mean" if cfg.eval_deterministic else "eval_stochastic_mean"
        best, best_step = best_in_final_fraction(rows, cfg.steps, key=key)
        cutoff = cfg.steps - math.ceil(0.1 * cfg.steps)
        entropies = [r["entropy"] for r in rows if r["step"] > cutoff and r["entropy"] is not None]
        summary = {
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
            "steps": self.step_count,
            "updates": self.updates,
            "eval_mode": "deterministic" if cfg.eval_deterministic else "stochastic",
            "best_last10_return": best,
            "best_last10_step": best_step,
            "final_eval_return": rows[-1][key] if rows else None,
            "entropy_last10": float(np.mean(entropies)) if entropies else None,
            "target_entropy": self.target_entropy,
        }
        if rows:
            summary["entropy_estimate_final"] = rows[-1].get("entropy_estimate")
        if cfg.env == "bimodal_bandit":
            rng = self.streams.diagnostics(cfg.steps + 1)
            sampler = policy_sampler(self.policy, rng, state_dim=1)
            plus, minus = bimodality_score(sampler, samples=BIMODAL_SAMPLES)
            summary["bimodality_plus"] = plus
            summary["bimodality_minus"] = minus
        return summary

    # ============ CHECKPOINTS ============

    def checkpoint_entries(self) -> Dict[str, np.ndarray]:
        entries = dict(flatten_params("actor", self.policy.params))
        for member in self.critics.members:
            entries.update(flatten_params(member.params.name, member.params))
            entries.update(flatten_params(member.target.name, member.target))
        entries.update(flatten_params("temperature", self.temperature))
        optimizers = [("actor", self.actor_adam), ("temperature", self.alpha_adam)]
        optimizers += [
            (member.params.name, adam)
            for member, adam in zip(self.critics.members, self.critics.optimizers)
        ]
        for prefix, adam in optimizers:
            for name in adam.m:
                entries[f"adam/{prefix}/m/{name}"] = adam.m[name]
                entries[f"adam/{prefix}/v/{name}"] = adam.v[name]
        entries.update(self.buffer.state_dict())
        return entries

    def save(self) -> Path:
        ckpt = self.run_dir / "checkpoints" / f"step_{self.step_count:08d}.ckpt"
        save_checkpoint(ckpt, self.checkpoint_entries())
        state = {
            "checkpoint": ckpt.name,
            "step": self.step_count,
            "updates": self.updates,
            "episodes": self.episodes,
            "episode_return": self.episode_return,
            "last_episode_return": self.last_episode_return,
            "observation": self.env_state.observation.tolist(),
            "elapsed": self.env_state.elapsed,
            "adam_t": {
                "actor": self.actor_adam.t,
                "temperature": self.alpha_adam.t,
                "critics": [adam.t for adam in self.critics.optimizers],
            },
            "buffer": {"cursor": self.buffer.cursor, "size": self.buffer.size},
            "rng": self.streams.state_dict(),
            "last_update": self.last_update,
            "config_hash": self.config.config_hash(),
        }
        (self.run_dir / "state.json").write_text(json.dumps(state, indent=2), encoding="utf-8")
        logger.info(f"[CKPT] step {self.step_count} -> {ckpt.name}")
        return ckpt

    def restore(self) -> None:
        state = json.loads((self.run_dir / "state.json").read_text(encoding="utf-8"))
        if state["config_hash"] != self.config.config_hash():
            raise ValueError("run directory was created with a different config")
        entries = load_checkpoint(self.run_dir / "checkpoints" / state["checkpoint"])
        restore_params(self.policy.params, entries, "actor")
        for member in self.critics.members:
            restore_params(member.params, entries, member.params.name)
            restore_params(member.target, entries, member.target.name)
        restore_params(self.temperature, entries, "temperature")
        optimizers = [("actor", self.actor_adam), ("temperature", self.alpha_adam)]
        optimizers += [
            (member.params.name, adam)
            for member, adam in zip(self.critics.members, self.critics.optimizers)
        ]
        for prefix, adam in optimizers:
            for name in list(adam.m):
                adam.m[name] = entries[f"adam/{prefix}/m/{name}"].copy()
                adam.v[name] = entries[f"adam/{prefix}/v/{name}"].copy()
        self.actor_adam.t = state["adam_t"]["actor"]
        self.alpha_adam.t = state["adam_t"]["temperature"]
        for adam, t in zip(self.critics.optimizers, state["adam_t"]["critics"]):
            adam.t = t
        self.buffer.load_state_dict(entries, state["buffer"]["cursor"], state["buffer"]["size"])
        self.streams.load_state_dict(state["rng"])
        self.step_count = state["step"]
        self.updates = state["updates"]
        self.episodes = state["episodes"]
        self.episode_return = state["episode_return"]
        self.last_episode_return = state["last_episode_return"]
        self.env_state = EnvState(np.array(state["observation"]), state["elapsed"])
        self.last_update = state["last_update"]
        MetricsLogger(self.run_dir).truncate_after(self.step_count)
        logger.info(f"[CKPT] resumed {self.run_dir.name} at step {self.step_count}")

    @classmethod
    def resume(cls, run_dir: Path, hooks: Sequence[Hook] = ()) -> "Trainer":
        run_dir = Path(run_dir)
        config = TrainConfig.from_mapping(load_config_file(run_dir / "config.yaml"))
        trainer = cls(config, run_dir, hooks)
        trainer.restore()
        return trainer


def train(config: TrainConfig, run_dir: Path, resume: bool = False) -> dict:
    trainer = Trainer.resume(run_dir) if resume else Trainer(config, run_dir)
    return trainer.run()


def load_policy(checkpoint: Path) -> Tuple[Policy, TrainConfig]:
    """Rebuild the actor stored in a run's checkpoint (config read from the run dir)."""
    checkpoint = Path(checkpoint)
    config_path = checkpoint.parent.parent / "config.yaml"
    if not config_path.exists():
        raise ValueError(f"no config.yaml next to checkpoint {checkpoint}")
    config = TrainConfig.from_mapping(load_config_file(config_path)).validate()
    spec = make_env(config.env).spec
    policy = build_policy(config, spec, np.random.default_rng(0))
    restore_params(policy.params, load_checkpoint(checkpoint), "actor")
    return policy, config
