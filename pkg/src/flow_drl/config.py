"""
Configuration management for flow-drl

Two layers:
  - Config: process-level settings read from FLOW_DRL_* environment variables
  - TrainConfig: every hyperparameter of one training run, validated and hashable

Copyright (c) 2026 flow-drl authors
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields, replace
from importlib.resources import files
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import yaml

ENV_NAMES = ("bimodal_bandit", "two_goal_point_mass", "pendulum_swingup")
POLICY_KINDS = ("flow", "gaussian")
CRITIC_KINDS = ("quantile", "mean")
TRACE_KINDS = ("exact", "hutchinson")
CRITIC_COUNTS = ("twin", "single")


class Config:
    """Centralized process-level configuration for flow-drl"""

    # Root directory under which run directories are created
    RUN_ROOT: Path = Path(os.getenv("FLOW_DRL_RUN_ROOT", "./runs"))

    # Largest action dimension that gets the exact (d backward passes) trace
    EXACT_TRACE_CUTOFF: int = int(os.getenv("FLOW_DRL_EXACT_TRACE_CUTOFF", "8"))

    # Hutchinson probes used by diagnostics (training uses TrainConfig.hutchinson_probes)
    DIAGNOSTIC_PROBES: int = int(os.getenv("FLOW_DRL_DIAGNOSTIC_PROBES", "64"))

    # Thread workers for evaluation episodes (1 = lockstep batch in the calling thread)
    EVAL_WORKERS: int = int(os.getenv("FLOW_DRL_EVAL_WORKERS", "1"))

    # Logging
    LOG_LEVEL: str = os.getenv("FLOW_DRL_LOG_LEVEL", "INFO")

    @classmethod
    def run_root(cls) -> Path:
        """Run root, re-read so a changed FLOW_DRL_RUN_ROOT is honoured."""
        value = os.getenv("FLOW_DRL_RUN_ROOT")
        return Path(value) if value else cls.RUN_ROOT

    @classmethod
    def ensure_directories(cls) -> None:
        """Ensure the run root exists"""
        cls.run_root().mkdir(parents=True, exist_ok=True)

    @classmethod
    def summary(cls) -> dict:
        """Return configuration summary"""
        return {
            "run_root": str(cls.run_root()),
            "exact_trace_cutoff": cls.EXACT_TRACE_CUTOFF,
            "diagnostic_probes": cls.DIAGNOSTIC_PROBES,
            "eval_workers": cls.EVAL_WORKERS,
            "log_level": cls.LOG_LEVEL,
        }


def _to_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _to_optional_float(value: Any) -> Optional[float]:
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
        return None
    return float(value)


def _to_int(value: Any) -> int:
    if isinstance(value, float) and not value.is_integer():
        raise ValueError(f"not an integer: {value!r}")
    return int(value)


_COERCE = {
    "int": _to_int,
    "float": float,
    "bool": _to_bool,
    "str": str,
    "Optional[float]": _to_optional_float,
}


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    Defaults follow the reference protocol: N=32 quantiles, K=4 flow steps,
    Adam at 3e-4 everywhere, batch 256, 10 evaluation episodes.
    """

    env: str = "pendulum_swingup"
    steps: int = 100_000
    seed: int = 0

    # ablation toggles
    policy: str = "flow"
    critic: str = "quantile"
    trace: str = "exact"
    critics: str = "twin"

    # objective
    gamma: float = 0.99
    kappa: float = 1.0
    n_quantiles: int = 32
    flow_steps: int = 4
    alpha_init: float = 0.2
    target_entropy: Optional[float] = None  # None -> -action_dim

    # optimisation
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_alpha: float = 3e-4
    batch_size: int = 256
    buffer_capacity: int = 1_000_000
    warmup_steps: int = 1000
    update_every: int = 1  # environment steps per gradient update
    ema_rate: float = 0.005

    # networks
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    time_frequencies: int = 16
    hidden_dim: int = 256
    hutchinson_probes: int = 1

    # schedule
    eval_interval: int = 5000
    eval_episodes: int = 10
    eval_deterministic: bool = True
    checkpoint_interval: int = 5000  # 0 -> final checkpoint only

    def validate(self) -> "TrainConfig":
        """Raise ValueError naming the offending key; returns self for chaining."""
        if self.env not in ENV_NAMES:
            raise ValueError(f"env must be one of {', '.join(ENV_NAMES)} (got {self.env!r})")
        for key, allowed in (
            ("policy", POLICY_KINDS),
            ("critic", CRITIC_KINDS),
            ("trace", TRACE_KINDS),
            ("critics", CRITIC_COUNTS),
        ):
            value = getattr(self, key)
            if value not in allowed:
                raise ValueError(f"{key} must be one of {', '.join(allowed)} (got {value!r})")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0,1)")
        if not 0.0 <= self.ema_rate <= 1.0:
            raise ValueError("ema_rate must lie in [0,1]")
        if self.kappa <= 0.0:
            raise ValueError("kappa must be positive")
        if self.alpha_init <= 0.0:
            raise ValueError("alpha_init must be positive")
        for key in ("lr_actor", "lr_critic", "lr_alpha"):
            if getattr(self, key) <= 0.0:
                raise ValueError(f"{key} must be positive")
        for key in (
            "steps",
            "n_quantiles",
            "flow_steps",
            "batch_size",
            "buffer_capacity",
            "d_model",
            "heads",
            "layers",
            "time_frequencies",
            "hidden_dim",
            "hutchinson_probes",
            "eval_interval",
            "eval_episodes",
            "update_every",
        ):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1")
        for key in ("warmup_steps", "checkpoint_interval", "seed"):
            if getattr(self, key) < 0:
                raise ValueError(f"{key} must be >= 0")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size must not exceed buffer_capacity")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        return self

    def entropy_target(self, action_dim: int) -> float:
        return -float(action_dim) if self.target_entropy is None else float(self.target_entropy)

    def canonical(self) -> Dict[str, Any]:
        """Sorted-key plain mapping; the basis of the config hash and snapshot."""
        return dict(sorted(asdict(self).items()))

    def config_hash(self) -> str:
        payload = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]

    def with_overrides(self, overrides: Mapping[str, Any]) -> "TrainConfig":
        return replace(self, **coerce_values(overrides))

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "TrainConfig":
        return cls(**coerce_values(values))


def coerce_values(values: Mapping[str, Any]) -> Dict[str, Any]:
    """Type-coerce raw key/value pairs; unknown keys are rejected by name."""
    known = {f.name: f.type for f in fields(TrainConfig)}
    coerced: Dict[str, Any] = {}
    for key, raw in values.items():
        if key not in known:
            raise ValueError(f"unknown config key '{key}'")
        try:
            coerced[key] = _COERCE[known[key]](raw)
        except (TypeError, ValueError) as e:
            raise ValueError(f"invalid value for '{key}': {raw!r}") from e
    return coerced


# ============ FILES AND PRESETS ============


def load_config_file(path: Path) -> Dict[str, Any]:
    """Read a flat YAML mapping of config keys."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ValueError(f"cannot read config file {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ValueError(f"config file {path} is not valid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a flat key: value mapping")
    for key, value in data.items():
        if isinstance(value, (dict, list)):
            raise ValueError(f"config key '{key}' must be a scalar")
    coerce_values(data)
    return data


def save_config(path: Path, config: TrainConfig) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(config.canonical(), sort_keys=True), encoding="utf-8")
    return path


def load_presets() -> Dict[str, Dict[str, Any]]:
    """Bundled per-environment presets from flow_drl/data/presets.yaml"""
    text = files("flow_drl").joinpath("data").joinpath("presets.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text) or {}


def resolve_config(
    env: Optional[str] = None,
    file_values: Optional[Mapping[str, Any]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    use_presets: bool = True,
) -> TrainConfig:
    """Merge defaults < env preset < config file < flag overrides, then validate."""
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    env_name = overrides.get("env") or file_values.get("env") or env or TrainConfig.env

    merged: Dict[str, Any] = {"env": env_name}
    if use_presets:
        merged.update(load_presets().get(env_name, {}))
    merged.update(file_values)
    merged.update(overrides)
    return TrainConfig.from_mapping(merged).validate()
