#!/usr/bin/env python3
"""
flow-drl - Performance Benchmark Suite
======================================

Times the three hot paths of a training step on the two-goal point mass:
a traced flow rollout (actor sample with log-density), one critic update,
and one full Trainer.update (critic + actor + temperature + EMA).

Usage:
    python benchmarks/benchmark_performance.py [--iterations N] [--trace exact|hutchinson]

Nothing is written except benchmarks/latest_results.json.

Copyright (c) 2026 flow-drl authors
"""

import argparse
import json
import os
import platform
import statistics
import time
from dataclasses import replace

import numpy as np

from flow_drl.config import TrainConfig, resolve_config
from flow_drl.core.diffcore import CompGraph
from flow_drl.distcritic import compute_targets, critic_update
from flow_drl.trainer import Trainer


def get_system_info() -> dict:
    """Collect system information for reproducibility."""
    info = {
        "platform": platform.platform(),
        "python_version": platform.python_version(),
        "numpy_version": np.__version__,
        "processor": platform.processor() or platform.machine(),
        "machine": platform.machine(),
    }
    try:
        import psutil

        info["ram_total_gb"] = round(psutil.virtual_memory().total / (1024**3), 1)
        info["cpu_count"] = psutil.cpu_count(logical=True)
    except ImportError:
        info["ram_total_gb"] = "unknown (install psutil for details)"
        info["cpu_count"] = os.cpu_count()
    return info


def percentile(data, p):
    """Calculate the p-th percentile of a list."""
    return float(np.percentile(np.asarray(data, dtype=np.float64), p))


def summarize(latencies: list) -> dict:
    return {
        "iterations": len(latencies),
        "mean_ms": round(statistics.mean(latencies), 3),
        "median_ms": round(statistics.median(latencies), 3),
        "p95_ms": round(percentile(latencies, 95), 3),
        "p99_ms": round(percentile(latencies, 99), 3),
    }


def timed(fn, iterations: int) -> dict:
    latencies = []
    for _ in range(iterations):
        start = time.perf_counter()
        fn()
        latencies.append((time.perf_counter() - start) * 1000.0)
    return summarize(latencies)


def build_trainer(trace: str) -> Trainer:
    """Point-mass trainer with a filled buffer and the default network sizes."""
    config = resolve_config(env="two_goal_point_mass")
    config = replace(config, trace=trace, warmup_steps=1000, seed=0).validate()
    trainer = Trainer(config)
    while len(trainer.buffer) < config.warmup_steps:
        trainer.env_step()
    return trainer


def run_rollout_benchmark(trainer: Trainer, iterations: int) -> dict:
    batch = trainer.buffer.sample(trainer.config.batch_size, trainer.streams.buffer)

    def rollout():
        trainer.policy.sample(
            CompGraph(), batch.s, trainer.streams.actor, trainable=False,
            probe_rng=trainer.streams.hutchinson,
        )

    return timed(rollout, iterations)


def run_critic_benchmark(trainer: Trainer, iterations: int) -> dict:
    cfg = trainer.config
    batch = trainer.buffer.sample(cfg.batch_size, trainer.streams.buffer)
    sample = trainer.policy.sample(
        CompGraph(), batch.s_next, trainer.streams.actor, trainable=False,
        probe_rng=trainer.streams.hutchinson,
    )
    targets = compute_targets(
        trainer.critics, batch, sample.action_value, sample.log_prob_value,
        trainer.alpha, cfg.gamma,
    )
    return timed(lambda: critic_update(trainer.critics, batch, targets, cfg.kappa), iterations)


def run_update_benchmark(trainer: Trainer, iterations: int) -> dict:
    cfg = trainer.config

    def update():
        trainer.update(trainer.buffer.sample(cfg.batch_size, trainer.streams.buffer))

    return timed(update, iterations)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    parser.add_argument("--iterations", type=int, default=20)
    parser.add_argument("--trace", choices=["exact", "hutchinson"], default="exact")
    args = parser.parse_args()

    print("=" * 64)
    print("  flow-drl - Performance Benchmark")
    print("=" * 64)
    print()

    system_info = get_system_info()
    print("System:")
    for key, value in system_info.items():
        print(f"  {key}: {value}")
    print()

    print("Filling replay buffer on two_goal_point_mass...")
    trainer = build_trainer(args.trace)
    cfg: TrainConfig = trainer.config
    print(f"  Buffer: {len(trainer.buffer)}  Batch: {cfg.batch_size}  "
          f"Quantiles: {cfg.n_quantiles}  Flow steps: {cfg.flow_steps}  "
          f"Trace: {trainer.policy.trace}")
    print()

    results = {}
    for name, bench in (
        ("rollout", run_rollout_benchmark),
        ("critic_update", run_critic_benchmark),
        ("train_update", run_update_benchmark),
    ):
        print(f"{name} ({args.iterations} iterations)...")
        results[name] = bench(trainer, args.iterations)
        r = results[name]
        print(f"  Mean: {r['mean_ms']:.2f}ms  "
              f"Median: {r['median_ms']:.2f}ms  "
              f"P95: {r['p95_ms']:.2f}ms  "
              f"P99: {r['p99_ms']:.2f}ms")
        print()

    full_results = {
        "system": system_info,
        "config": cfg.canonical(),
        "benchmarks": results,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    results_path = os.path.join(os.path.dirname(os.path.abspath(__file__)), "latest_results.json")
    with open(results_path, "w") as f:
        json.dump(full_results, f, indent=2, default=str)
    print(f"Full results: {results_path}")


if __name__ == "__main__":
    main()
