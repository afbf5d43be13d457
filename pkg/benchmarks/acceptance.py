#!/usr/bin/env python3
"""
flow-drl - Acceptance Runs
==========================

Trains the bundled presets and checks the end-to-end learning criteria:

  bandit_modes      flow policy keeps both bandit modes (>= 25% each on every
                    seed) while the Gaussian actor collapses (< 5% on one side
                    on every seed); 20k steps, whole sweep under 15 minutes
  point_mass        quantile critic's best-last-10% return, averaged over
                    seeds, at least the mean critic's; under 1 hour
  pendulum_return   deterministic evaluation reaches -300 within 100k steps
                    on at least 2 of 3 seeds; under 1 hour
  pendulum_entropy  entropy over the final 10% of steps within 0.5 nats of
                    the -1 target on every seed (same runs as above)

Usage:
    python benchmarks/acceptance.py [--criteria NAME ...] [--workers N] [--seeds S ...]

Runs go to benchmarks/acceptance_runs/<timestamp>/; the verdicts land in
benchmarks/acceptance_results.json.

Copyright (c) 2026 flow-drl authors
"""

import argparse
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from flow_drl.cli import run_training
from flow_drl.config import TrainConfig, resolve_config
from flow_drl.trainer import read_metrics

HERE = Path(__file__).resolve().parent

# name -> (env, swept key, swept values, wall-clock budget in seconds)
CRITERIA: Dict[str, Tuple[str, str, List[str], float]] = {
    "bandit_modes": ("bimodal_bandit", "policy", ["flow", "gaussian"], 15 * 60.0),
    "point_mass": ("two_goal_point_mass", "critic", ["quantile", "mean"], 3600.0),
    "pendulum_return": ("pendulum_swingup", "policy", ["flow"], 3600.0),
}
# pendulum_entropy reads the pendulum_return runs
DERIVED = {"pendulum_entropy": "pendulum_return"}

MODE_FLOOR = 0.25
COLLAPSE_CEILING = 0.05
PENDULUM_RETURN = -300.0
PENDULUM_STEPS = 100_000
ENTROPY_TOLERANCE = 0.5


def acceptance_job(config_values: dict, run_dir: str) -> dict:
    """Train one run; returns its summary plus the evaluation curve."""
    config = TrainConfig.from_mapping(config_values).validate()
    summary = run_training(config, Path(run_dir))
    summary["curve"] = [
        (row["step"], row["eval_return_mean"]) for row in read_metrics(Path(run_dir))
    ]
    return summary


def run_criterion(name: str, seeds: List[int], workers: int, root: Path) -> dict:
    env, key, values, budget = CRITERIA[name]
    jobs = {}
    for value in values:
        for seed in seeds:
            config = resolve_config(env=env, overrides={key: value, "seed": seed})
            jobs[(value, seed)] = (config.canonical(), str(root / name / f"{value}-s{seed}"))

    started = time.perf_counter()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {job: pool.submit(acceptance_job, *spec) for job, spec in jobs.items()}
        summaries = {job: future.result() for job, future in futures.items()}
    seconds = time.perf_counter() - started
    return {"seconds": round(seconds, 1), "budget_seconds": budget, "summaries": summaries}


def judge_bandit(summaries: dict, seeds: List[int]) -> dict:
    flow = [(summaries[("flow", s)]["bimodality_plus"], summaries[("flow", s)]["bimodality_minus"])
            for s in seeds]
    gauss = [(summaries[("gaussian", s)]["bimodality_plus"],
              summaries[("gaussian", s)]["bimodality_minus"]) for s in seeds]
    return {
        "flow_modes": flow,
        "gaussian_modes": gauss,
        "passed": all(min(pair) >= MODE_FLOOR for pair in flow)
        and all(min(pair) < COLLAPSE_CEILING for pair in gauss),
    }


def judge_point_mass(summaries: dict, seeds: List[int]) -> dict:
    quantile = [summaries[("quantile", s)]["best_last10_return"] for s in seeds]
    mean = [summaries[("mean", s)]["best_last10_return"] for s in seeds]
    return {
        "quantile_returns": quantile,
        "mean_returns": mean,
        "passed": float(np.mean(quantile)) >= float(np.mean(mean)),
    }


def judge_pendulum_return(summaries: dict, seeds: List[int]) -> dict:
    best = []
    for s in seeds:
        curve = [ret for step, ret in summaries[("flow", s)]["curve"] if step <= PENDULUM_STEPS]
        best.append(max(curve) if curve else float("-inf"))
    reached = sum(b >= PENDULUM_RETURN for b in best)
    return {"best_returns": best, "seeds_reached": reached, "passed": reached >= 2}


def judge_pendulum_entropy(summaries: dict, seeds: List[int]) -> dict:
    entropies = [summaries[("flow", s)]["entropy_last10"] for s in seeds]
    targets = [summaries[("flow", s)]["target_entropy"] for s in seeds]
    gaps = [
        float("inf") if e is None else abs(e - t) for e, t in zip(entropies, targets)
    ]
    return {
        "entropy_last10": entropies,
        "target_entropy": targets,
        "passed": all(g <= ENTROPY_TOLERANCE for g in gaps),
    }


JUDGES = {
    "bandit_modes": judge_bandit,
    "point_mass": judge_point_mass,
    "pendulum_return": judge_pendulum_return,
    "pendulum_entropy": judge_pendulum_entropy,
}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    parser.add_argument("--criteria", nargs="+", choices=list(JUDGES), default=list(JUDGES))
    parser.add_argument("--workers", type=int, default=os.cpu_count())
    parser.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    args = parser.parse_args()

    root = HERE / "acceptance_runs" / time.strftime("%Y%m%d-%H%M%S")
    print("=" * 64)
    print("  flow-drl - Acceptance Runs")
    print("=" * 64)
    print(f"Runs: {root}  Workers: {args.workers}  Seeds: {args.seeds}")
    print()

    needed = {DERIVED.get(name, name) for name in args.criteria}
    runs = {}
    for name in CRITERIA:
        if name in needed:
            print(f"{name}: training...")
            runs[name] = run_criterion(name, args.seeds, args.workers, root)
            print(f"  {runs[name]['seconds']:.0f}s (budget {runs[name]['budget_seconds']:.0f}s)")

    verdicts = {}
    for name in args.criteria:
        source = runs[DERIVED.get(name, name)]
        verdict = JUDGES[name](source["summaries"], args.seeds)
        verdict["seconds"] = source["seconds"]
        verdict["within_budget"] = source["seconds"] < source["budget_seconds"]
        verdict["passed"] = verdict["passed"] and verdict["within_budget"]
        verdicts[name] = verdict
        print(f"{name}: {'PASS' if verdict['passed'] else 'FAIL'}")

    results = {
        "criteria": verdicts,
        "runs": str(root),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    results_path = HERE / "acceptance_results.json"
    with open(results_path, "w") as f:
        json.dump(results, f, indent=2, default=str)
    print(f"Full results: {results_path}")
    raise SystemExit(0 if all(v["passed"] for v in verdicts.values()) else 1)


if __name__ == "__main__":
    main()
