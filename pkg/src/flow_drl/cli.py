"""
flow-drl command line

    flow-drl train     run one training job
    flow-drl ablate    sweep one axis (policy, critic, N, K) over shared seeds
    flow-drl eval      evaluate a checkpoint
    flow-drl verify    run the verification suites
    flow-drl plotdata  per-step mean and SEM across seed runs

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification failure.

Copyright (c) 2026 flow-drl authors
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import uuid
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import Config, TrainConfig, load_config_file, resolve_config
from .core.diffcore import CheckpointError
from .envs import make_env

logger = logging.getLogger("flow-drl")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3

ABLATION_AXES: Dict[str, tuple] = {
    "policy": ("policy", ["flow", "gaussian"]),
    "critic": ("critic", ["quantile", "mean"]),
    "N": ("n_quantiles", [16, 32, 64]),
    "K": ("flow_steps", [4, 7, 10, 12]),
}
DEFAULT_SEEDS = [0, 1, 2]


class UsageError(Exception):
    """Bad flags, bad config values, or a run directory conflict."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ============ RUN MANIFEST ============


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    code_version: str
    started_at: str
    seeds: List[int]
    artifacts: Dict[str, str] = field(default_factory=dict)
    finished_at: Optional[str] = None
    status: str = "running"

    def write(self, run_dir: Path) -> Path:
        path = Path(run_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def read(cls, run_dir: Path) -> "RunManifest":
        data = json.loads((Path(run_dir) / "manifest.json").read_text(encoding="utf-8"))
        return cls(**data)


def _config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {f.name: getattr(args, f.name, None) for f in fields(TrainConfig)}


def _add_config_flags(parser: argparse.ArgumentParser, skip: Sequence[str] = ()) -> None:
    group = parser.add_argument_group("config keys (override the config file)")
    for f in fields(TrainConfig):
        if f.name in skip:
            continue
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None,
                           metavar=f.name.upper())
    parser.add_argument("--config", type=Path, default=None, help="flat YAML config file")


def _load_config(args: argparse.Namespace, overrides: Optional[Dict[str, Any]] = None):
    try:
        file_values = load_config_file(args.config) if args.config else {}
        overrides = overrides or _config_overrides(args)
        return resolve_config(file_values=file_values, overrides=overrides)
    except ValueError as e:
        raise UsageError(str(e)) from e


# ============ TRAIN ============


def run_training(config: TrainConfig, run_dir: Path, resume: bool = False) -> dict:
    """Train one config into run_dir, keeping the manifest current."""
    from .trainer import Trainer

    run_dir = Path(run_dir)
    if resume:
        manifest = RunManifest.read(run_dir)
        trainer = Trainer.resume(run_dir)
    else:
        run_dir.mkdir(parents=True, exist_ok=False)
        manifest = RunManifest(
            run_id=f"{run_dir.name}-{uuid.uuid4().hex[:8]}",
            config_hash=config.config_hash(),
            code_version=__version__,
            started_at=_now(),
            seeds=[config.seed],
            artifacts={
                "config": "config.yaml",
                "metrics": "metrics.jsonl",
                "checkpoints": "checkpoints/",
                "summary": "summary.json",
            },
        )
        manifest.write(run_dir)
        trainer = Trainer(config, run_dir)

    manifest.status = "running"
    manifest.write(run_dir)
    try:
        summary = trainer.run()
    except Exception:
        manifest.status = "aborted"
        manifest.finished_at = _now()
        manifest.write(run_dir)
        raise
    manifest.status = "completed"
    manifest.finished_at = _now()
    manifest.write(run_dir)
    return summary


def _default_run_name(config: TrainConfig) -> str:
    return f"{config.env}-{config.config_hash()}-s{config.seed}"


def cmd_train(args: argparse.Namespace) -> int:
    if args.resume:
        if args.run_dir is None:
            raise UsageError("--resume needs --run-dir")
        run_dir = Path(args.run_dir)
        if not (run_dir / "state.json").exists():
            raise UsageError(f"nothing to resume in {run_dir}")
        config = TrainConfig.from_mapping(load_config_file(run_dir / "config.yaml"))
    else:
        config = _load_config(args)
        if args.run_dir:
            run_dir = Path(args.run_dir)
        else:
            Config.ensure_directories()
            run_dir = Config.run_root() / _default_run_name(config)
        if run_dir.exists():
            raise UsageError(f"run directory {run_dir} already exists (use --resume)")

    print(f"[flow-drl] v{__version__} train {config.env} -> {run_dir}", file=sys.stderr)
    print(f"[flow-drl] config hash {config.config_hash()}", file=sys.stderr)
    summary = run_training(config, run_dir, resume=args.resume)
    print(json.dumps({"run_dir": str(run_dir), **summary}, sort_keys=True))
    return EXIT_OK


# ============ ABLATE ============


def _ablation_job(config_values: Dict[str, Any], run_dir: str) -> dict:
    config = TrainConfig.from_mapping(config_values).validate()
    return run_training(config, Path(run_dir))


def _best(summary: dict) -> float:
    best = summary.get("best_last10_return")
    return float("nan") if best is None else float(best)


def _modes(summary: dict) -> Optional[tuple]:
    if "bimodality_plus" not in summary:
        return None
    return (float(summary["bimodality_plus"]), float(summary["bimodality_minus"]))


def ablation_table(rows: List[dict]) -> str:
    """TSV: axis value, mean and std across seeds of the best-last-10% return, per-seed values.

    Rows that carry `modes` (bandit runs) add the mean +0.6 and -0.6 fractions
    and the per-seed `plus/minus` pairs.
    """
    with_modes = bool(rows) and all(row.get("modes") for row in rows)
    header = "value\tmean\tstd\tseeds\tper_seed"
    if with_modes:
        header += "\tbimodal_plus\tbimodal_minus\tmodes_per_seed"
    lines = [header]
    for row in rows:
        returns = np.array(row["returns"], dtype=np.float64)
        line = (
            f"{row['value']}\t{np.mean(returns):.6f}\t{np.std(returns):.6f}\t"
            f"{len(returns)}\t{','.join(f'{r:.6f}' for r in returns)}"
        )
        if with_modes:
            modes = np.array(row["modes"], dtype=np.float64)
            pairs = ",".join(f"{p:.3f}/{m:.3f}" for p, m in modes)
            line += f"\t{np.mean(modes[:, 0]):.6f}\t{np.mean(modes[:, 1]):.6f}\t{pairs}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def cmd_ablate(args: argparse.Namespace) -> int:
    if args.axis not in ABLATION_AXES:
        raise UsageError(
            f"unknown ablation axis '{args.axis}' (choose from {', '.join(ABLATION_AXES)})"
        )
    key, defaults = ABLATION_AXES[args.axis]
    values = args.values or defaults
    seeds = args.seeds or DEFAULT_SEEDS
    base = _load_config(args)
    # every (value, seed) config must validate before anything runs
    configs = {
        (value, seed): _load_config(args, {**_config_overrides(args), key: value, "seed": seed})
        for value in values
        for seed in seeds
    }

    sweep_dir = Path(args.out) if args.out else (
        Config.run_root() / f"ablate-{args.axis}-{base.config_hash()}"
    )
    if sweep_dir.exists():
        raise UsageError(f"sweep directory {sweep_dir} already exists")
    sweep_dir.mkdir(parents=True)
    print(f"[flow-drl] ablate {args.axis} over {values} x seeds {seeds} -> {sweep_dir}",
          file=sys.stderr)

    jobs = {
        (value, seed): (config.canonical(), str(sweep_dir / f"{key}={value}" / f"seed{seed}"))
        for (value, seed), config in configs.items()
    }
    for _, run_dir in jobs.values():
        Path(run_dir).parent.mkdir(parents=True, exist_ok=True)

    summaries: Dict[tuple, dict] = {}
    if args.parallel:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            futures = {job: pool.submit(_ablation_job, *spec) for job, spec in jobs.items()}
            summaries = {job: future.result() for job, future in futures.items()}
    else:
        for job, spec in jobs.items():
            logger.info(f"[ABLATE] {key}={job[0]} seed={job[1]}")
            summaries[job] = _ablation_job(*spec)

    rows = []
    for value in values:
        runs = [summaries[(value, s)] for s in seeds]
        row: Dict[str, Any] = {"value": value, "returns": [_best(s) for s in runs]}
        modes = [_modes(s) for s in runs]
        if all(m is not None for m in modes):
            row["modes"] = modes
        rows.append(row)
    table = ablation_table(rows)
    (sweep_dir / "table.tsv").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


# ============ EVAL ============


def cmd_eval(args: argparse.Namespace) -> int:
    from .trainer import evaluate, load_policy

    checkpoint = Path(args.checkpoint)
    policy, config = load_policy(checkpoint)
    env_name = args.env or config.env
    trained_spec = make_env(config.env).spec
    env = make_env(env_name)
    trained_dims = (trained_spec.state_dim, trained_spec.action_dim)
    if (env.spec.state_dim, env.spec.action_dim) != trained_dims:
        raise ValueError(f"checkpoint was trained on {trained_spec} but {env_name} is {env.spec}")

    mean, std, returns = evaluate(
        policy, env, args.episodes, np.random.default_rng(args.seed),
        deterministic=not args.stochastic,
    )
    record = {
        "checkpoint": str(checkpoint),
        "env": env_name,
        "episodes": args.episodes,
        "seed": args.seed,
        "mode": "stochastic" if args.stochastic else "deterministic",
        "return_mean": mean,
        "return_std": std,
        "returns": returns.tolist(),
    }
    output = Path(args.output) if args.output else (
        checkpoint.parent.parent / "eval" / f"{checkpoint.stem}_{env_name}_seed{args.seed}.json"
    )
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")
    print(f"{mean:.6f} +- {std:.6f}")
    return EXIT_OK


# ============ VERIFY ============


def cmd_verify(args: argparse.Namespace) -> int:
    from .oracles import run_suites

    results = run_suites(args.suite or ())
    report = {
        "version": __version__,
        "passed": all(r.passed for r in results),
        "suites": [r.to_record() for r in results],
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_VERIFY


# ============ PLOTDATA ============


def aligned_series(run_dirs: Sequence[Path], metric: str) -> List[dict]:
    """Per-step mean and SEM (std with ddof=1 over sqrt(n); 0 for one run)."""
    from .trainer import read_metrics

    series = []
    for run_dir in run_dirs:
        rows = read_metrics(run_dir)
        if not rows:
            raise ValueError(f"no metrics in {run_dir}")
        if metric not in rows[0]:
            raise ValueError(f"metric '{metric}' not in {run_dir}/metrics.jsonl")
        series.append({r["step"]: r[metric] for r in rows})

    reference = list(series[0])
    for run_dir, s in zip(run_dirs[1:], series[1:]):
        if list(s) != reference:
            differing = sorted(set(s).symmetric_difference(reference))
            raise ValueError(
                f"eval schedule of {run_dir} differs from {run_dirs[0]} at steps {differing}"
            )

    out = []
    for step in reference:
        values = np.array([s[step] for s in series], dtype=np.float64)
        sem = float(np.std(values, ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
        out.append({"step": step, "mean": float(np.mean(values)), "sem": sem,
                    "values": values.tolist()})
    return out


def cmd_plotdata(args: argparse.Namespace) -> int:
    run_dirs = [Path(p) for p in args.runs]
    rows = aligned_series(run_dirs, args.metric)
    header = "step\tmean\tsem\t" + "\t".join(f"run{i}" for i in range(len(run_dirs)))
    lines = [header] + [
        f"{r['step']}\t{r['mean']:.9g}\t{r['sem']:.9g}\t"
        + "\t".join(f"{v:.9g}" for v in r["values"])
        for r in rows
    ]
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ============ ENTRY POINT ============


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flow-drl", description="Flow-policy distributional SAC at desk scale")
    parser.add_argument("--version", action="version", version=f"flow-drl {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="run one training job")
    _add_config_flags(p)
    p.add_argument("--run-dir", default=None, help="run directory (default: under the run root)")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("ablate", help="sweep one axis over shared seeds")
    p.add_argument("--axis", required=True, help="policy | critic | N | K")
    p.add_argument(
        "--values", nargs="+", default=None, help="axis values (default: the standard grid)"
    )
    p.add_argument("--seeds", nargs="+", type=int, default=None, help="seeds (default: 0 1 2)")
    p.add_argument("--out", default=None, help="sweep directory")
    p.add_argument("--parallel", action="store_true", help="run jobs in worker processes")
    p.add_argument("--workers", type=int, default=None)
    _add_config_flags(p, skip=("seed",))
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--env", default=None)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stochastic", action="store_true", help="sample A_0 instead of A_0 = 0")
    p.add_argument("--output", default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("verify", help="run the verification suites")
    p.add_argument("--suite", action="append", default=None, help="run only this suite")
    p.add_argument("--output", default=None, help="also write the JSON report here")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("plotdata", help="aligned mean/SEM series across runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--metric", default="eval_return_mean")
    p.add_argument("--output", default=None)
    p.set_defaults(handler=cmd_plotdata)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ValueError, RuntimeError, FloatingPointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
