"""
QPMIX experiment runner
=======================
    python app.py run <config>
    python app.py eval <checkpoint> <config>
    python app.py convlab <config>

Options --seeds 0,1,2 / --slots N / --out-dir DIR override the config file.
Process settings (QPMIX_WORKERS, QPMIX_LOG_LEVEL, QPMIX_ENV,
QPMIX_CHECKPOINT_SECRET) are read from the environment or a .env file.
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

from convlab import TRACE_COLUMNS, SingularSystemError, random_mdp, run_two_time_scale
from metrics import STATION_COLUMNS, aggregate_rows, cdf_rows, station_rows, write_csv
from qpmix import TRAIN_LOG_COLUMNS, run_evaluation, run_training, save_run_checkpoint
from scenarios import (
    ConfigError,
    ScenarioSpec,
    Variant,
    build_lab_config,
    build_run_config,
    load_config,
    to_config_text,
    variants,
)

logger = logging.getLogger(__name__)

FAILURE_COLUMNS = ["scenario", "variant", "seed", "error"]
REWARD_COLUMNS = ["step_end", "mean_reward"]
CDF_COLUMNS = ["delay_s", "fraction"]
CHECKPOINT_NAME = "checkpoint.qpmx"


def configure_logging() -> None:
    default = "DEBUG" if os.environ.get("QPMIX_ENV") == "development" else "INFO"
    level = os.environ.get("QPMIX_LOG_LEVEL", default).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )


def worker_count() -> int:
    raw = os.environ.get("QPMIX_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning(f"QPMIX_WORKERS={raw!r} is not an integer; using 1 worker")
        return 1


def seed_dir(spec: ScenarioSpec, variant: str, seed: int) -> Path:
    return Path(spec.out_dir) / spec.scenario / variant / f"seed{seed}"


# ============================================================================
# PER-SEED RUNS
# ============================================================================

@dataclass
class SeedOutcome:
    variant: str
    seed: int
    rows: List[dict] = field(default_factory=list)
    error: str = ""


def run_seed(spec: ScenarioSpec, variant: Variant, seed: int, checkpoint: str = "") -> SeedOutcome:
    """
    Train (or, with a checkpoint, evaluate) one roster for one seed and
    write its result files into the seed's own directory.
    """
    name = f"eval-{variant.name}" if checkpoint else variant.name
    out = seed_dir(spec, name, seed)
    out.mkdir(parents=True, exist_ok=True)
    config = build_run_config(spec, variant, seed)

    trace = open(out / "trace.tsv", "w", encoding="utf-8") if spec.trace else None
    try:
        if checkpoint:
            result = run_evaluation(checkpoint, config, trace)
        else:
            result = run_training(config, trace)
    finally:
        if trace is not None:
            trace.close()

    rows = station_rows(result.stats, spec.scenario, name, seed, config.kinds)
    write_csv(out / "stations.csv", STATION_COLUMNS, rows)
    write_csv(out / "training.csv", result.windows.columns(), result.windows.rows())
    write_csv(out / "rewards.csv", REWARD_COLUMNS, result.reward_rows())
    write_csv(out / "delay_cdf.csv", CDF_COLUMNS, cdf_rows(result.stats))
    if result.trainer is not None:
        write_csv(out / "train_log.csv", TRAIN_LOG_COLUMNS, result.log)
        save_run_checkpoint(result, out / CHECKPOINT_NAME)
    logger.info(f"{spec.scenario}/{name} seed {seed}: results in {out}")
    return SeedOutcome(name, seed, rows)


def _isolated(spec: ScenarioSpec, variant: Variant, seed: int, checkpoint: str) -> SeedOutcome:
    try:
        return run_seed(spec, variant, seed, checkpoint)
    except Exception as e:
        logger.warning(f"{spec.scenario}/{variant.name} seed {seed} failed: {type(e).__name__}: {e}")
        name = f"eval-{variant.name}" if checkpoint else variant.name
        return SeedOutcome(name, seed, error=f"{type(e).__name__}: {e}")


# ============================================================================
# SCENARIOS
# ============================================================================

@dataclass
class ScenarioReport:
    rows: List[dict]
    aggregate: List[dict]
    failures: List[SeedOutcome]

    @property
    def succeeded(self) -> int:
        return len({(r["variant"], r["seed"]) for r in self.rows})


def _map(fn, jobs: Sequence[tuple], workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


def run_scenario(spec: ScenarioSpec, checkpoint: Optional[str] = None, workers: Optional[int] = None) -> ScenarioReport:
    """Every (variant, seed) pair of the scenario; a failing seed does not stop the others."""
    checkpoint = spec.checkpoint if checkpoint is None else checkpoint
    workers = worker_count() if workers is None else workers
    root = Path(spec.out_dir) / spec.scenario
    root.mkdir(parents=True, exist_ok=True)
    (root / "resolved.env").write_text(to_config_text(spec), encoding="utf-8")

    jobs = [(spec, v, seed, checkpoint) for v in variants(spec) for seed in spec.seeds]
    logger.info(f"Scenario {spec.scenario}: {len(jobs)} runs on {workers} worker(s)")
    outcomes = _map(_isolated, jobs, workers)

    rows = [row for o in outcomes for row in o.rows]
    failures = [o for o in outcomes if o.error]
    aggregate = aggregate_rows(rows)
    write_csv(root / "aggregate.csv", STATION_COLUMNS + ["seeds"], aggregate)
    write_csv(root / "failures.csv", FAILURE_COLUMNS,
              [{"scenario": spec.scenario, "variant": o.variant, "seed": o.seed, "error": o.error} for o in failures])
    write_plot_script(root, spec, sorted({o.variant for o in outcomes if not o.error}))
    return ScenarioReport(rows, aggregate, failures)


def write_plot_script(root: Path, spec: ScenarioSpec, variant_names: Sequence[str]) -> None:
    """gnuplot script drawing the training curves of every successful seed."""
    lines = [
        "set datafile separator ','",
        "set key outside",
        "set terminal pngcairo size 1000,600",
        f"set output '{spec.scenario}_throughput.png'",
        "set xlabel 'time (s)'",
        "set ylabel 'throughput'",
    ]
    curves = [f"'{v}/seed{s}/training.csv' using 3:4 with lines title '{v} seed {s}'"
              for v in variant_names for s in spec.seeds]
    if curves:
        lines.append("plot " + ", \\\n     ".join(curves))
    lines += [
        f"set output '{spec.scenario}_reward.png'",
        "set xlabel 'training step'",
        "set ylabel 'mean reward (500 steps)'",
    ]
    curves = [f"'{v}/seed{s}/rewards.csv' using 1:2 with lines title '{v} seed {s}'"
              for v in variant_names for s in spec.seeds]
    if curves:
        lines.append("plot " + ", \\\n     ".join(curves))
    (root / "plot.gp").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ============================================================================
# CONVERGENCE LAB
# ============================================================================

def run_lab_seed(spec: ScenarioSpec, seed: int) -> SeedOutcome:
    """All reference MDPs of one seed; trace rows of every MDP go into one CSV."""
    config = build_lab_config(spec)
    out = seed_dir(spec, "lab", seed)
    out.mkdir(parents=True, exist_ok=True)

    trace, summary = [], []
    for k, child in enumerate(np.random.SeedSequence(seed).spawn(spec.mdp_count)):
        mdp_rng, run_rng = (np.random.default_rng(s) for s in child.spawn(2))
        try:
            mdp = random_mdp(mdp_rng, n_states=spec.mdp_states, n_agents=len(config.kinds),
                             features=spec.features, n_features=spec.n_features or None, gamma=spec.gamma)
            result = run_two_time_scale(mdp, config, run_rng, mdp_id=k)
        except (FloatingPointError, SingularSystemError, ValueError) as e:
            logger.warning(f"convlab seed {seed} MDP {k} skipped: {type(e).__name__}: {e}")
            continue
        trace.extend(result.trace)
        summary.append(result.trace[-1])

    write_csv(out / "trace.csv", TRACE_COLUMNS, trace)
    write_csv(out / "summary.csv", TRACE_COLUMNS, summary)
    return SeedOutcome("lab", seed, summary)


def run_lab(spec: ScenarioSpec, workers: Optional[int] = None) -> List[SeedOutcome]:
    workers = worker_count() if workers is None else workers
    root = Path(spec.out_dir) / spec.scenario
    root.mkdir(parents=True, exist_ok=True)
    (root / "resolved.env").write_text(to_config_text(spec), encoding="utf-8")
    logger.info(f"Convergence lab: {spec.mdp_count} MDPs x {len(spec.seeds)} seeds, {spec.iterations} iterations each")
    return _map(run_lab_seed, [(spec, seed) for seed in spec.seeds], workers)


# ============================================================================
# COMMAND LINE
# ============================================================================

def _seed_list(text: str):
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be a comma-separated list of integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seeds", type=_seed_list, help="comma-separated seeds, e.g. 0,1,2")
    common.add_argument("--slots", type=int, help="simulated slots per run")
    common.add_argument("--out-dir", help="result directory")

    parser = argparse.ArgumentParser(description="QPMIX WLAN channel-access experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="train every roster of a scenario")
    p.add_argument("config")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint without training")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p = sub.add_parser("convlab", parents=[common], help="actor-critic convergence experiments")
    p.add_argument("config")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    configure_logging()
    args = build_parser().parse_args(argv)

    try:
        spec = load_config(args.config).with_overrides(seeds=args.seeds, slots=args.slots, out_dir=args.out_dir)
    except OSError as e:
        logger.error(f"Cannot read config: {e}")
        return 2
    except ConfigError as e:
        logger.error(f"Invalid config {args.config}: {e}")
        return 2

    if args.command == "convlab" or spec.scenario == "convlab":
        outcomes = run_lab(spec)
        return 0 if any(o.rows for o in outcomes) else 1

    report = run_scenario(spec, checkpoint=args.checkpoint if args.command == "eval" else None)
    for row in report.aggregate:
        logger.info(f"{row['variant']}: throughput={row['throughput']}, jfi={row['jfi']}, "
                    f"collision_rate={row['collision_rate']}, mean_delay_s={row['mean_delay_s']}")
    if report.failures:
        logger.warning(f"{len(report.failures)} run(s) failed; see failures.csv")
    return 0 if report.succeeded else 1


if __name__ == "__main__":
    sys.exit(main())
