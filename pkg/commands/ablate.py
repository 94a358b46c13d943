import logging
from multiprocessing import Pool
from pathlib import Path
from typing import Dict, List, Tuple

import click
import pandas as pd

from config import ExperimentConfig, load_datasets
from errors import ConfigError
from run_store import TeacherCache, prepare_run_dir
from train import Strategy
from commands.run import execute_run, prepare_teacher
from commands.utils import apply_overrides, load_or_default, parse_values, resolve_root, revalidate, write_report

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
VARIANTS = ("baseline", "no_node", "no_edge", "full")


def variant_config(cfg: ExperimentConfig, variant: str, seed: int) -> Tuple[ExperimentConfig, bool]:
    """(config, baseline flag) for one ablation cell; every cell shares data and init seeds."""
    train: Dict = {"seed": seed}
    if variant == "no_node":
        train["node_weight"] = 0.0
    elif variant == "no_edge":
        train["lambda"] = 0.0
    elif variant not in ("baseline", "full"):
        raise ConfigError(f"unknown ablation variant '{variant}'")
    return revalidate(cfg, {"train": train}), variant == "baseline"


def run_job(job: Tuple[str, str, str, bool]) -> Dict:
    """Worker entry point; takes plain strings so it pickles cheaply."""
    config_json, run_dir, root, baseline = job
    cfg = ExperimentConfig.model_validate_json(config_json)
    manifest = execute_run(cfg, Path(run_dir), root=Path(root), baseline=baseline)
    return {
        "seed": manifest.seed,
        "student_accuracy": manifest.student_accuracy,
        "initial_student_accuracy": manifest.initial_student_accuracy,
        "teacher_accuracy": manifest.teacher_accuracy,
        "teacher_hash": manifest.teacher_hash,
        "run_dir": str(run_dir),
    }


def run_jobs(jobs: List[Tuple[str, str, str, bool]], workers: int) -> List[Dict]:
    """Results in job order regardless of completion order."""
    if workers <= 1 or len(jobs) <= 1:
        return [run_job(job) for job in jobs]
    with Pool(processes=min(workers, len(jobs))) as pool:
        return pool.map(run_job, jobs)


def warm_teacher_cache(cfg: ExperimentConfig, root: Path):
    """Prepare the shared teacher once before any fan-out."""
    train, test = load_datasets(cfg)
    prepare_teacher(cfg, train, test, TeacherCache(root))


def summarize(rows: List[Dict]) -> List[Dict]:
    frame = pd.DataFrame(rows)
    grouped = frame.groupby("variant", sort=False)["student_accuracy"]
    summary = grouped.agg(["mean", "min", "max", "count"]).reset_index()
    return [{key: value.item() if hasattr(value, "item") else value for key, value in row.items()}
            for row in summary.to_dict(orient="records")]


def paired_wins(rows: List[Dict], variant: str, reference: str = "baseline") -> int:
    """Seeds on which `variant` beats `reference`."""
    frame = pd.DataFrame(rows).pivot(index="seed", columns="variant", values="student_accuracy")
    return int((frame[variant] > frame[reference]).sum())


def run_ablation(cfg: ExperimentConfig, root: Path, seeds, workers: int = 1,
                 variants=VARIANTS) -> Dict:
    out_dir = prepare_run_dir(root / cfg.label / "ablate")
    warm_teacher_cache(cfg, root)

    cells, jobs = [], []
    for variant in variants:
        for seed in seeds:
            variant_cfg, baseline = variant_config(cfg, variant, seed)
            run_dir = out_dir / variant / f"seed-{seed}"
            cells.append(variant)
            jobs.append((variant_cfg.model_dump_json(by_alias=True), str(run_dir), str(root), baseline))

    rows = []
    for variant, result in zip(cells, run_jobs(jobs, workers)):
        rows.append({"variant": variant, **result})
    summary = summarize(rows)
    wins = {v: paired_wins(rows, v) for v in variants if v != "baseline" and "baseline" in variants}
    write_report(rows, out_dir, "ablation_runs")
    write_report(summary, out_dir, "ablation_summary",
                 extra={"paired_wins_over_baseline": wins, "seeds": list(seeds)})
    for row in summary:
        logger.info("%-8s mean %.4f [%.4f, %.4f] over %d seeds", row["variant"], row["mean"],
                    row["min"], row["max"], row["count"])
    return {"rows": rows, "summary": summary, "paired_wins": wins, "out_dir": out_dir}


@click.command("ablate")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Experiment config (JSON).")
@click.option("--seeds", default=None, help="Comma-separated seeds (default 0,1,2,3,4).")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output root directory.")
@click.option("--strategy", type=click.Choice([s.value for s in Strategy]), default=None)
@click.option("--workers", type=click.IntRange(min=1), default=1, help="Parallel runs.")
def ablate_command(config_path, seeds, out, strategy, workers):
    """Baseline, EGA w/o L_node, EGA w/o L_edge and full EGA on paired seeds."""
    cfg = apply_overrides(load_or_default(config_path), strategy=strategy)
    seed_list = parse_values(seeds, int, DEFAULT_SEEDS)
    result = run_ablation(cfg, resolve_root(cfg, out), seed_list, workers)
    for row in result["summary"]:
        click.echo(f"{row['variant']}\tmean={row['mean']:.4f}\tmin={row['min']:.4f}\tmax={row['max']:.4f}")
