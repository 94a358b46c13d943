import logging
from enum import Enum
from pathlib import Path
from typing import Dict, List, Sequence

import click

from config import ExperimentConfig
from errors import ConfigError
from run_store import prepare_run_dir
from train import Strategy
from commands.ablate import run_jobs, warm_teacher_cache
from commands.utils import (
    apply_overrides,
    load_or_default,
    parse_values,
    resolve_root,
    revalidate,
    value_slug,
    write_report,
)

logger = logging.getLogger(__name__)


class Axis(str, Enum):
    GRAPH_SIZE = "graph_size"
    NODE_WEIGHT = "node_weight"
    EDGE_WEIGHT = "edge_weight"


DEFAULT_VALUES = {
    Axis.GRAPH_SIZE: (16, 32, 64, 128, 256),
    Axis.NODE_WEIGHT: (1.2, 1.4, 1.5, 1.6, 1.8, 2.0),
    Axis.EDGE_WEIGHT: (0.2, 0.4, 0.5, 0.6, 0.8, 1.0),
}


def sweep_config(cfg: ExperimentConfig, axis: Axis, value) -> ExperimentConfig:
    """
    Graph size is the batch size. The weight axes isolate one term:
    L = L_ce + v·L_node, or L = L_ce + v·L_edge.
    """
    if axis == Axis.GRAPH_SIZE:
        if int(value) != value or value < 2:
            raise ConfigError(f"graph size must be an integer >= 2, got {value}")
        update = {"batch_size": int(value)}
    elif axis == Axis.NODE_WEIGHT:
        update = {"lambda_ega": 1.0, "lambda": 0.0, "node_weight": float(value)}
    else:
        update = {"lambda_ega": 1.0, "node_weight": 0.0, "lambda": float(value)}
    return revalidate(cfg, {"train": update})


def run_sweep(cfg: ExperimentConfig, root: Path, axis: Axis, values: Sequence, workers: int = 1) -> Dict:
    axis = Axis(axis)
    out_dir = prepare_run_dir(root / cfg.label / f"sweep-{axis.value}")
    configs = [sweep_config(cfg, axis, v) for v in values]
    warm_teacher_cache(cfg, root)

    jobs = [(c.model_dump_json(by_alias=True), str(out_dir / value_slug(v)), str(root), False)
            for c, v in zip(configs, values)]
    rows: List[Dict] = []
    for value, result in zip(values, run_jobs(jobs, workers)):
        rows.append({"axis": axis.value, "value": value, **result})
        logger.info("%s=%s -> student acc %.4f", axis.value, value, result["student_accuracy"])
    write_report(rows, out_dir, "sweep_report")
    return {"rows": rows, "out_dir": out_dir}


@click.command("sweep")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Experiment config (JSON).")
@click.option("--axis", type=click.Choice([a.value for a in Axis]), required=True)
@click.option("--values", default=None, help="Comma-separated axis values (defaults per axis).")
@click.option("--seed", type=int, default=None, help="Override train.seed.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output root directory.")
@click.option("--strategy", type=click.Choice([s.value for s in Strategy]), default=None)
@click.option("--workers", type=click.IntRange(min=1), default=1, help="Parallel runs.")
def sweep_command(config_path, axis, values, seed, out, strategy, workers):
    """One run per axis value on a shared seed."""
    axis = Axis(axis)
    cast = int if axis == Axis.GRAPH_SIZE else float
    value_list = parse_values(values, cast, DEFAULT_VALUES[axis])
    cfg = apply_overrides(load_or_default(config_path), seed=seed, strategy=strategy)
    result = run_sweep(cfg, resolve_root(cfg, out), axis, value_list, workers)
    for row in result["rows"]:
        click.echo(f"{row['axis']}={row['value']}\tstudent_accuracy={row['student_accuracy']:.4f}")
