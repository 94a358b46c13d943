import logging
from pathlib import Path
from typing import Optional, Tuple

import click

from config import ExperimentConfig, config_hash, load_datasets
from data import Dataset
from errors import TrainingAbort
from models import NetworkState, clone_state, init_network, save_checkpoint
from run_store import (
    METRICS_CSV,
    METRICS_FILE,
    MetricsWriter,
    RunManifest,
    TeacherCache,
    prepare_run_dir,
    utc_now,
    write_manifest,
    write_metrics_csv,
)
from train import (
    Strategy,
    evaluate,
    prepare_backbone,
    pretrain_teacher,
    train_baseline,
    train_sequential,
    train_simultaneous,
)
from commands.utils import apply_overrides, load_or_default, resolve_root

logger = logging.getLogger(__name__)

STUDENT_CHECKPOINT = "student.json"
TEACHER_CHECKPOINT = "teacher.json"


def teacher_hashes(cfg: ExperimentConfig) -> Tuple[str, str]:
    """(prepared-backbone key, head-pretrained key)."""
    backbone_key = cfg.teacher_key()
    head_key = {**backbone_key, "teacher_head": cfg.teacher_head.model_dump(mode="json")}
    return config_hash(backbone_key), config_hash(head_key)


def prepare_teacher(cfg: ExperimentConfig, train: Dataset, test: Dataset,
                    cache: TeacherCache) -> Tuple[NetworkState, str]:
    """
    Teacher ready for distillation: pretrained frozen backbone with fresh new
    layers, plus a pretrained frozen head for the sequential strategy.
    Both stages are cached by config hash.
    """
    backbone_key, head_key = teacher_hashes(cfg)
    sequential = cfg.train.strategy == Strategy.SEQUENTIAL
    key = head_key if sequential else backbone_key

    teacher = cache.get(key)
    if teacher is not None:
        return teacher, key

    teacher = cache.get(backbone_key)
    if teacher is None:
        logger.info("Preparing teacher backbone (%d epochs)", cfg.teacher_backbone.sgd.total_epochs)
        teacher = init_network(cfg.teacher, seed=cfg.teacher_backbone.seed)
        teacher = prepare_backbone(teacher, train, test, cfg.teacher_backbone)
        cache.put(backbone_key, teacher)
    if sequential:
        logger.info("Pretraining teacher head (%d epochs)", cfg.teacher_head.sgd.total_epochs)
        teacher = pretrain_teacher(clone_state(teacher), train, test, cfg.teacher_head)
        cache.put(head_key, teacher)
    return teacher, key


def execute_run(cfg: ExperimentConfig, run_dir, root: Optional[Path] = None,
                baseline: bool = False) -> RunManifest:
    """
    One complete run into run_dir: teacher preparation (unless baseline),
    the configured strategy, metrics, checkpoints and the manifest.
    A training abort still leaves the metrics prefix and an aborted manifest.
    """
    run_dir = prepare_run_dir(run_dir)
    root = Path(root) if root is not None else run_dir
    started_at = utc_now()
    train, test = load_datasets(cfg)

    teacher, teacher_key = None, None
    if not baseline:
        teacher, teacher_key = prepare_teacher(cfg, train, test, TeacherCache(root))
    student = init_network(cfg.student, seed=cfg.train.seed)
    initial_accuracy = evaluate(student, test)
    strategy = "baseline" if baseline else cfg.train.strategy.value
    logger.info("Run '%s' seed %d (%s) -> %s", cfg.label, cfg.train.seed, strategy, run_dir)

    artifacts = {"metrics": METRICS_FILE, "metrics_csv": METRICS_CSV}
    error = None
    with MetricsWriter(run_dir / METRICS_FILE) as writer:
        try:
            if baseline:
                train_baseline(student, train, test, cfg.train, on_epoch=writer)
            elif cfg.train.strategy == Strategy.SEQUENTIAL:
                train_sequential(teacher, student, train, test, cfg.train, on_epoch=writer)
            else:
                train_simultaneous(teacher, student, train, test, cfg.train, on_epoch=writer)
        except TrainingAbort as e:
            error = e
        records = list(writer.records)
    write_metrics_csv(records, run_dir / METRICS_CSV)

    if error is None:
        save_checkpoint(student, run_dir / STUDENT_CHECKPOINT)
        artifacts["student_checkpoint"] = STUDENT_CHECKPOINT
        if teacher is not None:
            save_checkpoint(teacher, run_dir / TEACHER_CHECKPOINT)
            artifacts["teacher_checkpoint"] = TEACHER_CHECKPOINT

    manifest = RunManifest(
        label=cfg.label,
        seed=cfg.train.seed,
        strategy=strategy,
        status="completed" if error is None else "aborted",
        config=cfg.model_dump(mode="json", by_alias=True),
        teacher_hash=teacher_key,
        started_at=started_at,
        finished_at=utc_now(),
        epochs_completed=len(records),
        initial_student_accuracy=initial_accuracy,
        teacher_accuracy=evaluate(teacher, test) if teacher is not None else None,
        student_accuracy=records[-1].test_accuracy if records else initial_accuracy,
        artifacts=artifacts,
        error=error.detail if error is not None else None,
    )
    write_manifest(manifest, run_dir)
    if error is not None:
        raise error
    logger.info("Run finished: student acc %.4f (initial %.4f)", manifest.student_accuracy, initial_accuracy)
    return manifest


@click.command("run")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Experiment config (JSON).")
@click.option("--seed", type=int, default=None, help="Override train.seed.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output root directory.")
@click.option("--strategy", type=click.Choice([s.value for s in Strategy]), default=None)
@click.option("--baseline", is_flag=True, help="Train the student with L_ce only.")
def run_command(config_path, seed, out, strategy, baseline):
    """Distil one student and write metrics plus a manifest."""
    cfg = apply_overrides(load_or_default(config_path), seed=seed, strategy=strategy)
    root = resolve_root(cfg, out)
    run_dir = root / cfg.label / f"seed-{cfg.train.seed}"
    manifest = execute_run(cfg, run_dir, root=root, baseline=baseline)
    click.echo(f"{run_dir}\tstudent_accuracy={manifest.student_accuracy:.4f}")
