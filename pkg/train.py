"""
Training drivers: teacher preparation, simultaneous (mutual) and sequential
distillation, the CE-only baseline, and evaluation.

Every driver updates the network states it is given in place and reports one
EpochMetrics per epoch through the optional `on_epoch` callback.
"""
import logging
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from data import Batch, Dataset, augment, batch_iter
from diffcore import Sgd, SgdConfig, Tensor, backward, lr_at_epoch
from ega import LossNorm, combine_terms, cross_entropy, ega_terms, kd_loss, total_loss
from errors import ConfigError, DataError, NumericalError, TrainingAbort
from models import (
    GROUPS,
    NetworkState,
    embed_batch,
    network_forward,
    reset_new_layers,
    set_frozen,
    trainable_params,
)

logger = logging.getLogger(__name__)


class Strategy(str, Enum):
    SIMULTANEOUS = "simultaneous"
    SEQUENTIAL = "sequential"


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    strategy: Strategy = Strategy.SIMULTANEOUS
    lam: float = Field(0.3, ge=0, alias="lambda")
    node_weight: float = Field(1.0, ge=0)
    lambda_ega: float = Field(0.8, ge=0)
    enable_kd: bool = False
    kd_temperature: float = Field(4.0, gt=0)
    kd_weight: float = Field(1.0, ge=0)
    batch_size: int = Field(64, ge=2)
    sgd: SgdConfig = SgdConfig()
    # new teacher layers in simultaneous mode; same schedule shape as sgd
    teacher_lr: float = Field(0.01, gt=0)
    seed: int = Field(0, ge=0)
    eval_every: int = Field(1, ge=1)
    augment_noise: float = Field(0.0, ge=0)
    loss_norm: LossNorm = LossNorm.FROBENIUS


class PretrainConfig(BaseModel):
    """Supervised training of a teacher before distillation."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    sgd: SgdConfig = SgdConfig(initial_lr=0.05, total_epochs=60, decay_start_epoch=40, decay_every=10)
    batch_size: int = Field(64, ge=2)
    seed: int = Field(0, ge=0)
    train_backbone: bool = False


class EpochMetrics(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epoch: int
    lr: float
    train_loss: float
    l_ce: float
    l_node: float
    l_edge: float
    l_kd: Optional[float] = None
    test_accuracy: float = Field(ge=0, le=1)


EpochCallback = Callable[[EpochMetrics], None]


def predict(state: NetworkState, features: np.ndarray) -> np.ndarray:
    _, logits = network_forward(state, Tensor(features))
    # argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(logits.data, axis=1)


def evaluate(state: NetworkState, ds: Dataset) -> float:
    if len(ds) == 0:
        raise DataError("cannot evaluate on an empty split")
    return float(np.mean(predict(state, ds.features) == ds.labels))


def _warn_remnant(ds: Dataset, batch_size: int):
    if len(ds) % batch_size == 1:
        logger.warning("Batch remnant of 1 row dropped each epoch (N=%d, B=%d)", len(ds), batch_size)


class _Totals:
    """Running per-epoch sums of the loss components."""

    def __init__(self, with_kd: bool):
        self.with_kd = with_kd
        self.count = 0
        self.loss = self.ce = self.node = self.edge = self.kd = 0.0

    def add(self, loss: float, ce: float, node: float = 0.0, edge: float = 0.0, kd: float = 0.0):
        self.count += 1
        self.loss += loss
        self.ce += ce
        self.node += node
        self.edge += edge
        self.kd += kd

    def metrics(self, epoch: int, lr: float, accuracy: float) -> EpochMetrics:
        n = max(self.count, 1)
        return EpochMetrics(
            epoch=epoch, lr=lr, train_loss=self.loss / n, l_ce=self.ce / n,
            l_node=self.node / n, l_edge=self.edge / n,
            l_kd=self.kd / n if self.with_kd else None, test_accuracy=accuracy,
        )


def _check_finite(value: float, what: str, epoch: int, batch: int) -> float:
    if not np.isfinite(value):
        raise TrainingAbort(f"non-finite {what} at epoch {epoch}, batch {batch}", epoch, batch)
    return value


def _should_evaluate(cfg_eval_every: int, epoch: int, total: int) -> bool:
    return (epoch + 1) % cfg_eval_every == 0 or epoch == total - 1


# ---------------------------------------------------------------------------
# Teacher preparation
# ---------------------------------------------------------------------------

def pretrain_teacher(teacher: NetworkState, train: Dataset, test: Dataset, cfg: PretrainConfig,
                     on_epoch: Optional[EpochCallback] = None) -> NetworkState:
    """
    Train the teacher's head with L_ce (and the backbone too when
    cfg.train_backbone). The embed layer gets no gradient from L_ce and is left
    as initialised. The original frozen mask is restored afterwards.
    """
    original_frozen = set(teacher.frozen)
    working = {"embed"} if cfg.train_backbone else original_frozen | {"embed"}
    set_frozen(teacher, working)
    params = trainable_params(teacher)
    optimizer = Sgd(params, cfg.sgd)
    _warn_remnant(train, cfg.batch_size)
    stage = "backbone" if cfg.train_backbone else "head"

    try:
        accuracy = evaluate(teacher, test)
        for epoch in range(cfg.sgd.total_epochs):
            lr = lr_at_epoch(cfg.sgd, epoch)
            totals = _Totals(with_kd=False)
            for batch in batch_iter(train, cfg.batch_size, cfg.seed + epoch):
                try:
                    _, logits = network_forward(teacher, Tensor(batch.features))
                    loss = cross_entropy(logits, batch.labels)
                except NumericalError as e:
                    raise TrainingAbort(f"teacher {stage} pretraining: {e.detail}", epoch, batch.number) from e
                value = _check_finite(loss.item(), "teacher loss", epoch, batch.number)
                backward(loss)
                optimizer.step(epoch)
                totals.add(value, value)
            if _should_evaluate(1, epoch, cfg.sgd.total_epochs):
                accuracy = evaluate(teacher, test)
            metrics = totals.metrics(epoch, lr, accuracy)
            logger.info("teacher %s epoch %d lr %.6g loss %.6f acc %.4f", stage, epoch, lr,
                        metrics.train_loss, accuracy)
            if on_epoch is not None:
                on_epoch(metrics)
    finally:
        set_frozen(teacher, original_frozen)

    teacher.metadata[f"{stage}_train_accuracy"] = evaluate(teacher, train)
    teacher.metadata[f"{stage}_test_accuracy"] = evaluate(teacher, test)
    teacher.metadata[f"{stage}_epochs"] = float(cfg.sgd.total_epochs)
    logger.info("Teacher %s pretraining done: train acc %.4f, test acc %.4f", stage,
                teacher.metadata[f"{stage}_train_accuracy"], teacher.metadata[f"{stage}_test_accuracy"])
    return teacher


def prepare_backbone(teacher: NetworkState, train: Dataset, test: Dataset, cfg: PretrainConfig,
                     on_epoch: Optional[EpochCallback] = None) -> NetworkState:
    """
    Stand-in for a pretrained backbone: train the whole teacher on the task,
    then put fresh head and embed layers on top of the frozen backbone.
    """
    backbone_cfg = cfg.model_copy(update={"train_backbone": True})
    pretrain_teacher(teacher, train, test, backbone_cfg, on_epoch)
    return reset_new_layers(teacher, seed=cfg.seed + 1)


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------

def _views(batch: Batch, cfg: TrainConfig, epoch: int) -> Tuple[np.ndarray, np.ndarray]:
    seed = cfg.seed + epoch
    return (augment(batch, cfg.augment_noise, seed, view=0).features,
            augment(batch, cfg.augment_noise, seed, view=1).features)


def _student_step(student: NetworkState, teacher: Optional[NetworkState], batch: Batch,
                  cfg: TrainConfig, epoch: int, student_opt: Sgd, teacher_opt: Optional[Sgd],
                  totals: _Totals) -> int:
    """One optimisation step; returns the number of degenerate student rows seen."""
    teacher_x, student_x = _views(batch, cfg, epoch)
    degenerate = 0
    try:
        s_features, s_logits = network_forward(student, Tensor(student_x))
        ce = cross_entropy(s_logits, batch.labels)
        if teacher is None:
            loss, node, edge, kd = ce, 0.0, 0.0, None
        else:
            t_features, t_logits = network_forward(teacher, Tensor(teacher_x))
            x_t = embed_batch(teacher, t_features)
            x_s = embed_batch(student, s_features)
            degenerate = int(x_s.degenerate.sum())
            l_node, l_edge = ega_terms(x_t, x_s, cfg.loss_norm)
            ega = combine_terms(l_node, l_edge, cfg.lam, cfg.node_weight)
            kd = kd_loss(s_logits, t_logits, cfg.kd_temperature) if cfg.enable_kd else None
            loss = total_loss(ce, ega, cfg.lambda_ega, kd, cfg.kd_weight)
            node, edge = l_node.item(), l_edge.item()
            if teacher_opt is not None:
                teacher_ce = cross_entropy(t_logits, batch.labels)
    except NumericalError as e:
        raise TrainingAbort(f"non-finite value at epoch {epoch}, batch {batch.number}: {e.detail}",
                            epoch, batch.number) from e

    value = _check_finite(loss.item(), "student loss", epoch, batch.number)
    backward(loss)
    student_opt.step(epoch)
    if teacher is not None and teacher_opt is not None:
        _check_finite(teacher_ce.item(), "teacher loss", epoch, batch.number)
        backward(teacher_ce)
        teacher_opt.step(epoch)
    totals.add(value, ce.item(), node, edge, kd.item() if kd is not None else 0.0)
    return degenerate


def _run(student: NetworkState, teacher: Optional[NetworkState], train: Dataset, test: Dataset,
         cfg: TrainConfig, train_teacher: bool,
         on_epoch: Optional[EpochCallback]) -> Tuple[NetworkState, List[EpochMetrics]]:
    if train.input_dim != student.spec.input_dim:
        raise ConfigError(f"data width {train.input_dim} != student input_dim {student.spec.input_dim}")
    # without a teacher nothing reaches the student embed layer
    student_opt = Sgd(trainable_params(student, exclude=() if teacher is not None else ("embed",)), cfg.sgd)
    teacher_opt = None
    if train_teacher:
        # L_ce_t never reaches the embed layer, so only the head is stepped
        teacher_sched = cfg.sgd.model_copy(update={"initial_lr": cfg.teacher_lr})
        teacher_opt = Sgd(trainable_params(teacher, exclude=("embed",)), teacher_sched)
    _warn_remnant(train, cfg.batch_size)

    history: List[EpochMetrics] = []
    accuracy = evaluate(student, test)
    total = cfg.sgd.total_epochs
    for epoch in range(total):
        lr = lr_at_epoch(cfg.sgd, epoch)
        totals = _Totals(with_kd=teacher is not None and cfg.enable_kd)
        degenerate = 0
        for batch in batch_iter(train, cfg.batch_size, cfg.seed + epoch):
            degenerate += _student_step(student, teacher, batch, cfg, epoch, student_opt, teacher_opt, totals)
        if degenerate:
            logger.warning("Epoch %d: %d degenerate student embedding row(s)", epoch, degenerate)
        if _should_evaluate(cfg.eval_every, epoch, total):
            accuracy = evaluate(student, test)
        metrics = totals.metrics(epoch, lr, accuracy)
        history.append(metrics)
        logger.info("epoch %d lr %.6g loss %.6f ce %.6f node %.6f edge %.6f acc %.4f", epoch, lr,
                    metrics.train_loss, metrics.l_ce, metrics.l_node, metrics.l_edge, accuracy)
        if on_epoch is not None:
            on_epoch(metrics)
    return student, history


def train_baseline(student: NetworkState, train: Dataset, test: Dataset, cfg: TrainConfig,
                   on_epoch: Optional[EpochCallback] = None) -> Tuple[NetworkState, List[EpochMetrics]]:
    """Student trained with L_ce alone; the no-distillation reference."""
    return _run(student, None, train, test, cfg, False, on_epoch)


def train_simultaneous(teacher: NetworkState, student: NetworkState, train: Dataset, test: Dataset,
                       cfg: TrainConfig, on_epoch: Optional[EpochCallback] = None
                       ) -> Tuple[NetworkState, List[EpochMetrics]]:
    """
    Mutual learning: per batch the teacher's new layers take an L_ce step with
    their own optimizer while the student takes an L_ce + λ_EGA·L_EGA step.
    """
    if cfg.strategy != Strategy.SIMULTANEOUS:
        raise ConfigError(f"train_simultaneous called with strategy '{cfg.strategy.value}'")
    if "backbone" not in teacher.frozen:
        logger.warning("Teacher backbone is not frozen; marking it frozen")
        set_frozen(teacher, teacher.frozen | {"backbone"})
    return _run(student, teacher, train, test, cfg, True, on_epoch)


def train_sequential(teacher: NetworkState, student: NetworkState, train: Dataset, test: Dataset,
                     cfg: TrainConfig, on_epoch: Optional[EpochCallback] = None
                     ) -> Tuple[NetworkState, List[EpochMetrics]]:
    """Distil from a fully frozen, already pretrained teacher."""
    if cfg.strategy != Strategy.SEQUENTIAL:
        raise ConfigError(f"train_sequential called with strategy '{cfg.strategy.value}'")
    if "head_test_accuracy" not in teacher.metadata:
        logger.warning("Teacher head was not pretrained; distilling from an untrained head")
    original_frozen = set(teacher.frozen)
    set_frozen(teacher, GROUPS)
    try:
        return _run(student, teacher, train, test, cfg, False, on_epoch)
    finally:
        set_frozen(teacher, original_frozen)
