"""
Embedding graph alignment losses.

Node embeddings of one batch form a graph whose edges are Pearson correlations.
The student is pulled toward the teacher's graph (edge matching) and toward
perfect same-instance / zero cross-instance correlation with the teacher
(node matching). Teacher-side inputs are always treated as constants.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from diffcore import (
    Tensor,
    add,
    as_tensor,
    div,
    frobenius_norm,
    log_softmax,
    matmul,
    mul,
    reshape,
    row_center,
    row_norm,
    scale_add,
    sub,
    sum as tensor_sum,
    transpose,
)
from errors import ConfigError, DataError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

# Added to the Pearson denominator so zero-variance rows give ~0, not NaN.
PEARSON_EPS = 1e-8


class Origin(str, Enum):
    TEACHER = "teacher"
    STUDENT = "student"


class LossNorm(str, Enum):
    FROBENIUS = "frobenius"
    MEAN_SQUARED = "mean_squared"


def _degenerate_rows(values: np.ndarray) -> np.ndarray:
    centered = values - values.mean(axis=1, keepdims=True)
    return np.sum(centered * centered, axis=1) <= PEARSON_EPS


@dataclass(frozen=True)
class EmbeddingBatch:
    values: Tensor
    origin: Origin = Origin.STUDENT
    degenerate: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.values.data.ndim != 2:
            raise ShapeError("embedding_batch", self.values.shape, detail="expected B×D")
        if self.values.shape[0] < 2:
            raise ShapeError("embedding_batch", self.values.shape, detail="a graph needs at least 2 nodes")
        if self.values.shape[1] < 2:
            raise ShapeError("embedding_batch", self.values.shape, detail="Pearson needs D >= 2")
        object.__setattr__(self, "degenerate", _degenerate_rows(self.values.data))

    def detach(self) -> "EmbeddingBatch":
        return EmbeddingBatch(self.values.detach(), self.origin)


@dataclass(frozen=True)
class EdgeMatrix:
    values: Tensor
    degenerate: np.ndarray


@dataclass(frozen=True)
class NodeMatrix:
    values: Tensor


Embeddings = Union[EmbeddingBatch, Tensor, np.ndarray]


def as_batch(x: Embeddings, origin: Origin = Origin.STUDENT) -> EmbeddingBatch:
    if isinstance(x, EmbeddingBatch):
        return x
    return EmbeddingBatch(as_tensor(x), origin)


def correlate(a: Tensor, b: Tensor) -> Tensor:
    """Pearson correlation between every row of a and every row of b."""
    ca, cb = row_center(a), row_center(b)
    cov = matmul(ca, transpose(cb))
    scale = scale_add(matmul(row_norm(ca), transpose(row_norm(cb))), 1.0, PEARSON_EPS)
    return div(cov, scale)


def pearson(x, y) -> Tensor:
    """Correlation coefficient of two D-vectors as a scalar tensor."""
    x, y = as_tensor(x), as_tensor(y)
    if x.data.ndim != 1 or x.shape != y.shape:
        raise ShapeError("pearson", x.shape, y.shape)
    if x.shape[0] < 2:
        raise ShapeError("pearson", x.shape, y.shape, detail="D >= 2 required")
    if not (np.all(np.isfinite(x.data)) and np.all(np.isfinite(y.data))):
        raise NumericalError("pearson: non-finite input")
    d = x.shape[0]
    return reshape(correlate(reshape(x, 1, d), reshape(y, 1, d)))


def edge_matrix(batch: Embeddings) -> EdgeMatrix:
    batch = as_batch(batch)
    if batch.degenerate.any():
        logger.debug("%d degenerate %s embedding row(s)", int(batch.degenerate.sum()), batch.origin.value)
    return EdgeMatrix(correlate(batch.values, batch.values), batch.degenerate)


def node_matrix(teacher: Embeddings, student: Embeddings) -> NodeMatrix:
    teacher = as_batch(teacher, Origin.TEACHER)
    student = as_batch(student)
    if teacher.values.shape != student.values.shape:
        raise ShapeError("node_matrix", teacher.values.shape, student.values.shape)
    return NodeMatrix(correlate(teacher.values, student.values))


def _values(m) -> Tensor:
    return m.values if isinstance(m, (EdgeMatrix, NodeMatrix)) else as_tensor(m)


def matrix_distance(diff: Tensor, norm: LossNorm = LossNorm.FROBENIUS) -> Tensor:
    """‖diff‖_F, or ‖diff‖_F² / (rows·cols) for the mean-squared variant."""
    dist = frobenius_norm(diff)
    if LossNorm(norm) == LossNorm.MEAN_SQUARED:
        return scale_add(mul(dist, dist), 1.0 / diff.data.size)
    return dist


def edge_loss(teacher_edges, student_edges, norm: LossNorm = LossNorm.FROBENIUS) -> Tensor:
    target = _values(teacher_edges).detach()
    current = _values(student_edges)
    if target.shape != current.shape:
        raise ShapeError("edge_loss", target.shape, current.shape)
    return matrix_distance(sub(current, target), norm)


def node_loss(nodes, norm: LossNorm = LossNorm.FROBENIUS) -> Tensor:
    values = _values(nodes)
    if values.data.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ShapeError("node_loss", values.shape, detail="square matrix required")
    return matrix_distance(sub(values, Tensor(np.eye(values.shape[0]))), norm)


def ega_terms(teacher: Embeddings, student: Embeddings,
              norm: LossNorm = LossNorm.FROBENIUS) -> Tuple[Tensor, Tensor]:
    """(L_node, L_edge) with the teacher embeddings held constant."""
    teacher = as_batch(teacher, Origin.TEACHER).detach()
    student = as_batch(student)
    l_node = node_loss(node_matrix(teacher, student), norm)
    l_edge = edge_loss(edge_matrix(teacher), edge_matrix(student), norm)
    return l_node, l_edge


def ega_loss(teacher: Embeddings, student: Embeddings, lam: float = 0.3,
             node_weight: float = 1.0, norm: LossNorm = LossNorm.FROBENIUS) -> Tensor:
    if lam < 0 or node_weight < 0:
        raise ConfigError(f"loss weights must be non-negative (lambda={lam}, node_weight={node_weight})")
    l_node, l_edge = ega_terms(teacher, student, norm)
    return combine_terms(l_node, l_edge, lam, node_weight)


def combine_terms(l_node: Tensor, l_edge: Tensor, lam: float, node_weight: float = 1.0) -> Tensor:
    return add(scale_add(l_node, node_weight), scale_add(l_edge, lam))


def _one_hot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError("one_hot", labels.shape, detail="labels must be a vector")
    for row, label in enumerate(labels):
        if not 0 <= int(label) < num_classes:
            raise DataError(f"label {int(label)} outside [0, {num_classes})", row=row)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels.astype(np.int64)] = 1.0
    return out


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood; log_softmax subtracts the row max."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2 or logits.shape[0] != len(labels):
        raise ShapeError("cross_entropy", logits.shape, (len(labels),))
    target = Tensor(_one_hot(labels, logits.shape[1]))
    picked = tensor_sum(mul(log_softmax(logits), target))
    return scale_add(picked, -1.0 / logits.shape[0])


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def kd_loss(student_logits: Tensor, teacher_logits, temperature: float = 4.0) -> Tensor:
    """T² · batch-mean KL(softmax(teacher/T) ‖ softmax(student/T))."""
    if temperature <= 0:
        raise ConfigError(f"KD temperature must be positive, got {temperature}")
    student_logits = as_tensor(student_logits)
    teacher = as_tensor(teacher_logits).data
    if student_logits.shape != teacher.shape or teacher.ndim != 2:
        raise ShapeError("kd_loss", student_logits.shape, teacher.shape)
    t2, batch = temperature * temperature, teacher.shape[0]
    log_pt = _log_softmax_np(teacher * (1.0 / temperature))
    pt = np.exp(log_pt)
    entropy_term = float(np.sum(pt * log_pt))
    log_ps = log_softmax(scale_add(student_logits, 1.0 / temperature))
    cross = tensor_sum(mul(log_ps, Tensor(pt)))
    return scale_add(cross, -t2 / batch, t2 * entropy_term / batch)


def total_loss(ce, ega, lambda_ega: float, kd: Optional[Tensor] = None, lambda_kd: float = 0.0) -> Tensor:
    """L = ce + λ_EGA·ega (+ λ_KD·kd)."""
    if lambda_ega < 0 or lambda_kd < 0:
        raise ConfigError(f"loss weights must be non-negative (lambda_ega={lambda_ega}, lambda_kd={lambda_kd})")
    loss = add(as_tensor(ce), scale_add(as_tensor(ega), lambda_ega))
    if kd is not None:
        loss = add(loss, scale_add(as_tensor(kd), lambda_kd))
    return loss
