"""
Desk-scale datasets: Gaussian mixtures, CSV tables, batching and jitter.
"""
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from errors import ConfigError, DataError

logger = logging.getLogger(__name__)


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Normalization":
        std = features.std(axis=0)
        return cls(mean=features.mean(axis=0), std=np.where(std > 0, std, 1.0))

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: Split = Split.TRAIN
    normalization: Optional[Normalization] = None

    def __post_init__(self):
        features = _readonly(np.asarray(self.features, dtype=np.float64))
        labels = _readonly(np.asarray(self.labels, dtype=np.int64))
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise DataError(f"features {features.shape} and labels {labels.shape} disagree")
        if not np.all(np.isfinite(features)):
            raise DataError("features contain NaN or Inf")
        bad = np.flatnonzero((labels < 0) | (labels >= self.num_classes))
        if bad.size:
            raise DataError(f"label {labels[bad[0]]} outside [0, {self.num_classes})", row=int(bad[0]))
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def normalized(self, norm: Normalization) -> "Dataset":
        return Dataset(norm.apply(self.features), self.labels, self.num_classes, self.split, norm)


class MixtureSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_classes: int = Field(4, ge=1)
    input_dim: int = Field(20, ge=1)
    clusters_per_class: int = Field(2, ge=1)
    cluster_spread: float = Field(1.5, gt=0)
    center_scale: float = Field(1.0, gt=0)
    train_per_class: int = Field(150, ge=1)
    test_per_class: int = Field(100, ge=1)
    seed: int = Field(0, ge=0)


def _draw(rng: np.random.Generator, centers: np.ndarray, per_class: int, spread: float):
    num_classes, clusters, dim = centers.shape
    features, labels = [], []
    for c in range(num_classes):
        picks = rng.integers(clusters, size=per_class)
        features.append(centers[c, picks] + rng.normal(0.0, spread, size=(per_class, dim)))
        labels.append(np.full(per_class, c))
    return np.concatenate(features), np.concatenate(labels)


def gen_mixture(spec: MixtureSpec) -> Tuple[Dataset, Dataset]:
    """Class-conditional Gaussian clusters, normalized with train statistics."""
    center_seq, train_seq, test_seq = np.random.SeedSequence(spec.seed).spawn(3)
    centers = np.random.default_rng(center_seq).normal(
        0.0, spec.center_scale, size=(spec.num_classes, spec.clusters_per_class, spec.input_dim))
    x_train, y_train = _draw(np.random.default_rng(train_seq), centers, spec.train_per_class, spec.cluster_spread)
    x_test, y_test = _draw(np.random.default_rng(test_seq), centers, spec.test_per_class, spec.cluster_spread)

    norm = Normalization.fit(x_train)
    train = Dataset(norm.apply(x_train), y_train, spec.num_classes, Split.TRAIN, norm)
    test = Dataset(norm.apply(x_test), y_test, spec.num_classes, Split.TEST, norm)
    logger.info("Generated mixture: %d train / %d test samples, %d classes, dim %d",
                len(train), len(test), spec.num_classes, spec.input_dim)
    return train, test


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def load_csv(path, label_column: str = "label", num_classes: Optional[int] = None,
             normalize: bool = False, split: Split = Split.TRAIN) -> Dataset:
    """
    Read a header-first CSV: one integer label column, every other column numeric.
    Rows are reported 1-based, counting data rows after the header.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"CSV file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DataError(f"empty CSV file: {path}")
    except pd.errors.ParserError as e:
        line = re.search(r"line (\d+)", str(e))
        raise DataError(f"malformed CSV {path}: {e}", row=int(line.group(1)) - 1 if line else None) from e
    except UnicodeDecodeError as e:
        raise DataError(f"{path} is not UTF-8 text (byte offset {e.start})") from e
    if label_column not in frame.columns:
        raise DataError(f"label column missing from {path}", column=label_column)
    if frame.empty:
        raise DataError(f"no data rows in {path}")

    feature_columns = [c for c in frame.columns if c != label_column]
    if not feature_columns:
        raise DataError(f"no feature columns in {path}")

    features = np.empty((len(frame), len(feature_columns)))
    for j, column in enumerate(feature_columns):
        for i, cell in enumerate(frame[column]):
            try:
                features[i, j] = float(cell)
            except (TypeError, ValueError):
                raise DataError(f"non-numeric value '{cell}'", row=i + 1, column=column)
            if not np.isfinite(features[i, j]):
                raise DataError(f"non-finite value '{cell}'", row=i + 1, column=column)

    labels = np.empty(len(frame), dtype=np.int64)
    for i, cell in enumerate(frame[label_column]):
        try:
            labels[i] = int(cell)
        except ValueError:
            raise DataError(f"label '{cell}' is not an integer", row=i + 1, column=label_column)
        if labels[i] < 0 or (num_classes is not None and labels[i] >= num_classes):
            raise DataError(f"label {labels[i]} outside [0, {num_classes})", row=i + 1, column=label_column)

    if num_classes is None:
        num_classes = int(labels.max()) + 1
    ds = Dataset(features, labels, num_classes, split)
    if normalize:
        ds = ds.normalized(Normalization.fit(ds.features))
    logger.info("Loaded %d rows × %d features from %s", len(ds), ds.input_dim, path)
    return ds


def write_csv(ds: Dataset, path, label_column: str = "label") -> Path:
    path = Path(path)
    frame = pd.DataFrame(ds.features, columns=[f"x{j}" for j in range(ds.input_dim)])
    frame[label_column] = ds.labels
    # 17 significant digits round-trip every float64 exactly
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def split_dataset(ds: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Stratified split; normalization is fit on the train part only."""
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        count = int(round(len(members) * test_fraction))
        test_idx.extend(rng.permutation(members)[:count].tolist())
    mask = np.zeros(len(ds), dtype=bool)
    mask[test_idx] = True
    if mask.all() or not mask.any():
        raise DataError(f"split of {len(ds)} rows at fraction {test_fraction} leaves an empty side")
    norm = Normalization.fit(ds.features[~mask])
    train = Dataset(norm.apply(ds.features[~mask]), ds.labels[~mask], ds.num_classes, Split.TRAIN, norm)
    test = Dataset(norm.apply(ds.features[mask]), ds.labels[mask], ds.num_classes, Split.TEST, norm)
    return train, test


# ---------------------------------------------------------------------------
# Batching and augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    number: int
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.indices.shape[0]


def batch_iter(ds: Dataset, batch_size: int, epoch_seed: int) -> List[Batch]:
    """Shuffled batches; a final remnant smaller than 2 rows is dropped."""
    if batch_size < 2:
        raise ConfigError(f"batch size must be at least 2, got {batch_size}")
    order = np.random.default_rng(epoch_seed).permutation(len(ds))
    batches = []
    for number, start in enumerate(range(0, len(order), batch_size)):
        idx = order[start:start + batch_size]
        if idx.shape[0] < 2:
            break
        batches.append(Batch(number, idx, ds.features[idx], ds.labels[idx]))
    return batches


def augment(batch: Batch, noise_std: float, seed: int, view: int = 0) -> Batch:
    """Additive Gaussian jitter, reproducible per (seed, batch number, view)."""
    if noise_std < 0:
        raise ConfigError(f"noise_std must be non-negative, got {noise_std}")
    if noise_std == 0:
        return batch
    rng = np.random.default_rng([seed, batch.number, view])
    jittered = batch.features + rng.normal(0.0, noise_std, size=batch.features.shape)
    return Batch(batch.number, batch.indices, jittered, batch.labels)
