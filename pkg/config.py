"""
Experiment configuration: one versioned JSON document per run.
"""
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from data import Dataset, MixtureSpec, gen_mixture, load_csv, split_dataset
from errors import ConfigError
from models import NetworkSpec, Role, student_spec, teacher_spec
from train import PretrainConfig, TrainConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_OUTPUT_ROOT = "runs"

# Load environment variables from .env file.
load_dotenv()


def output_root() -> Path:
    return Path(os.getenv("EGA_OUTPUT_ROOT", DEFAULT_OUTPUT_ROOT))


def log_level() -> str:
    return os.getenv("EGA_LOG_LEVEL", "INFO").upper()


class CsvSource(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    path: Path
    label_column: str = "label"
    test_fraction: float = Field(0.25, gt=0, lt=1)
    split_seed: int = Field(0, ge=0)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: Literal[1]
    label: str = "run"
    output_dir: Optional[Path] = None
    mixture: Optional[MixtureSpec] = None
    csv: Optional[CsvSource] = None
    teacher: NetworkSpec = teacher_spec()
    student: NetworkSpec = student_spec()
    teacher_backbone: PretrainConfig = PretrainConfig(train_backbone=True)
    teacher_head: PretrainConfig = PretrainConfig()
    train: TrainConfig = TrainConfig()

    @model_validator(mode="after")
    def _consistent(self):
        if self.mixture is not None and self.csv is not None:
            raise ValueError("give either 'mixture' or 'csv', not both")
        if self.teacher.role != Role.TEACHER or self.student.role != Role.STUDENT:
            raise ValueError("teacher and student specs must carry roles 'teacher' and 'student'")
        if self.teacher.embed_dim != self.student.embed_dim:
            raise ValueError(f"embed_dim differs: teacher {self.teacher.embed_dim}, student {self.student.embed_dim}")
        if (self.teacher.input_dim, self.teacher.num_classes) != (self.student.input_dim, self.student.num_classes):
            raise ValueError("teacher and student must agree on input_dim and num_classes")
        mixture = self.data_spec
        if mixture is not None and (mixture.input_dim, mixture.num_classes) != (
                self.student.input_dim, self.student.num_classes):
            raise ValueError(f"mixture is {mixture.input_dim}-d with {mixture.num_classes} classes, "
                             f"networks expect {self.student.input_dim}-d with {self.student.num_classes}")
        return self

    @property
    def data_spec(self) -> Optional[MixtureSpec]:
        if self.csv is not None:
            return None
        return self.mixture if self.mixture is not None else MixtureSpec()

    def teacher_key(self) -> dict:
        """Everything the prepared teacher depends on."""
        return {
            "schema_version": self.schema_version,
            "data": self.csv.model_dump(mode="json") if self.csv else self.data_spec.model_dump(mode="json"),
            "teacher": self.teacher.model_dump(mode="json"),
            "teacher_backbone": self.teacher_backbone.model_dump(mode="json"),
        }


def format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        where = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{where}: {item['msg']}")
    return "; ".join(lines)


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(f"invalid config {source}: {format_validation_error(e)}") from e


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    cfg = parse_config(text, str(path))
    logger.info("Loaded config '%s' from %s", cfg.label, path)
    return cfg


def canonical_json(payload) -> str:
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json", by_alias=True)
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(payload) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def load_datasets(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    if cfg.csv is not None:
        full = load_csv(cfg.csv.path, cfg.csv.label_column, num_classes=cfg.student.num_classes)
        if full.input_dim != cfg.student.input_dim:
            raise ConfigError(f"{cfg.csv.path} has {full.input_dim} feature columns, "
                              f"networks expect {cfg.student.input_dim}")
        return split_dataset(full, cfg.csv.test_fraction, cfg.csv.split_seed)
    return gen_mixture(cfg.data_spec)
