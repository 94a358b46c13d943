"""
Run output on disk: directories, the per-epoch metrics sink, manifests and
the prepared-teacher checkpoint cache.
"""
import json
import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Literal, Optional

import pandas as pd
from pydantic import BaseModel, ConfigDict

from errors import ConfigError
from models import NetworkState, load_checkpoint, save_checkpoint
from train import EpochMetrics

logger = logging.getLogger(__name__)

TOOLKIT_VERSION = "0.1.0"
METRICS_SCHEMA_VERSION = 1
METRICS_FILE = "metrics.ndjson"
METRICS_CSV = "metrics.csv"
MANIFEST_FILE = "manifest.json"
CACHE_DIR = ".teacher_cache"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def prepare_run_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {path}: {e.strerror}") from e
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def _atomic_write(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


class MetricsWriter:
    """
    Newline-delimited JSON: a header line with the schema version and field
    order, then one record per epoch. Every line is flushed as written, so an
    aborted run leaves a readable prefix.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.records: List[EpochMetrics] = []
        self._fh = self.path.open("w", encoding="utf-8", newline="\n")
        header = {"schema_version": METRICS_SCHEMA_VERSION, "fields": list(EpochMetrics.model_fields)}
        self._write(json.dumps(header, separators=(",", ":")))

    def _write(self, line: str):
        self._fh.write(line + "\n")
        self._fh.flush()

    def __call__(self, metrics: EpochMetrics):
        self.records.append(metrics)
        self._write(metrics.model_dump_json())

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_metrics(path) -> List[EpochMetrics]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ConfigError(f"metrics file {path} has no header")
    header = json.loads(lines[0])
    if header.get("schema_version") != METRICS_SCHEMA_VERSION:
        raise ConfigError(f"metrics file {path} has schema version {header.get('schema_version')}")
    return [EpochMetrics.model_validate_json(line) for line in lines[1:] if line]


def write_metrics_csv(records: List[EpochMetrics], path) -> Path:
    path = Path(path)
    frame = pd.DataFrame([r.model_dump() for r in records], columns=list(EpochMetrics.model_fields))
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


class RunManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    toolkit_version: str = TOOLKIT_VERSION
    label: str
    seed: int
    strategy: str
    status: Literal["completed", "aborted"] = "completed"
    config: dict
    teacher_hash: Optional[str] = None
    started_at: str
    finished_at: str
    epochs_completed: int
    initial_student_accuracy: float
    teacher_accuracy: Optional[float] = None
    student_accuracy: float
    artifacts: Dict[str, str]
    error: Optional[str] = None


def write_manifest(manifest: RunManifest, run_dir) -> Path:
    run_dir = Path(run_dir)
    missing = [name for name, rel in manifest.artifacts.items() if not (run_dir / rel).exists()]
    if missing:
        raise ConfigError(f"manifest references missing artifacts: {', '.join(sorted(missing))}")
    path = run_dir / MANIFEST_FILE
    _atomic_write(path, manifest.model_dump_json(indent=2))
    logger.info("Manifest written: %s", path)
    return path


def read_manifest(path) -> RunManifest:
    return RunManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))


class TeacherCache:
    """Prepared teachers stored as checkpoints keyed by their config hash."""

    def __init__(self, root):
        self.root = Path(root) / CACHE_DIR

    def path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def get(self, key: str) -> Optional[NetworkState]:
        path = self.path(key)
        if not path.exists():
            return None
        logger.info("Teacher cache hit: %s", key[:12])
        return load_checkpoint(path)

    def put(self, key: str, state: NetworkState) -> Path:
        prepare_run_dir(self.root)
        return save_checkpoint(state, self.path(key))
