import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

import pandas as pd
from pydantic import ValidationError

from config import ExperimentConfig, format_validation_error, load_config, output_root
from errors import ConfigError

logger = logging.getLogger(__name__)


def load_or_default(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        logger.info("No --config given; using the reference mixture defaults")
        return ExperimentConfig(schema_version=1)
    return load_config(path)


def revalidate(cfg: ExperimentConfig, update: Dict) -> ExperimentConfig:
    """Apply a nested update dict and validate the result as a fresh config."""
    doc = cfg.model_dump(mode="json", by_alias=True)
    for key, value in update.items():
        if isinstance(value, dict):
            doc[key] = {**doc.get(key, {}), **value}
        else:
            doc[key] = value
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(f"invalid override: {format_validation_error(e)}") from e


def apply_overrides(cfg: ExperimentConfig, seed: Optional[int] = None,
                    strategy: Optional[str] = None) -> ExperimentConfig:
    train = {}
    if seed is not None:
        train["seed"] = seed
    if strategy is not None:
        train["strategy"] = strategy
    return revalidate(cfg, {"train": train}) if train else cfg


def resolve_root(cfg: ExperimentConfig, out: Optional[str]) -> Path:
    if out is not None:
        return Path(out)
    if cfg.output_dir is not None:
        return Path(cfg.output_dir)
    return output_root()


def parse_values(text: Optional[str], cast: Callable = float, default: Optional[List] = None) -> List:
    """Comma-separated list, e.g. '0.2,0.4,1'."""
    if text is None:
        if default is None:
            raise ConfigError("no values given")
        return list(default)
    try:
        values = [cast(part.strip()) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"cannot parse values '{text}': {e}") from e
    if not values:
        raise ConfigError(f"no values in '{text}'")
    return values


def value_slug(value) -> str:
    return str(value).replace(".", "p").replace("-", "m")


def write_report(rows: List[Dict], out_dir: Path, name: str, extra: Optional[Dict] = None) -> Dict[str, Path]:
    """Report as pretty JSON plus a plot-ready CSV of the same rows."""
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{name}.json"
    csv_path = out_dir / f"{name}.csv"
    payload = {"rows": rows, **(extra or {})}
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    pd.DataFrame(rows).to_csv(csv_path, index=False, float_format="%.17g")
    logger.info("Report written: %s, %s", json_path, csv_path)
    return {"json": json_path, "csv": csv_path}
