"""Конфигурация пайплайна.

Приоритет источников (от младшего): значения по умолчанию, .env, EVIGRID_THREADS,
--config file.json, явные флаги командной строки.
"""

import json
import os
from typing import Any, Dict, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from evidential import SensorEvidenceConfig


THREADS_ENV = "EVIGRID_THREADS"
CONFIG_ECHO = "config.json"

_INSTRUCTIONS = (
    f"{THREADS_ENV} must be a positive integer. Set it in your .env, e.g.\n"
    f"    {THREADS_ENV}=4\n"
    "or pass --threads N on the command line."
)


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    voxel_edge: float = Field(0.125, gt=0.0)
    cell_edge: float = Field(0.125, gt=0.0)
    map_size: float = Field(100.0, gt=0.0)
    crop_cells: int = Field(512, gt=0)

    window: float = Field(2.0, ge=0.0)
    pose_radius: Optional[float] = Field(None, gt=0.0)
    corridor_low: float = 0.2
    corridor_high: float = 3.0

    ground_band: float = 0.2
    multipath_cutoff: float = -0.2
    plane_scale: float = Field(0.05, gt=0.0)

    batch_size: int = Field(6, ge=2)
    max_correspondence_distance: float = Field(1.0, gt=0.0)
    covariance_neighbors: int = Field(10, ge=3)
    covariance_epsilon: float = Field(1e-3, gt=0.0)

    evidence: SensorEvidenceConfig = SensorEvidenceConfig()

    certainty_k: float = Field(0.0, ge=0.0, le=1.0)
    asym_k: float = Field(0.0, ge=0.0, le=1.0)
    asym_sign: int = 1

    threads: Optional[int] = Field(None, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _consistent(self):
        if self.corridor_low > self.corridor_high:
            raise ValueError("corridor_low must not exceed corridor_high")
        if self.multipath_cutoff > self.ground_band:
            raise ValueError("multipath_cutoff must not exceed ground_band")
        if self.asym_sign not in (1, -1):
            raise ValueError("asym_sign must be +1 or -1")
        return self

    def echo(self) -> Dict[str, Any]:
        # число потоков не влияет на результат и не попадает в выходные файлы
        return self.model_dump(mode="json", exclude={"threads"})


def threads_from_env() -> Optional[int]:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        value = int(raw)
    except ValueError as exc:
        raise RuntimeError(_INSTRUCTIONS) from exc
    if value < 1:
        raise RuntimeError(_INSTRUCTIONS)
    return value


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    data: Dict[str, Any] = {}
    env_threads = threads_from_env()
    if env_threads is not None:
        data["threads"] = env_threads
    if path:
        with open(path, "r", encoding="utf-8") as f:
            data.update(json.load(f))
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return PipelineConfig.model_validate(data)


def resolve_threads(config: PipelineConfig) -> int:
    return config.threads or os.cpu_count() or 1


def write_config_echo(out_dir: str, config: PipelineConfig) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, CONFIG_ECHO)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.echo(), f, sort_keys=True, indent=2)
        f.write("\n")
    return path
