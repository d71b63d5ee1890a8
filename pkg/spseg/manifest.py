"""
Pipeline configuration files and run manifests.

A pipeline config is a flat ``key=value`` file (dotenv syntax). Every key
has a default, so an empty or missing file gives the standard run.
"""

import logging
import os
from typing import Dict, List, Optional, Union

from dotenv import dotenv_values
from pydantic import BaseModel, Field, ValidationError

from .errors import ConfigError
from .partition import PartitionParams
from .trainkit import TrainConfig

logger = logging.getLogger(__name__)


class PipelineConfig(TrainConfig, PartitionParams):
    """
    Every tunable of a run: training, partition and supervision.

    Training and partition keys, with their defaults and bounds, come from
    ``TrainConfig`` and ``PartitionParams``.
    """
    k_neighbors: int = Field(default=5, ge=1, description="Neighbors per superpoint in the graph")
    rate: float = Field(default=0.0001, gt=0.0, le=1.0, description="Share of points annotated")

    class Config:
        extra = "forbid"

    def train_config(self, log_every: int = 20) -> TrainConfig:
        """Training fields; ``log_every`` applies unless the config sets it."""
        values = {k: getattr(self, k) for k in TrainConfig.model_fields}
        if 'log_every' not in self.model_fields_set:
            values['log_every'] = log_every
        return TrainConfig(**values)

    def partition_params(self) -> PartitionParams:
        return PartitionParams(**{k: getattr(self, k) for k in PartitionParams.model_fields})

    def header(self) -> Dict[str, object]:
        return self.model_dump()


def _reason(error: ValidationError) -> str:
    parts = []
    for err in error.errors():
        key = ".".join(str(p) for p in err['loc']) or 'config'
        parts.append(f"{key}: {err['msg']}")
    return "; ".join(parts)


def parse_pipeline_config(values: Dict[str, Optional[str]], source: str = 'config') -> PipelineConfig:
    """Validate raw string values; ``none`` or an empty value clears an optional key."""
    cleaned = {}
    for key, value in values.items():
        key = key.strip().lower()
        if value is None or value.strip().lower() in ('', 'none'):
            value = None
        cleaned[key] = value
    cleaned = {k: v for k, v in cleaned.items() if v is not None or k == 'max_extent'}
    try:
        return PipelineConfig(**cleaned)
    except ValidationError as e:
        raise ConfigError(f"{source}: {_reason(e)}")


def load_pipeline_config(path: Optional[Union[str, os.PathLike]] = None,
                         overrides: Optional[Dict[str, object]] = None) -> PipelineConfig:
    """
    Read a flat config file, then apply ``overrides`` (e.g. command-line flags).

    Unknown keys and ill-typed values raise ``ConfigError``.
    """
    values: Dict[str, Optional[str]] = {}
    source = 'defaults'
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        values = dict(dotenv_values(path))
        source = str(path)
    config = parse_pipeline_config(values, source)
    if overrides:
        try:
            config = PipelineConfig(**{**config.model_dump(exclude_unset=True), **overrides})
        except ValidationError as e:
            raise ConfigError(f"{source}: {_reason(e)}")
    logger.debug(f"Pipeline config from {source}: {config.model_dump()}")
    return config


class RunManifest(BaseModel):
    """What a command runs on and where its outputs go."""
    config_path: Optional[str] = Field(default=None, description="Pipeline config file")
    cloud_paths: List[str] = Field(default_factory=list, description="Input point clouds")
    output_dir: str = Field(default='runs', description="Directory receiving every output")
    seed: int = Field(default=0, ge=0, description="Run seed")

    class Config:
        extra = "forbid"

    def prepare_output(self) -> str:
        """Create the output directory; fails when it cannot be written."""
        try:
            os.makedirs(self.output_dir, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"cannot create output directory {self.output_dir}: {e.strerror}")
        if not os.access(self.output_dir, os.W_OK):
            raise ConfigError(f"output directory is not writable: {self.output_dir}")
        return self.output_dir

    def output_path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)
