"""Config-driven pipeline orchestration with cached, checksummed stages."""

from .config import PRESETS, SCHEMA_VERSION, ConfigError, ExperimentConfig, load_config, make_config
from .manifest import RunManifest, StageRecord, derive_seed, file_checksum
from .stages import STAGES, Pipeline, StageDependencyError, StageError

__all__ = [
    "PRESETS", "SCHEMA_VERSION", "ConfigError", "ExperimentConfig", "load_config", "make_config",
    "RunManifest", "StageRecord", "derive_seed", "file_checksum",
    "STAGES", "Pipeline", "StageDependencyError", "StageError",
]
