"""Experiment configuration: scale presets, JSON schema and validation."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..probing.suite import PROBES
from ..sae import VARIANTS

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Everything that determines a run. Field docs live in docs/config_schema.json."""

    seed: int = 0
    scale: str = "desk"
    output_dir: str = ""
    base_kinds: list[str] = field(default_factory=lambda: ["mlp", "cnn"])
    sae_base: str = "cnn"
    sae_grid: list[list] = field(default_factory=list)
    probe_grid: list[list] = field(default_factory=list)
    trunc_lengths: list[int] = field(default_factory=list)
    n_samples: int = 2000
    base_epochs: int = 100
    sae_epochs: int = 100
    m_epochs: int = 150
    batch_size: int = 64
    learning_rate: float = 1e-3
    eval_orbits: int = 256
    probe_orbits: int = 1024
    probes: list[str] = field(default_factory=lambda: list(PROBES))
    schema_version: int = SCHEMA_VERSION

    @property
    def out(self) -> Path:
        return Path(self.output_dir or f"runs/{self.scale}-seed{self.seed}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def digest(self, keys: list[str]) -> str:
        """Stable hash of the listed fields; used for stage cache keys."""
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in sorted(keys)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def sae_pairs(self) -> list[tuple[str, int]]:
        return [(str(v), int(k)) for v, k in self.sae_grid]

    def probe_pairs(self) -> list[tuple[str, int]]:
        return [(str(v), int(k)) for v, k in self.probe_grid]


_GRID_ALL = [[v, k] for v in ("regular", "wide", "two_layer", "invariant") for k in (8, 16, 32)]

PRESETS: dict[str, dict] = {
    # reduced grid: every ordering check is covered, probing runs at K=16 / L=32 only
    "desk": {
        "n_samples": 2000,
        "base_epochs": 100,
        "sae_epochs": 100,
        "m_epochs": 150,
        "sae_grid": [["regular", 8], ["regular", 16], ["regular", 32],
                     ["invariant", 8], ["invariant", 16], ["invariant", 32],
                     ["wide", 16], ["two_layer", 16]],
        "probe_grid": [["regular", 16], ["invariant", 16]],
        "trunc_lengths": [32],
    },
    "paper": {
        "n_samples": 10_000,
        "base_epochs": 100,
        "sae_epochs": 500,
        "m_epochs": 150,
        "sae_grid": _GRID_ALL,
        "probe_grid": _GRID_ALL,
        "trunc_lengths": [8, 32],
    },
}

_TYPES = {
    "seed": int, "scale": str, "output_dir": str, "base_kinds": list, "sae_base": str,
    "sae_grid": list, "probe_grid": list, "trunc_lengths": list, "n_samples": int,
    "base_epochs": int, "sae_epochs": int, "m_epochs": int, "batch_size": int,
    "learning_rate": (int, float), "eval_orbits": int, "probe_orbits": int, "probes": list,
    "schema_version": int,
}


def _check_grid(name: str, grid) -> None:
    for item in grid:
        if not (isinstance(item, (list, tuple)) and len(item) == 2):
            raise ConfigError(f"{name}: entries must be [variant, K], got {item!r}")
        variant, k = item
        if variant not in VARIANTS:
            raise ConfigError(f"{name}: unknown SAE variant {variant!r}")
        if not isinstance(k, int) or isinstance(k, bool) or k < 1:
            raise ConfigError(f"{name}: K must be a positive integer, got {k!r}")
    if len({tuple(i) for i in grid}) != len(grid):
        raise ConfigError(f"{name}: duplicate entries")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    for key, typ in _TYPES.items():
        value = getattr(cfg, key)
        if isinstance(value, bool) or not isinstance(value, typ):
            raise ConfigError(f"{key}: expected {typ}, got {type(value).__name__}")
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {cfg.schema_version} not supported (expected {SCHEMA_VERSION})")
    if cfg.scale not in PRESETS:
        raise ConfigError(f"scale must be one of {sorted(PRESETS)}, got {cfg.scale!r}")
    if not cfg.base_kinds or not set(cfg.base_kinds) <= {"mlp", "cnn"}:
        raise ConfigError(f"base_kinds must be a non-empty subset of ['mlp', 'cnn'], got {cfg.base_kinds}")
    if cfg.sae_base not in cfg.base_kinds:
        raise ConfigError(f"sae_base {cfg.sae_base!r} is not among base_kinds")
    _check_grid("sae_grid", cfg.sae_grid)
    _check_grid("probe_grid", cfg.probe_grid)
    missing = {tuple(p) for p in cfg.probe_grid} - {tuple(p) for p in cfg.sae_grid}
    if missing:
        raise ConfigError(f"probe_grid entries without a trained SAE: {sorted(missing)}")
    if any(not isinstance(L, int) or L < 1 for L in cfg.trunc_lengths):
        raise ConfigError("trunc_lengths must be positive integers")
    if not set(cfg.probes) <= set(PROBES) or not cfg.probes:
        raise ConfigError(f"probes must be a non-empty subset of {list(PROBES)}")
    for key in ("n_samples", "base_epochs", "sae_epochs", "m_epochs", "batch_size", "probe_orbits"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if cfg.eval_orbits < 2:
        raise ConfigError("eval_orbits must be >= 2")
    if cfg.learning_rate <= 0:
        raise ConfigError("learning_rate must be positive")
    return cfg


def make_config(scale: str = "desk", overrides: dict | None = None) -> ExperimentConfig:
    """Preset for ``scale`` with ``overrides`` applied; unknown keys are rejected."""
    overrides = dict(overrides or {})
    scale = overrides.pop("scale", scale)
    if scale not in PRESETS:
        raise ConfigError(f"scale must be one of {sorted(PRESETS)}, got {scale!r}")
    unknown = set(overrides) - set(_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values = copy.deepcopy(PRESETS[scale])
    values.update(overrides)
    values["scale"] = scale
    return validate(ExperimentConfig(**values))


def load_config(path: str | Path | None = None, scale: str | None = None, seed: int | None = None) -> ExperimentConfig:
    """Read a JSON config; ``scale``/``seed`` from the command line take precedence."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"{path}: schema_version {version} not supported (expected {SCHEMA_VERSION})")
    if scale is not None:
        data["scale"] = scale
    if seed is not None:
        data["seed"] = seed
    return make_config(data.get("scale", "desk"), data)
