"""Run configuration: defaults, JSON parsing, validation, and hashing.

Physical defaults follow the reference setup (receiver radius 5 um,
diffusion coefficient 79.4 um^2/s, 5.5-15 um transmitter placement); the
molecule count, step size, and scenario count default to desk-scale values
that keep a full pipeline run tractable.  Unknown keys are rejected so that
typos never silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

__all__ = ["RunConfig", "ConfigError", "parse_config", "config_hash"]

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unknown configuration key; the message names the key."""


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = CONFIG_SCHEMA_VERSION
    # physics
    rx_radius_um: float = 5.0
    diffusion_coeff: float = 79.4
    obs_time_s: float = 0.4
    dt_s: float = 1e-4
    d_min_um: float = 5.5
    d_max_um: float = 15.0
    n_molecules_per_tx: int = 2000
    # experiment
    n_tx: int = 2
    n_scenarios: int = 1000
    master_seed: int = 0
    # correction methods
    k_nn: int = 10
    support_fraction: float = 0.75
    d_inversion_max_um: float = 30.0
    # training
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 500
    patience: int = 20
    dropout: float = 0.1
    weight_decay: float = 1e-5
    # outputs (not part of the semantic hash)
    out_dir: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"schema_version: unsupported value {self.schema_version!r}")
        positive = [
            "rx_radius_um", "diffusion_coeff", "obs_time_s", "dt_s",
            "learning_rate", "support_fraction",
        ]
        for key in positive:
            v = getattr(self, key)
            if not isinstance(v, (int, float)) or not v > 0:
                raise ConfigError(f"{key}: must be a positive number, got {v!r}")
        at_least_one = ["n_molecules_per_tx", "n_tx", "n_scenarios", "k_nn", "batch_size", "max_epochs", "patience"]
        for key in at_least_one:
            v = getattr(self, key)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{key}: must be an integer >= 1, got {v!r}")
        if self.d_min_um <= self.rx_radius_um:
            raise ConfigError(f"d_min_um: must exceed rx_radius_um={self.rx_radius_um}, got {self.d_min_um}")
        if self.d_max_um <= self.d_min_um:
            raise ConfigError(f"d_max_um: must exceed d_min_um={self.d_min_um}, got {self.d_max_um}")
        if not 0.5 <= self.support_fraction < 1.0:
            raise ConfigError(f"support_fraction: must lie in [0.5, 1), got {self.support_fraction}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout: must lie in [0, 1), got {self.dropout}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay: must be >= 0, got {self.weight_decay}")
        if self.d_inversion_max_um <= self.rx_radius_um:
            raise ConfigError(f"d_inversion_max_um: must exceed rx_radius_um, got {self.d_inversion_max_um}")
        if self.dt_s > self.obs_time_s:
            raise ConfigError(f"dt_s: step {self.dt_s} exceeds the observation window {self.obs_time_s}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown configuration key")
        return cls(**data)

    def replace(self, **overrides) -> "RunConfig":
        merged = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in merged:
                raise ConfigError(f"{key}: unknown configuration key")
            merged[key] = value
        return RunConfig.from_dict(merged)


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load a JSON config file (optional) and apply explicit overrides on top."""
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config: file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: {path} is not valid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config: {path} must hold a JSON object")
        config = RunConfig.from_dict(data)
    else:
        config = RunConfig()
    return config.replace(**(overrides or {}))


def config_hash(config: RunConfig) -> str:
    """Hash of the semantically meaningful fields (output paths excluded)."""
    doc = config.to_dict()
    doc.pop("out_dir")
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
