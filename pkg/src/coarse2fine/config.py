"""Flat text configuration for pipeline runs.

Files hold one `key = value` pair per line with `#` comments. Every field
of PipelineConfig is overridable from file or from `--set key=value`
pairs; serialization round-trips losslessly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .coarse import LAYER_CONFIGS

SCENARIOS = ("uniform", "planted-block", "random")
ALPHA_MODES = ("interp", "ones")
PAIRWISE_MODES = ("outer", "off")
DTYPES = ("f32", "f64")


class ConfigError(ValueError):
    """Raised for unknown keys, bad values, or malformed config text."""


@dataclass
class PipelineConfig:
    """Everything a pipeline run needs besides the weights themselves."""

    coarse_h: int = 64
    coarse_w: int = 64
    fine_scale: int = 4
    out_h: int = 1024
    out_w: int = 1024
    channels: int = 256
    heads: int = 8
    window: int = 6
    temp_coarse: float = 10.0
    temp_fine: float = 10.0
    layer_ids: tuple[int, ...] = (1, 4, 8, 11)
    alpha_expand: str = "interp"
    pairwise: str = "outer"
    scenario: str = "planted-block"
    dtype: str = "f32"
    seed: int = 42
    batch: int = 1
    encoder_heads: int = 4

    def __post_init__(self):
        self.layer_ids = _parse_layer_ids(self.layer_ids)
        for name in ("coarse_h", "coarse_w", "fine_scale", "out_h", "out_w",
                     "channels", "heads", "window", "batch", "encoder_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        for name in ("temp_coarse", "temp_fine"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {DTYPES}, got {self.dtype!r}")
        if self.alpha_expand not in ALPHA_MODES:
            raise ConfigError(f"alpha_expand must be one of {ALPHA_MODES}")
        if self.pairwise not in PAIRWISE_MODES:
            raise ConfigError(f"pairwise must be one of {PAIRWISE_MODES}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")

    @property
    def fine_h(self) -> int:
        return self.coarse_h * self.fine_scale

    @property
    def fine_w(self) -> int:
        return self.coarse_w * self.fine_scale

    @property
    def num_patches(self) -> int:
        return self.coarse_h * self.coarse_w

    def to_text(self) -> str:
        lines = ["# pipeline configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg = apply_override(cfg, key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_text(Path(path).read_text())


def _parse_layer_ids(value) -> tuple[int, ...]:
    if isinstance(value, str):
        name = value.strip()
        if name in LAYER_CONFIGS:
            return LAYER_CONFIGS[name]
        parts = [p for p in name.replace("(", "").replace(")", "").split(",") if p.strip()]
        try:
            value = tuple(int(p) for p in parts)
        except ValueError as e:
            raise ConfigError(f"bad layer_ids {name!r}: {e}") from None
    ids = tuple(int(i) for i in value)
    if not ids:
        raise ConfigError("layer_ids must not be empty")
    if any(i < 0 for i in ids):
        raise ConfigError(f"layer_ids must be >= 0, got {ids}")
    return ids


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def apply_override(cfg: PipelineConfig, key: str, value: str) -> PipelineConfig:
    """Return a new config with one field replaced, parsing by field type."""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(cfg, key)
    try:
        if isinstance(current, bool):
            parsed = value.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            parsed = int(value)
        elif isinstance(current, float):
            parsed = float(value)
        elif isinstance(current, tuple):
            parsed = value
        else:
            parsed = value.strip()
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from None
    try:
        return replace(cfg, **{key: parsed})
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None


def apply_overrides(cfg: PipelineConfig, pairs) -> PipelineConfig:
    """Apply a list of `key=value` strings in order."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set needs key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        cfg = apply_override(cfg, key.strip(), value)
    return cfg
