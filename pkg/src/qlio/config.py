"""Run configuration and its ``key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qlio.imu import InitConfig, NoiseConfig
from qlio.manifold import GRAVITY_MAGNITUDE
from qlio.update import UpdateConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    update: UpdateConfig = field(default_factory=UpdateConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    init: InitConfig = field(default_factory=InitConfig)
    # LiDAR-to-body extrinsic, row-major rotation and translation
    extrinsic_rotation: tuple = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
    extrinsic_translation: tuple = (0.0, 0.0, 0.0)
    sweep_period_ms: float = 100.0
    removal_radius: float = 100.0
    removal_interval_s: float = 50.0
    imu_rate_hz: float = 0.0  # resample IMU to this rate when > 0
    reuse: bool = True
    quantize: bool = True
    seed: int = 0
    gravity: float = GRAVITY_MAGNITUDE

    def __post_init__(self):
        if not self.sweep_period_ms > 0.0:
            raise ConfigError("sweep_period_ms must be positive")
        if not self.removal_interval_s > 0.0:
            raise ConfigError("removal_interval_s must be positive")
        if not self.removal_radius > 0.0:
            raise ConfigError("removal_radius must be positive")
        if not self.gravity > 0.0:
            raise ConfigError("gravity must be positive")
        if self.imu_rate_hz < 0.0:
            raise ConfigError("imu_rate_hz must be non-negative")
        if len(self.extrinsic_rotation) != 9 or len(self.extrinsic_translation) != 3:
            raise ConfigError("extrinsic needs 9 rotation and 3 translation values")
        R = self.extrinsic_matrix()
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0.0:
            raise ConfigError("extrinsic_rotation is not a rotation matrix")
        if self.quantize and self.update.volume_size != 1.0:
            raise ConfigError("the quantized map requires volume_size = 1.0")

    @property
    def sweep_period_ns(self) -> int:
        return int(round(self.sweep_period_ms * 1e6))

    def extrinsic_matrix(self) -> np.ndarray:
        return np.asarray(self.extrinsic_rotation, dtype=float).reshape(3, 3)

    def extrinsic(self):
        return self.extrinsic_matrix(), np.asarray(self.extrinsic_translation, dtype=float)

    def with_overrides(self, **values) -> RunConfig:
        """Return a copy with flat ``key=value`` overrides applied."""
        return _apply(self, {k: v for k, v in values.items() if v is not None})


_SECTIONS = ("update", "noise", "init")


def _flat_fields(cfg: RunConfig):
    for f in dataclasses.fields(cfg):
        if f.name in _SECTIONS:
            sub = getattr(cfg, f.name)
            for g in dataclasses.fields(sub):
                yield g.name, f.name, getattr(sub, g.name)
        else:
            yield f.name, None, getattr(cfg, f.name)


def _coerce(current, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if isinstance(current, bool):
        low = text.lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        return tuple(float(v) for v in text.replace(",", " ").split())
    return text


def _apply(cfg: RunConfig, values: dict) -> RunConfig:
    known = {name: (section, current) for name, section, current in _flat_fields(cfg)}
    top, sections = {}, {s: {} for s in _SECTIONS}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        section, current = known[key]
        try:
            value = _coerce(current, raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
        (sections[section] if section else top)[key] = value
    try:
        for s in _SECTIONS:
            if sections[s]:
                top[s] = dataclasses.replace(getattr(cfg, s), **sections[s])
        return dataclasses.replace(cfg, **top)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return _apply(base or RunConfig(), values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    lines = []
    for name, _, value in _flat_fields(cfg):
        if isinstance(value, bool):
            text = "on" if value else "off"
        elif isinstance(value, tuple):
            text = " ".join(repr(float(v)) for v in value)
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{name} = {text}")
    return "\n".join(lines) + "\n"


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(format_config(cfg))
