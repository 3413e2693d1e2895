"""Flat ``key=value`` pipeline configuration."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .nn.adam import AdamHyper
from .nn.train import TrainConfig
from .synthworld import WorldSpec


@dataclass(frozen=True)
class PipelineConfig:
    # grid and tiles
    cell_size: float = 0.01
    tile_h: int = 74
    tile_w: int = 74
    bands: int = 7
    k_max: int = 17
    # sampling
    chunk_size: int = 1000
    train_frac: float = 0.1
    val_frac: float = 0.01
    # network and optimiser
    preset: str = "vgg-a-paper"
    dropout: float = 0.0
    batchnorm: bool = False
    batch_size: int = 512
    epochs: int = 30
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # boosted trees
    gbrt_rounds: int = 100
    gbrt_depth: int = 3
    gbrt_shrinkage: float = 0.1
    gbrt_log_target: bool = False
    include_cell_count: bool = False
    # synthetic world
    rows: int = 100
    cols: int = 100
    n_cities: int = 3
    city_peak_range: tuple[float, float] = (2000.0, 20000.0)
    city_radius_range: tuple[float, float] = (6.0, 16.0)
    n_confusers: int = 4
    confuser_size: int = 2
    growth_factor_range: tuple[float, float] = (0.7, 1.4)
    rural_range: tuple[float, float] = (0.0, 0.0)
    structures_per_class: int = 2
    county_grid: tuple[int, int] = (4, 4)
    origin_lon: float = -90.0
    origin_lat: float = 35.0

    def __post_init__(self):
        if not (self.train_frac > 0 and self.val_frac > 0 and self.train_frac + self.val_frac <= 1):
            raise ConfigError(f"need 0 < train_frac, val_frac with sum <= 1 (got {self.train_frac}, {self.val_frac})")
        for name in ("batch_size", "epochs", "chunk_size", "tile_h", "tile_w", "bands"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.cell_size > 0:
            raise ConfigError("cell_size must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.epochs, AdamHyper(self.learning_rate, self.beta1, self.beta2, self.adam_eps), self.seed)

    def world_spec(self) -> WorldSpec:
        return WorldSpec(
            seed=self.seed, rows=self.rows, cols=self.cols, tile_h=self.tile_h, tile_w=self.tile_w,
            bands=self.bands, n_cities=self.n_cities, city_peak_range=self.city_peak_range,
            city_radius_range=self.city_radius_range, n_confusers=self.n_confusers,
            confuser_size=self.confuser_size, growth_factor_range=self.growth_factor_range,
            rural_range=self.rural_range, structures_per_class=self.structures_per_class,
            county_grid=self.county_grid, origin_lon=self.origin_lon, origin_lat=self.origin_lat,
            cell_size=self.cell_size,
        )

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_HINTS = typing.get_type_hints(PipelineConfig)


def parse_value(key: str, text: str):
    if key not in _HINTS:
        raise ConfigError(f"unknown config key {key!r}")
    hint = _HINTS[key]
    text = text.strip()
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if typing.get_origin(hint) is tuple:
            kinds = typing.get_args(hint)
            parts = [p for p in text.replace(" ", "").split(",")]
            if len(parts) != len(kinds):
                raise ValueError(text)
            return tuple(k(p) for k, p in zip(kinds, parts))
    except ValueError:
        raise ConfigError(f"unparsable value for {key}: {text!r}") from None
    raise ConfigError(f"unsupported config type for {key}")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        try:
            values[key] = parse_value(key, val)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (already typed or raw strings)."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(), str(p)))
    for key, val in (overrides or {}).items():
        if key not in _HINTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = parse_value(key, val) if isinstance(val, str) else val
    return PipelineConfig(**values)


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
