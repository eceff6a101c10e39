"""Run configuration: YAML file -> nested dataclasses."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .experts import TrainConfig
from .market_data import RegimeSpec, SplitSpec
from .router import RouterConfig

ROUTER_KINDS = ("llm", "rule", "cache", "oracle")
MODELS = ("llmoe", "moe2", "moe10", "mlp")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    prices: Optional[Path] = None
    news: Optional[Path] = None
    symbol: Optional[str] = None
    synthetic: Optional[dict] = None  # {seed, days, **RegimeSpec fields}
    train_fraction: float = 0.8

    @property
    def split(self) -> SplitSpec:
        return SplitSpec(self.train_fraction)


@dataclass
class RouterSection:
    kind: str = "rule"
    endpoint: str = RouterConfig.endpoint_url
    model: str = RouterConfig.model_id
    temperature: float = 0.0
    max_retries: int = 3
    timeout: float = 60.0
    fallback: str = "rule"
    retry_backoff: float = 0.5
    api_key_env: Optional[str] = None
    cache: Optional[Path] = None
    concurrency: int = 4

    def router_config(self) -> RouterConfig:
        return RouterConfig(self.endpoint, self.model, self.temperature, self.max_retries,
                            self.timeout, self.fallback, self.api_key_env, self.retry_backoff)


@dataclass
class TrainingSection:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    optimizer: str = "adam"
    early_stop_patience: Optional[int] = None
    min_partition_size: int = 30
    seeds: list = field(default_factory=lambda: list(range(1, 11)))

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        kw = dict(learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
                  optimizer=self.optimizer, early_stop_patience=self.early_stop_patience, seed=seed)
        kw.update(overrides)
        return TrainConfig(**kw)


@dataclass
class ExperimentSection:
    models: list = field(default_factory=lambda: list(MODELS))
    grid: dict = field(default_factory=dict)  # {"learning_rate": [...], "batch_size": [...]}


@dataclass
class RunConfig:
    data: DataSection
    router: RouterSection
    training: TrainingSection
    experiment: ExperimentSection
    output: Path

    def validate(self) -> "RunConfig":
        d = self.data
        if d.synthetic is None and d.prices is None:
            raise ConfigError("data: either 'prices' or 'synthetic' is required")
        for p in (d.prices, d.news):
            if p is not None and not p.exists():
                raise ConfigError(f"data file not found: {p}")
        d.split  # raises on a bad fraction
        if self.router.kind not in ROUTER_KINDS:
            raise ConfigError(f"router.kind must be one of {ROUTER_KINDS}, got {self.router.kind!r}")
        self.router.router_config()
        if self.router.concurrency < 1:
            raise ConfigError("router.concurrency must be >= 1")
        if not self.training.seeds:
            raise ConfigError("training.seeds must be non-empty")
        self.training.train_config(self.training.seeds[0])
        unknown = set(self.experiment.models) - set(MODELS)
        if unknown:
            raise ConfigError(f"unknown models {sorted(unknown)}; choose from {MODELS}")
        for axis, values in self.experiment.grid.items():
            if axis not in ("learning_rate", "batch_size"):
                raise ConfigError(f"grid axis {axis!r} not supported")
            if not values:
                raise ConfigError(f"grid axis {axis!r} is empty")
        return self

    @property
    def cache_path(self) -> Path:
        return self.router.cache or self.output / "decisions_cache.jsonl"

    def regime_spec(self) -> RegimeSpec:
        extra = {k: v for k, v in (self.data.synthetic or {}).items() if k not in ("seed", "days")}
        return RegimeSpec(**extra)


def _section(cls, raw: Optional[dict], name: str):
    raw = dict(raw or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    return cls(**raw)


def _resolve(base: Path, p) -> Optional[Path]:
    if p is None:
        return None
    p = Path(p).expanduser()
    return p if p.is_absolute() else base / p


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    base = path.parent
    data = _section(DataSection, raw.get("data"), "data")
    data.prices, data.news = _resolve(base, data.prices), _resolve(base, data.news)
    router = _section(RouterSection, raw.get("router"), "router")
    router.cache = _resolve(base, router.cache)
    cfg = RunConfig(
        data=data,
        router=router,
        training=_section(TrainingSection, raw.get("training"), "training"),
        experiment=_section(ExperimentSection, raw.get("experiment"), "experiment"),
        output=_resolve(base, raw.get("output", "out")),
    )
    return cfg
