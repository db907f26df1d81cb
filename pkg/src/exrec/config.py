"""Run configuration and its flat ``section.key = value`` file form."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .enhancer import EnhancerConfig
from .errors import ConfigError
from .evalkit import KS
from .filtering import DEFAULT_DELTA, DEFAULT_L
from .kcmp import BATCH_SIZES, KcmpConfig
from .reranker import RerankerConfig
from .synthetic import SynthConfig

BETA_GRID = (0.4, 0.6, 0.8, 1.0)


@dataclass
class DataConfig:
    interactions: str = ""
    concepts: str = ""
    n_concepts: int | None = None
    train_ratio: float = 8.0
    test_ratio: float = 2.0
    active_fraction: float = 0.05


@dataclass
class FilterConfig:
    delta: float = DEFAULT_DELTA
    L: int = DEFAULT_L
    exclude_solved: bool = True


@dataclass
class EvalConfig:
    ks: tuple = KS
    K: int = 10
    mode: str = "prob"  # inference head: det (mu) or prob (mu + sigma)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    enhancer: EnhancerConfig = field(default_factory=EnhancerConfig)
    kcmp: KcmpConfig = field(default_factory=KcmpConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    reranker: RerankerConfig = field(default_factory=RerankerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("data", "synth", "enhancer", "kcmp", "filter", "reranker", "eval")

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with ``seed`` pushed into every seeded component."""
        cfg = from_text(to_text(self))
        cfg.seed = seed
        cfg.synth.seed = seed
        cfg.kcmp.seed = seed
        cfg.reranker.seed = seed
        return cfg

    def validate(self):
        self.synth.validate()
        self.enhancer.validate()
        self.kcmp.validate()
        self.reranker.validate()
        if self.kcmp.batch_size not in BATCH_SIZES:
            raise ConfigError(f"kcmp.batch_size must be one of {BATCH_SIZES}")
        if not 0.0 <= self.filter.delta <= 1.0:
            raise ConfigError("filter.delta must lie in [0, 1]")
        if self.filter.L < 1 or self.eval.K < 1:
            raise ConfigError("filter.L and eval.K must be >= 1")
        if self.filter.L < self.eval.K:
            raise ConfigError("filter.L must be at least eval.K")
        if self.eval.mode not in ("det", "prob"):
            raise ConfigError("eval.mode must be det or prob")
        if not self.eval.ks or min(self.eval.ks) < 1:
            raise ConfigError("eval.ks must be positive cut-offs")
        if not 0.0 < self.data.active_fraction < 1.0:
            raise ConfigError("data.active_fraction must lie in (0, 1)")
        return self


def _items(obj, prefix=""):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            yield from _items(v, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", v


def to_text(cfg: RunConfig) -> str:
    lines = []
    for key, v in _items(cfg):
        lines.append(f"{key} = {json.dumps(list(v) if isinstance(v, tuple) else v)}")
    return "\n".join(lines) + "\n"


def _coerce(current, raw, key):
    if isinstance(current, tuple) and isinstance(raw, list):
        return tuple(raw)
    if isinstance(current, bool) or isinstance(raw, bool):
        if not isinstance(raw, bool):
            raise ConfigError(f"{key}: expected true/false")
        return raw
    if isinstance(current, float) and isinstance(raw, int):
        return float(raw)
    if current is not None and raw is not None and isinstance(current, (int, float, str)):
        if not isinstance(raw, type(current)):
            raise ConfigError(f"{key}: expected {type(current).__name__}, got {raw!r}")
    return raw


def from_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            raw = json.loads(value)
        except json.JSONDecodeError:
            raw = value
        parts = key.split(".")
        target = cfg
        for p in parts[:-1]:
            if p not in RunConfig.SECTIONS or not hasattr(target, p):
                raise ConfigError(f"config line {n}: unknown section {p!r}")
            target = getattr(target, p)
        if not any(f.name == parts[-1] for f in dataclasses.fields(target)):
            raise ConfigError(f"config line {n}: unknown key {key!r}")
        setattr(target, parts[-1], _coerce(getattr(target, parts[-1]), raw, key))
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return from_text(p.read_text(encoding="utf-8"))


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(to_text(cfg), encoding="utf-8")
