"""Experiment configuration and its INI-style text form.

The file is a set of ``[section]`` blocks with ``key = value`` lines.  Any
key may be overridden with ``section.key=value``; unknown keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .volume import DEFAULT_ORGANS, Organ, PhantomSpec


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    iterations: int = 20000
    volumes_per_step: int = 1
    train_volumes: int = 64
    log_every: int = 1
    eval_seed: int = 1_000_000
    eval_volumes: int = 64


@dataclass
class SamplingConfig:
    alpha: int = 5
    patch_mm: float = 96.0
    member_mm: float = 24.0
    min_fg: float = 0.25
    fg_threshold: float = 0.05
    route_cap: int = 120
    mode: str = "random"
    window_level: float = 200.0
    window_width: float = 800.0


@dataclass
class ModelConfig:
    grid: int = 8
    cell: int = 2
    hidden: int = 16
    dim: int = 32
    member_dim: int = 16
    head_scale_mm: float = 100.0


@dataclass
class LossConfig:
    w_crsc: float = 1.0
    w_gmp: float = 1.0
    w_rbcs: float = 1.0
    gmp_eps: float = 1.0
    rbcs_mode: str = "aggregate"


@dataclass
class OptimConfig:
    rule: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema: float = 0.99


@dataclass
class PhantomConfig:
    seed: int = 0
    shape: str = "40 48 48"
    spacing: str = "5.0 4.0 4.0"
    organs: str = ""  # "cz cy cx radius_mm hu jitter_mm; ..." ; empty = built-in layout
    noise_hu: float = 10.0
    origin_range_mm: float = 250.0

    def spec(self) -> PhantomSpec:
        return PhantomSpec(
            seed=self.seed,
            shape=tuple(int(s) for s in self.shape.split()),
            spacing=tuple(float(s) for s in self.spacing.split()),
            organs=parse_organs(self.organs) if self.organs.strip() else DEFAULT_ORGANS,
            noise_hu=self.noise_hu,
            origin_range_mm=self.origin_range_mm,
        )


def parse_organs(text: str) -> tuple[Organ, ...]:
    organs = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        vals = [float(x) for x in chunk.split()]
        if len(vals) != 6:
            raise ConfigError(f"phantom.organs: expected 6 numbers per organ, got {chunk!r}")
        organs.append(Organ(tuple(vals[:3]), vals[3], vals[4], vals[5]))
    return tuple(organs)


@dataclass
class TrainConfig:
    run: RunConfig = field(default_factory=RunConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def validate(self) -> None:
        s, o = self.sampling, self.optim
        if s.alpha < 2:
            raise ConfigError(f"sampling.alpha must be >= 2, got {s.alpha}")
        if not 0.0 <= o.ema <= 1.0:
            raise ConfigError(f"optim.ema must lie in [0, 1], got {o.ema}")
        if not o.lr > 0:
            raise ConfigError(f"optim.lr must be positive, got {o.lr}")
        if o.rule not in ("adam", "sgd"):
            raise ConfigError(f"optim.rule must be 'adam' or 'sgd', got {o.rule!r}")
        if s.patch_mm <= 0 or s.member_mm <= 0 or s.member_mm > s.patch_mm:
            raise ConfigError("sampling: need 0 < member_mm <= patch_mm")
        if self.loss.rbcs_mode not in ("aggregate", "literal"):
            raise ConfigError(f"loss.rbcs_mode must be aggregate|literal, got {self.loss.rbcs_mode!r}")
        if self.loss.gmp_eps <= 0:
            raise ConfigError("loss.gmp_eps must be positive")
        if s.route_cap < 1:
            raise ConfigError("sampling.route_cap must be >= 1")
        if self.run.iterations < 0 or self.run.volumes_per_step < 1 or self.run.train_volumes < 1:
            raise ConfigError("run: iterations >= 0, volumes_per_step >= 1, train_volumes >= 1")
        try:
            self.phantom.spec().validate()
        except ValueError as exc:
            raise ConfigError(f"phantom.{exc}") from exc

    # -- text form --------------------------------------------------------
    def to_dict(self) -> dict[str, dict[str, Any]]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        cfg = cls()
        for section, values in data.items():
            for key, value in values.items():
                _assign(cfg, section, key, value)
        return cfg

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, values in self.to_dict().items():
            parser[section] = {k: _fmt(v) for k, v in values.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string(text)
        cfg = cls()
        for section in parser.sections():
            for key, value in parser[section].items():
                _assign(cfg, section, key, value)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def override(self, assignments: Iterable[str]) -> "TrainConfig":
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r}: expected section.key=value")
            dotted, value = item.split("=", 1)
            if "." not in dotted:
                raise ConfigError(f"override {item!r}: expected section.key=value")
            section, key = dotted.strip().split(".", 1)
            _assign(self, section, key, value.strip())
        return self


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _assign(cfg: TrainConfig, section: str, key: str, value) -> None:
    sub = getattr(cfg, section, None)
    if sub is None or not dataclasses.is_dataclass(sub):
        raise ConfigError(f"unknown config section {section!r}")
    types = {f.name: f.type for f in dataclasses.fields(sub)}
    if key not in types:
        raise ConfigError(f"unknown config key {section}.{key}")
    kind = types[key]
    try:
        if kind in ("int", int):
            value = int(value)
        elif kind in ("float", float):
            value = float(value)
        else:
            value = str(value)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {value!r} as {kind}") from exc
    setattr(sub, key, value)
