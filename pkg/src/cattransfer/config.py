"""Run configuration: ``key = value`` files with typed defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Mapping

from .synthetic import ConfigError, WorldConfig


@dataclass
class TrainConfig:
    # world
    c_f: int = 12
    c_w: int = 8
    n_overlap: int = 3
    d_p: int = 32
    k: int = 48
    n_relations: int = 3
    sigma_feat: float = 0.1
    r_min: int = 8
    r_max: int = 32
    max_objects: int = 4
    # data sizes
    n_full_train: int = 400
    n_full_test: int = 100
    n_weak_train: int = 800
    n_weak_test: int = 200
    # model
    d: int = 64
    hidden1: int = 32
    hidden2: int = 64
    tau: float = 0.4
    edge_mode: str = "similarity"
    # optimisation
    lambda_full: float = 0.5
    lambda_cons: float = 1.0
    ema_alpha: float = 0.999
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 0.0001
    lr_decay_steps: int = 0
    lr_decay_gamma: float = 0.1
    batch_full: int = 8
    batch_weak: int = 8
    steps: int = 3000
    seed: int = 42
    eval_every: int = 500
    # ablation and interpretation switches
    enable_dsmt: bool = True
    enable_sgcn: bool = True
    teacher_trunk_source: str = "mean"
    teacher_aggregate: str = "max"
    nms_threshold: float = 0.3

    def validate(self) -> None:
        self.world_config().validate()
        if self.d < 1 or self.hidden1 < 1 or self.hidden2 < 1:
            raise ConfigError("dimensions must be positive")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must be in (0, 1]")
        if self.edge_mode not in ("similarity", "handcrafted", "sum"):
            raise ConfigError(f"unknown edge_mode {self.edge_mode!r}")
        if self.lambda_full < 0 or self.lambda_cons < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 <= self.ema_alpha < 1.0:
            raise ConfigError("ema_alpha must be in [0, 1)")
        if self.lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive; momentum and weight_decay non-negative")
        if self.batch_full < 1 or self.batch_weak < 1:
            raise ConfigError("batch sizes must be positive")
        if self.steps < 0 or self.eval_every < 0 or self.lr_decay_steps < 0:
            raise ConfigError("steps, eval_every and lr_decay_steps must be non-negative")
        if min(self.n_full_train, self.n_full_test, self.n_weak_train, self.n_weak_test) < 1:
            raise ConfigError("split sizes must be positive")
        if self.teacher_trunk_source not in ("mean", "full", "weak"):
            raise ConfigError(f"unknown teacher_trunk_source {self.teacher_trunk_source!r}")
        if self.teacher_aggregate not in ("max", "sum_clamped"):
            raise ConfigError(f"unknown teacher_aggregate {self.teacher_aggregate!r}")

    def world_config(self) -> WorldConfig:
        return WorldConfig(c_f=self.c_f, c_w=self.c_w, n_overlap=self.n_overlap, d_p=self.d_p,
                           k=self.k, n_relations=self.n_relations, sigma_feat=self.sigma_feat,
                           r_min=self.r_min, r_max=self.r_max, max_objects=self.max_objects)

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        return (self.n_full_train, self.n_full_test, self.n_weak_train, self.n_weak_test)

    @property
    def hidden(self) -> tuple[int, int]:
        return (self.hidden1, self.hidden2)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_mapping(cls, values: Mapping[str, object], base: "TrainConfig | None" = None):
        cfg = dataclasses.replace(base) if base is not None else cls()
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(key, raw, types[key]))
        return cfg


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw, typ: str):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {typ})") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def load_config(path=None, overrides: Mapping[str, object] | None = None) -> TrainConfig:
    """Defaults, then the file, then ``overrides`` (highest precedence)."""
    cfg = TrainConfig()
    if path is not None:
        with open(path) as fh:
            cfg = TrainConfig.from_mapping(parse_config_text(fh.read(), str(path)), cfg)
    if overrides:
        cfg = TrainConfig.from_mapping(overrides, cfg)
    cfg.validate()
    return cfg
