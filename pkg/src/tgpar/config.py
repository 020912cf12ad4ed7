"""Training configuration and its flat ``key=value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Optional

from .tgraph import ConfigError


@dataclass
class TrainConfig:
    # parallel degrees: i mini-batch, j epoch, k memory; p machines x q trainers each
    i: int = 1
    j: int = 1
    k: int = 1
    p: int = 1
    q: Optional[int] = None
    local_batch: int = 600
    lr_base: float = 1e-3
    lr_ref_batch: Optional[int] = None
    lr_scaling: str = "linear"
    epochs: float = 1.0
    seed: int = 0
    num_neg_groups: int = 10
    n_neighbors: int = 10
    d_mem: int = 100
    d_time: int = 100
    d_static: int = 100
    eval_neg: int = 49
    eval_batch: int = 200
    eval_every: float = 1.0
    train_frac: float = 0.7
    val_frac: float = 0.15
    backend: str = "thread"
    skip_first_read: bool = False
    frozen: bool = False
    daemon_timeout: float = 120.0
    # planner inputs, used when i/j/k are left to plan_config
    max_safe_batch: Optional[int] = None
    saturation_batch: Optional[int] = None
    mem_copies: Optional[int] = None

    def __post_init__(self):
        if self.q is None:
            self.q = self.i * self.j * self.k // max(self.p, 1) or 1
        if self.lr_ref_batch is None:
            self.lr_ref_batch = self.local_batch

    @property
    def n_trainers(self) -> int:
        return self.i * self.j * self.k

    @property
    def global_batch(self) -> int:
        """Events consumed per iteration across all trainers."""
        return self.n_trainers * self.local_batch

    def validate(self) -> "TrainConfig":
        for name in ("i", "j", "k", "p", "q", "local_batch", "num_neg_groups", "eval_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.i * self.j * self.k != self.p * self.q:
            raise ConfigError(f"i*j*k = {self.i}*{self.j}*{self.k} = {self.i * self.j * self.k} "
                              f"!= p*q = {self.p}*{self.q} = {self.p * self.q}")
        if self.k < self.p:
            raise ConfigError(f"memory parallelism k={self.k} must be >= machine count p={self.p}")
        if self.q % (self.i * self.j):
            raise ConfigError(f"an i*j={self.i * self.j} trainer group must fit on one machine of q={self.q}")
        if self.j > self.num_neg_groups:
            raise ConfigError(f"epoch parallelism j={self.j} needs at least j negative groups")
        if self.lr_scaling not in ("linear", "none"):
            raise ConfigError(f"lr_scaling must be linear or none, got {self.lr_scaling!r}")
        if self.backend not in ("thread", "process"):
            raise ConfigError(f"backend must be thread or process, got {self.backend!r}")
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        return self

    @property
    def effective_lr(self) -> float:
        if self.lr_scaling == "none":
            return self.lr_base
        return self.lr_base * self.global_batch / self.lr_ref_batch

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _coerce(f: dataclasses.Field, raw: str):
    typ = str(f.type)
    raw = raw.strip()
    if raw.lower() in ("none", "") and "Optional" in typ:
        return None
    if "bool" in typ:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{f.name}: expected a boolean, got {raw!r}")
    try:
        if "int" in typ:
            return int(raw)
        if "float" in typ:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{f.name}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str, overrides: Optional[dict] = None) -> TrainConfig:
    """Parse ``key=value`` lines (``#`` comments allowed); overrides win."""
    known = {f.name: f for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(known[key], val)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in known:
            raise ConfigError(f"unknown override {key!r}")
        values[key] = _coerce(known[key], val) if isinstance(val, str) else val
    return TrainConfig(**values)


def load_config(path: str, overrides: Optional[dict] = None) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name}={getattr(cfg, f.name)}\n" for f in fields(cfg))
