"""Training configuration: defaults, key = value files and resolution logging."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

log = logging.getLogger(__name__)


@dataclass
class RlConfig:
    num_envs: int = 4
    rollout_len: int = 128
    total_timesteps: int = 500_000
    num_minibatches: int = 4
    update_epochs: int = 4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    ent_coef: float = 0.0
    actor_lr: float = 2.5e-4
    critic_lr: float = 1e-3
    vf_coef: float = 0.5
    nested_updates: int = 10
    ihvp_bound: float = 1.0
    clip_f: float = 0.5
    lambda_reg: float = 0.0
    max_cg_iter: int = 20
    nystrom_rank: int = 5
    nystrom_rho: float = 50.0
    normalize_env: bool = True
    seed: int = 0

    def __post_init__(self):
        for f in ("num_envs", "rollout_len", "num_minibatches", "update_epochs", "nested_updates", "nystrom_rank"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.total_timesteps < 0:
            raise ValueError("total_timesteps must be >= 0")
        if (self.num_envs * self.rollout_len) % self.num_minibatches:
            raise ValueError("num_envs * rollout_len must be divisible by num_minibatches")
        if self.ent_coef != 0.0:
            raise ValueError("entropy bonus is not supported (ent_coef must be 0)")
        for f in ("actor_lr", "critic_lr", "nystrom_rho"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        for f in ("ihvp_bound", "lambda_reg"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be nonnegative")

    @property
    def batch_size(self) -> int:
        return self.num_envs * self.rollout_len

    @property
    def num_updates(self) -> int:
        return self.total_timesteps // self.batch_size

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]


def _coerce(kind, raw: str):
    if kind is bool or kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int or kind == "int":
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    return float(raw)


def parse_pairs(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().lower()] = v.strip()
    return out


def resolve_config(file_values: dict[str, str] | None = None, overrides: dict | None = None) -> RlConfig:
    """flags > config file > defaults; every source of a value is logged."""
    fields = {f.name: f for f in dataclasses.fields(RlConfig)}
    values = {}
    file_values = file_values or {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for k in list(file_values) + list(overrides):
        if k not in fields:
            raise ValueError(f"unknown config key {k!r}")
    for name, f in fields.items():
        if name in overrides:
            values[name] = overrides[name]
            log.info("config %s = %r (flag)", name, overrides[name])
        elif name in file_values:
            values[name] = _coerce(f.type, file_values[name])
            log.info("config %s = %r (file)", name, values[name])
        else:
            log.info("config %s missing; using default %r", name, f.default)
    return RlConfig(**values)


def load_config(path=None, overrides: dict | None = None) -> RlConfig:
    text = "" if path is None else open(path).read()
    return resolve_config(parse_pairs(text), overrides)
