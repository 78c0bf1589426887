"""Run configuration: one JSON file plus command-line overrides."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from crsirl.bilevel import SCHEMES, TrainConfig
from crsirl.errors import InvalidArgument

ALGORITHMS = ("pg", "crsirl", "maxent", "absgreedy", "rulejudge", "random")


class ConfigError(InvalidArgument):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class RunConfig:
    # synthetic world
    n_users: int = 30
    n_items: int = 60
    n_attrs: int = 15
    attrs_per_item: tuple = (8, 12)
    interactions_per_user: int = 20
    n_clusters: int = 1
    world_seed: int = 0
    split_ratios: tuple = (7.0, 1.5, 1.5)
    split_seed: int = 0
    # embeddings
    dim: int = 16
    embed_epochs: int = 100
    margin: float = 1.0
    embed_step_size: float = 0.05
    neg_per_pos: int = 1
    embed_seed: int = 0
    # training
    eta: float = 0.05
    beta: float = 0.01
    lam: float = 0.1
    gamma: float = 0.999
    T_max: int = 15
    K: int = 10
    K_v: int = 10
    K_p: int = 10
    outer_iterations: int = 200
    enable_hrs: bool = True
    enable_rpm: bool = True
    fixed_alpha: float | None = None
    pretrain_episodes: int = 2000
    pg_step_size: float = 0.02
    pg_baseline: bool = False
    h_dim: int = 16
    m: int = 16
    q: int = 16
    buffer_capacity: int = 512
    probe_every: int = 0
    checkpoint_every: int = 0
    init_policy: bool = False
    # selection and io
    reward: str = "sparse"
    algorithm: str = "crsirl"
    seeds: tuple = (0,)
    out: str = "runs/default"
    catalog_path: str | None = None
    splits_path: str | None = None
    embeddings_path: str | None = None
    policy_path: str | None = None
    reward_path: str | None = None
    trace: bool = False

    def path(self, key: str, default_name: str) -> Path:
        given = getattr(self, f"{key}_path")
        return Path(given) if given else Path(self.out) / default_name

    def train_config(self, **changes) -> TrainConfig:
        kw = dict(
            eta=self.eta, beta=self.beta, lam=self.lam, gamma=self.gamma, t_max=self.T_max,
            k=self.K, k_v=self.K_v, k_p=self.K_p, outer_iterations=self.outer_iterations,
            enable_hrs=self.enable_hrs, enable_rpm=self.enable_rpm, fixed_alpha=self.fixed_alpha,
            seed=int(self.seeds[0]), reward=self.reward, pretrain_episodes=self.pretrain_episodes,
            pg_step_size=self.pg_step_size, pg_baseline=self.pg_baseline, h_dim=self.h_dim,
            m=self.m, q=self.q, buffer_capacity=self.buffer_capacity, probe_every=self.probe_every,
        )
        kw.update(changes)
        return TrainConfig(**kw)


# JSON / flag spelling -> field name
ALIASES = {"lambda": "lam"}
FIELD_NAMES = {f.name for f in fields(RunConfig)}
PUBLIC_NAME = {v: k for k, v in ALIASES.items()}


def _canonical(key: str) -> str:
    name = ALIASES.get(key, key)
    if name not in FIELD_NAMES:
        raise ConfigError(f"unknown configuration key {key!r}", key)
    return name


def _as_int(name, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise ConfigError(f"{PUBLIC_NAME.get(name, name)} must be an integer, got {v!r}", PUBLIC_NAME.get(name, name))
    return int(v)


def _as_float(name, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{PUBLIC_NAME.get(name, name)} must be a number, got {v!r}", PUBLIC_NAME.get(name, name))
    return float(v)


def _coerce(name: str, value):
    default = getattr(RunConfig, name)
    pub = PUBLIC_NAME.get(name, name)
    if name == "fixed_alpha":
        return None if value is None else _as_float(name, value)
    if name.endswith("_path"):
        return None if value is None else str(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{pub} must be true or false", pub)
        return value
    if isinstance(default, int):
        return _as_int(name, value)
    if isinstance(default, float):
        return _as_float(name, value)
    if isinstance(default, tuple):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{pub} must be a list", pub)
        if name == "split_ratios":
            return tuple(_as_float(name, v) for v in value)
        return tuple(_as_int(name, v) for v in value)
    if not isinstance(value, str):
        raise ConfigError(f"{pub} must be a string", pub)
    return value


def validate(cfg: RunConfig) -> RunConfig:
    def bad(name, msg):
        raise ConfigError(f"{name}: {msg}", name)

    if not 0.0 <= cfg.gamma <= 1.0:
        bad("gamma", "must lie in [0, 1]")
    if cfg.lam < 0:
        bad("lambda", "must be nonnegative")
    if cfg.eta <= 0:
        bad("eta", "must be positive")
    if cfg.beta < 0:
        bad("beta", "must be nonnegative")
    if cfg.fixed_alpha is not None and not 0.0 <= cfg.fixed_alpha <= 1.0:
        bad("fixed_alpha", "must lie in [0, 1]")
    for name in ("T_max", "K", "K_v", "K_p", "n_users", "n_items", "n_attrs", "interactions_per_user",
                 "n_clusters", "dim", "neg_per_pos", "h_dim", "m", "q", "buffer_capacity"):
        if getattr(cfg, name) < 1:
            bad(name, "must be at least 1")
    for name in ("outer_iterations", "pretrain_episodes", "embed_epochs", "probe_every", "checkpoint_every"):
        if getattr(cfg, name) < 0:
            bad(name, "must be nonnegative")
    if cfg.K_v < cfg.K:
        bad("K_v", "must be at least K")
    if cfg.margin <= 0:
        bad("margin", "must be positive")
    if len(cfg.attrs_per_item) != 2 or not 1 <= cfg.attrs_per_item[0] <= cfg.attrs_per_item[1] <= cfg.n_attrs:
        bad("attrs_per_item", "must be [lo, hi] with 1 <= lo <= hi <= n_attrs")
    if cfg.n_clusters > min(cfg.n_users, cfg.n_items):
        bad("n_clusters", "must not exceed min(n_users, n_items)")
    if len(cfg.split_ratios) != 3 or min(cfg.split_ratios) < 0 or sum(cfg.split_ratios) <= 0:
        bad("split_ratios", "must be three nonnegative numbers with a positive sum")
    if not cfg.enable_hrs and not cfg.enable_rpm:
        bad("enable_hrs", "at least one of enable_hrs / enable_rpm must be true")
    if cfg.reward not in SCHEMES:
        bad("reward", f"must be one of {', '.join(SCHEMES)}")
    if cfg.algorithm not in ALGORITHMS:
        bad("algorithm", f"must be one of {', '.join(ALGORITHMS)}")
    if not cfg.seeds:
        bad("seeds", "must not be empty")
    return cfg


def load_config_file(path: str | os.PathLike | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    if not text.strip():
        return {}
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def parse_config(path: str | os.PathLike | None = None, overrides: dict | None = None) -> RunConfig:
    """File values first, then overrides; unknown keys and bad values raise ConfigError."""
    values = {}
    for source in (load_config_file(path), overrides or {}):
        for key, value in source.items():
            name = _canonical(key)
            values[name] = _coerce(name, value)
    return validate(RunConfig(**values))
