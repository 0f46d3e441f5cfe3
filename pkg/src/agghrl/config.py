"""Typed configuration with strict TOML loading.

Sections: ``[env]`` (with ``[env.user]``), ``[agent]``, ``[nn]``,
``[baselines]`` and ``[metrics]``. Unknown keys and mistyped values raise
:class:`ConfigError` naming the offending field.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class UserModelParams:
    position_bias: str = "log"  # "log": 1/log2(rank+2); "none": always examined; "zero": never
    examination_scale: float = 1.0
    fixed_click_prob: float | None = None  # bypasses the affinity model when set
    click_center: float = 0.45
    click_temperature: float = 0.2
    source_bias: tuple[float, ...] = (0.0, -9.8, -9.7)
    topic_gender_gain: float = 1.0
    blog_age_gain: float = 1.5
    behavior_gain: float = 8.0
    recent_weight: float = 0.6
    purchase_base: tuple[float, ...] = (-1.2, -2.5, -2.5)
    purchase_affinity: float = 2.0
    price_sensitivity: float = 0.5
    dwell_mean_s: tuple[float, ...] = (20.0, 10.6, 75.8)
    dwell_sigma: float = 0.5
    continue_prob: float = 0.845
    continue_click_gain: float = 0.08
    continue_decay: float = 0.0


@dataclass
class EnvConfig:
    catalog_seed: int = 7
    d_item: int = 8
    vertical_names: tuple[str, ...] = ("topic", "blog")
    n_clusters: int = 8
    items_per_source: tuple[int, ...] = (3000, 400, 400)
    per_page: tuple[int, ...] = (10, 1, 1)
    vertical_empty_prob: tuple[float, ...] = (0.3, 0.4)
    item_noise: float = 0.35
    intent_noise: float = 0.35
    query_noise: float = 0.15
    price_log_mean: float = 2.4
    price_log_sigma: float = 0.6
    n_users: int = 20000
    max_pages: int = 100
    user: UserModelParams = field(default_factory=UserModelParams)

    @property
    def n_verticals(self) -> int:
        return len(self.vertical_names)

    @property
    def n_sources(self) -> int:
        return 1 + self.n_verticals


@dataclass
class NNConfig:
    selector_lr: float = 1e-2
    presenter_lr: float = 1e-4
    rmsprop_decay: float = 0.95
    rmsprop_eps: float = 1e-6
    leaky_slope: float = 0.01
    selector_hidden: int = 28
    selector_rnn: int = 16
    presenter_hidden: int = 24
    presenter_rnn: int = 12
    high_state_dim: int = 48
    low_state_dim: int = 56
    huber_threshold: float = 1.0
    max_unroll_high: int = 16
    max_unroll_low: int = 16
    init_seed_offset: int = 0


@dataclass
class AgentConfig:
    gamma: float = 0.95
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.2
    target_period_high: int = 1000
    target_period_low: int = 10000
    batch_size: int = 32
    memory_high: int = 50000
    memory_low: int = 500000
    reward_lambda: float = 0.3
    reward_delta: float = 3.0
    no_click_penalty: float = -0.1
    strategy: str = "i"  # "i": discounted mean + gamma^l target; "ii": plain mean + gamma target
    low_update_every: int = 1
    train_high: bool = True
    train_low: bool = True
    block_blog_first_page: bool = False
    bc_margin: float = 0.8
    bc_margin_weight: float = 1.0
    bc_epochs: int = 3
    bc_lr_scale: float = 1.0


@dataclass
class BaselineConfig:
    # each template is a list of [source_id, 1-indexed position] pairs
    templates: tuple = (
        (),
        ((1, 4),),
        ((2, 9),),
        ((1, 4), (2, 9)),
        ((1, 2),),
        ((2, 5),),
        ((1, 2), (2, 7)),
    )
    classifier_hidden: tuple[int, ...] = (32, 32, 32)
    regressor_hidden: tuple[int, ...] = (32, 32, 32)
    supervised_lr: float = 1e-3
    supervised_epochs: int = 5
    supervised_batch: int = 64


@dataclass
class MetricsConfig:
    ctr_mode: str = "impression"  # or "examination"
    n_buckets: int = 2


@dataclass
class Config:
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    nn: NNConfig = field(default_factory=NNConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def validate(self) -> None:
        a, e, u = self.agent, self.env, self.env.user
        checks = [
            (0.0 <= a.gamma <= 1.0, "agent.gamma must lie in [0, 1]"),
            (0.0 <= a.reward_lambda <= 1.0, "agent.reward_lambda must lie in [0, 1]"),
            (a.reward_delta > 0, "agent.reward_delta must be positive"),
            (a.no_click_penalty < 0, "agent.no_click_penalty must be negative"),
            (a.strategy in ("i", "ii"), "agent.strategy must be 'i' or 'ii'"),
            (a.target_period_high >= 1 and a.target_period_low >= 1, "agent target periods must be >= 1"),
            (a.low_update_every >= 1, "agent.low_update_every must be >= 1"),
            (e.n_verticals >= 1, "env.vertical_names needs at least one vertical"),
            (len(e.items_per_source) == e.n_sources, "env.items_per_source needs one entry per source"),
            (len(e.per_page) == e.n_sources, "env.per_page needs one entry per source"),
            (len(e.vertical_empty_prob) == e.n_verticals, "env.vertical_empty_prob needs one entry per vertical"),
            (len(u.source_bias) == e.n_sources, "env.user.source_bias needs one entry per source"),
            (len(u.purchase_base) == e.n_sources, "env.user.purchase_base needs one entry per source"),
            (len(u.dwell_mean_s) == e.n_sources, "env.user.dwell_mean_s needs one entry per source"),
            (u.position_bias in ("log", "none", "zero"), "env.user.position_bias must be log|none|zero"),
            (0.0 <= u.continue_prob + u.continue_click_gain < 1.0, "env.user continuation must stay below 1"),
            (self.metrics.ctr_mode in ("impression", "examination"), "metrics.ctr_mode must be impression|examination"),
            (self.metrics.n_buckets >= 2, "metrics.n_buckets must be >= 2"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


def _coerce(value: Any, default: Any, where: str) -> Any:
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table")
        return _build(type(default), value, where)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected an array, got {value!r}")
        return _deep_tuple(value)
    return value


def _deep_tuple(v: Any) -> Any:
    if isinstance(v, list):
        return tuple(_deep_tuple(x) for x in v)
    return v


def _build(cls: type, table: dict[str, Any], where: str) -> Any:
    inst = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in table.items():
        path = f"{where}.{key}" if where else key
        if key not in names:
            raise ConfigError(f"unknown config key '{path}'")
        setattr(inst, key, _coerce(value, getattr(inst, key), path))
    return inst


def config_from_dict(data: dict[str, Any]) -> Config:
    cfg = _build(Config, data, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> Config:
    if path is None:
        cfg = Config()
        cfg.validate()
        return cfg
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        data = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return config_from_dict(data)
