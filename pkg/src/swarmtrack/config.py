"""YAML run configuration with strict key checking.

Four sections, all optional: world (per-task WorldConfig overrides),
train (TrainConfig fields), net (NetConfig fields), eval (grid
settings). Every key must name a real field; anything unrecognized is
an error rather than a silent default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

from .environment import WorldConfig
from .trainer import AlphaSchedule, TrainConfig
from .valuenet import NetConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


# world overrides exclude the fields the task grid itself supplies
_WORLD_KEYS = {f.name for f in dataclasses.fields(WorldConfig)} - {
    "n_agents", "m_targets", "map_side"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_NET_KEYS = {f.name for f in dataclasses.fields(NetConfig)}
_SCHEDULE_KEYS = {f.name for f in dataclasses.fields(AlphaSchedule)}


@dataclass(frozen=True)
class EvalSettings:
    checkpoints: tuple = ()
    tasks: tuple = ("4a4t",)
    mask_k: tuple = (None,)
    episodes: int = 50
    seeds: tuple = (0, 1, 2, 3, 4)
    alpha: float = 0.05
    policy: str = "stochastic"
    out: str = "results.csv"

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError("eval.episodes must be at least 1")
        if self.policy not in ("stochastic", "greedy"):
            raise ConfigError(f"unknown eval.policy {self.policy!r}")
        for k in self.mask_k:
            if k is not None and (not isinstance(k, int) or k < 1):
                raise ConfigError(f"bad eval.mask_k entry {k!r}")


_EVAL_KEYS = {f.name for f in dataclasses.fields(EvalSettings)}


@dataclass(frozen=True)
class AppConfig:
    world: dict
    train: TrainConfig
    net: NetConfig
    eval: EvalSettings


def _require_mapping(section, where: str) -> dict:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(section).__name__}")
    return dict(section)


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")


def _listify(section: dict, *names) -> None:
    for name in names:
        if name in section:
            v = section[name]
            section[name] = tuple(v) if isinstance(v, (list, tuple)) else (v,)


def load_config(path) -> AppConfig:
    """Parse and validate one YAML file into an AppConfig."""
    raw = yaml.safe_load(Path(path).read_text())
    raw = _require_mapping(raw, "top level")
    _check_keys(raw, {"world", "train", "net", "eval"}, "top-level")

    world = _require_mapping(raw.get("world"), "world")
    _check_keys(world, _WORLD_KEYS, "world")
    if "init_cov_diag" in world:
        world["init_cov_diag"] = tuple(world["init_cov_diag"])
    # construct once against a dummy task so bad values fail at load time
    WorldConfig.scaled(1, 1, **world)

    train = _require_mapping(raw.get("train"), "train")
    _check_keys(train, _TRAIN_KEYS, "train")
    for name in ("alpha_schedule", "epsilon_schedule"):
        if name in train:
            sched = _require_mapping(train[name], f"train.{name}")
            _check_keys(sched, _SCHEDULE_KEYS, f"train.{name}")
            train[name] = AlphaSchedule(**sched)
    try:
        train_cfg = TrainConfig(**train)
    except ValueError as e:
        raise ConfigError(f"train: {e}") from e

    net = _require_mapping(raw.get("net"), "net")
    _check_keys(net, _NET_KEYS, "net")
    try:
        net_cfg = NetConfig(**net)
    except ValueError as e:
        raise ConfigError(f"net: {e}") from e

    ev = _require_mapping(raw.get("eval"), "eval")
    _check_keys(ev, _EVAL_KEYS, "eval")
    _listify(ev, "checkpoints", "tasks", "mask_k", "seeds")
    eval_cfg = EvalSettings(**ev)

    return AppConfig(world=world, train=train_cfg, net=net_cfg, eval=eval_cfg)
