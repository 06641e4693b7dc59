"""Declarative experiment configuration with lossless JSON round-trips.

Every seed is explicit. Environment variables override only the output
directory (CONTALIGN_OUT) and worker count (CONTALIGN_JOBS).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .backbone import BackboneConfig
from .strategies import RouterConfig, StrategyConfig

__all__ = [
    "SCHEMA_VERSION",
    "StreamSettings",
    "OodSettings",
    "ExperimentConfig",
    "default_config",
    "config_to_dict",
    "config_from_dict",
    "load_config",
    "save_config",
    "env_output_override",
    "env_jobs_override",
]

SCHEMA_VERSION = 1

DEFAULT_MASTER_SEED = 20260301


@dataclass(frozen=True)
class StreamSettings:
    n_tasks: int = 3
    per_task_train: int = 64
    per_task_test: int = 32
    image_size: int = 64


@dataclass(frozen=True)
class OodSettings:
    """Held-out unseen-domain probes for fallback evaluation."""

    n_task_samples: int = 32  # from the held-out OOD task spec
    n_mixture_samples: int = 32  # from the backbone's pretraining mixture


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    master_seed: int = DEFAULT_MASTER_SEED
    backbone_seed: int = 1
    stream: StreamSettings = field(default_factory=StreamSettings)
    ood: OodSettings = field(default_factory=OodSettings)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    strategies: tuple[StrategyConfig, ...] = ()
    allow_pretrain: bool = True  # if False, a missing backbone cache is an error

    def strategy_seed(self, name: str) -> int:
        return self.master_seed


def default_strategies(master_seed: int, router: RouterConfig) -> tuple[StrategyConfig, ...]:
    names = ("naive", "lwf", "ewc", "er", "der", "l2p", "emr", "moda", "routed", "joint")
    return tuple(
        StrategyConfig(name=name, seed=master_seed, router=router) for name in names
    )


def default_config() -> ExperimentConfig:
    router = RouterConfig()
    base = ExperimentConfig(router=router)
    return replace(base, strategies=default_strategies(base.master_seed, router))


def config_to_dict(config: ExperimentConfig) -> dict:
    return asdict(config) | {"strategies": [asdict(s) for s in config.strategies]}


def _router_from(d: dict) -> RouterConfig:
    return RouterConfig(**d)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    version = data.get("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ValueError(
            f"unsupported config schema version {version!r}; expected {SCHEMA_VERSION}"
        )
    strategies = []
    for s in data.get("strategies", []):
        s = dict(s)
        s["router"] = _router_from(s.get("router", {}))
        strategies.append(StrategyConfig(**s))
    return ExperimentConfig(
        schema_version=version,
        master_seed=data["master_seed"],
        backbone_seed=data.get("backbone_seed", 1),
        stream=StreamSettings(**data.get("stream", {})),
        ood=OodSettings(**data.get("ood", {})),
        backbone=BackboneConfig(**data.get("backbone", {})),
        router=_router_from(data.get("router", {})),
        strategies=tuple(strategies),
        allow_pretrain=data.get("allow_pretrain", True),
    )


def save_config(path, config: ExperimentConfig) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2, sort_keys=True))


def load_config(path) -> ExperimentConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def env_output_override(default: str | None) -> str | None:
    return os.environ.get("CONTALIGN_OUT", default)


def env_jobs_override(default: int) -> int:
    raw = os.environ.get("CONTALIGN_JOBS")
    return int(raw) if raw else default
