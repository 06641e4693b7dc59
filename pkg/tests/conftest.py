import os
import sys
import tempfile
from pathlib import Path

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from contalign.backbone import BackboneConfig
from contalign.config import ExperimentConfig, StreamSettings, OodSettings
from contalign.experiment import ensure_backbone
from contalign.strategies import RouterConfig, StrategyConfig

# Shared on-disk cache so the slow backbone pretrainings happen once per
# machine, not once per pytest session.
TEST_CACHE = Path(tempfile.gettempdir()) / "contalign-test-cache"

# Small backbone for integration-style tests: weaker but trains in ~20 s.
MICRO_BACKBONE = BackboneConfig(n_train=160, n_holdout=48, epochs=5,
                                min_holdout_iou=0.55)

MICRO_ROUTER = RouterConfig(epochs=60, k_folds=3)


def micro_config(n_tasks=2, strategies=(), master_seed=4242, **kw) -> ExperimentConfig:
    return ExperimentConfig(
        master_seed=master_seed,
        backbone_seed=11,
        stream=StreamSettings(n_tasks=n_tasks, per_task_train=12, per_task_test=6),
        ood=OodSettings(n_task_samples=6, n_mixture_samples=6),
        backbone=MICRO_BACKBONE,
        router=MICRO_ROUTER,
        strategies=tuple(
            StrategyConfig(name=name, seed=master_seed, epochs=3,
                           memory_capacity=8, router=MICRO_ROUTER)
            for name in strategies
        ),
        **kw,
    )


@pytest.fixture(scope="session")
def micro_backbone():
    config = micro_config()
    backbone, _ = ensure_backbone(config, TEST_CACHE)
    return backbone


@pytest.fixture(scope="session")
def default_backbone():
    """The full-quality frozen backbone used by the acceptance suite."""
    config = ExperimentConfig()
    backbone, path = ensure_backbone(config, TEST_CACHE)
    return backbone


@pytest.fixture(scope="session")
def default_backbone_path():
    config = ExperimentConfig()
    _, path = ensure_backbone(config, TEST_CACHE)
    return path
