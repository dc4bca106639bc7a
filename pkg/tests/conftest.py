"""Shared fixtures: tiny model configs, small worlds and the --runslow switch."""

from collections.abc import Iterator

import pytest

from core.config import (
    AlignmentConfig,
    CurationConfig,
    EvalConfig,
    ModelConfig,
    RunConfig,
    WorldConfig,
    get_settings,
)
from core.model import ModelParams, init_params
from core.schema import HomologousPair
from core.world import build_splits


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run end-to-end acceptance tests"
    )


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _fresh_settings(
    monkeypatch: pytest.MonkeyPatch, tmp_path_factory: pytest.TempPathFactory
) -> Iterator[None]:
    """Isolate GAPFLOW_* settings per test."""
    monkeypatch.setenv("GAPFLOW_OUTPUT_ROOT", str(tmp_path_factory.mktemp("runs")))
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------


@pytest.fixture
def world_cfg() -> WorldConfig:
    return WorldConfig(
        grid_size=3, max_objects=2, questions_per_pair=4, train_pairs=6, eval_pairs=3
    )


@pytest.fixture
def tiny_model_cfg() -> ModelConfig:
    return ModelConfig(
        d_model=8, n_layers=1, n_heads=2, context=48, mlp_ratio=2, max_caption_tokens=6
    )


@pytest.fixture
def tiny_run_cfg(world_cfg: WorldConfig, tiny_model_cfg: ModelConfig) -> RunConfig:
    return RunConfig(
        run_name="tiny",
        world=world_cfg,
        model=tiny_model_cfg,
        curation=CurationConfig(n=3, q=4, gen_accuracy_threshold=0.5, workers=2),
        alignment=AlignmentConfig(steps=2, batch_size=2, learning_rate=1e-3),
        eval=EvalConfig(temperature=1.0, seed=7),
    )


# ---------------------------------------------------------------------------
# Data and weights
# ---------------------------------------------------------------------------


@pytest.fixture
def splits(world_cfg: WorldConfig) -> tuple[list[HomologousPair], list[HomologousPair]]:
    return build_splits(world_cfg, seed=3)


@pytest.fixture
def train_pairs(splits: tuple[list[HomologousPair], list[HomologousPair]]) -> list[HomologousPair]:
    return splits[0]


@pytest.fixture
def eval_pairs(splits: tuple[list[HomologousPair], list[HomologousPair]]) -> list[HomologousPair]:
    return splits[1]


@pytest.fixture
def tiny_params(tiny_model_cfg: ModelConfig) -> ModelParams:
    return init_params(tiny_model_cfg.model_copy(update={"init_std": 0.3}), seed=11)
