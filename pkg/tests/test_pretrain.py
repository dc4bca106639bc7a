"""Mixed-task pretraining: deterministic batches, learning, and bit-exact resume."""

from pathlib import Path

import pytest

from core.config import ModelConfig, PretrainConfig
from core.errors import ContractError
from core.model import load_checkpoint, save_checkpoint
from core.schema import HomologousPair
from stages.pretrainer import Pretrainer, batch_layouts, pretrain, task_layout

CFG = PretrainConfig(steps=6, batch_size=4, learning_rate=1e-2, warmup_steps=2, log_every=1)


def test_batches_are_a_function_of_seed_and_step(train_pairs: list[HomologousPair]) -> None:
    assert batch_layouts(train_pairs, CFG, 3) == batch_layouts(train_pairs, CFG, 3)
    assert batch_layouts(train_pairs, CFG, 3) != batch_layouts(train_pairs, CFG, 4)
    assert len(batch_layouts(train_pairs, CFG, 0)) == CFG.batch_size


def test_task_mix_selects_tasks(train_pairs: list[HomologousPair]) -> None:
    only_vqa = CFG.model_copy(update={"task_mix": (0.0, 0.0, 1.0), "batch_size": 16})
    assert {lay.task for lay in batch_layouts(train_pairs, only_vqa, 0)} == {"vqa"}


def test_vqa_question_index_wraps(train_pairs: list[HomologousPair]) -> None:
    pair = train_pairs[0]
    assert task_layout(pair, "vqa", len(pair.qa)) == task_layout(pair, "vqa", 0)


def test_pretraining_lowers_the_loss(
    train_pairs: list[HomologousPair], tiny_model_cfg: ModelConfig
) -> None:
    cfg = CFG.model_copy(update={"steps": 40, "batch_size": 8, "warmup_steps": 0})
    log = pretrain(train_pairs, tiny_model_cfg, cfg).log
    assert len(log) == 40
    first = sum(r.loss for r in log[:5]) / 5
    last = sum(r.loss for r in log[-5:]) / 5
    assert last < first


def test_resume_replays_the_uninterrupted_run(
    train_pairs: list[HomologousPair], tiny_model_cfg: ModelConfig, tmp_path: Path
) -> None:
    full = pretrain(train_pairs, tiny_model_cfg, CFG)

    half = pretrain(train_pairs, tiny_model_cfg, CFG, stop_step=3)
    assert half.step == 3
    save_checkpoint(
        tmp_path, half.params, step=half.step, optimizer_state=half.optimizer.state_dict()
    )
    saved = load_checkpoint(tmp_path)
    resumed = pretrain(
        train_pairs,
        tiny_model_cfg,
        CFG,
        params=saved.params,
        optimizer_state=saved.optimizer_state,
        start_step=saved.step,
    )
    assert resumed.params.array_equal(full.params)
    assert [r.step for r in resumed.log] == [3, 4, 5]
    assert [r.loss for r in resumed.log] == [r.loss for r in full.log[3:]]


def test_pretraining_needs_data(tiny_model_cfg: ModelConfig) -> None:
    with pytest.raises(ContractError):
        pretrain([], tiny_model_cfg, CFG)


async def test_pretrainer_stage(
    train_pairs: list[HomologousPair], tiny_model_cfg: ModelConfig
) -> None:
    result = await Pretrainer(tiny_model_cfg, CFG.model_copy(update={"steps": 2})).process(
        train_pairs
    )
    assert result.step == 2
    assert [r.learning_rate for r in result.log] == [pytest.approx(5e-3), pytest.approx(1e-2)]
