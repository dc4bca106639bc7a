"""
Pretrainer: mixed-task next-token pretraining of the unified model.

Every batch slot draws a task (UND, GEN or VQA by ``task_mix``), a pair and
a question from a generator seeded by ``(seed, step)``; the batch at step t
is therefore independent of how the run got there, and resuming from a
checkpoint (weights, AdamW moments, step) replays the uninterrupted run bit
for bit.
"""

import asyncio
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from core.config import ModelConfig, PretrainConfig, derive_seed
from core.errors import ContractError
from core.model import (
    ModelParams,
    SequenceLayout,
    batch_nll_loss,
    gen_layout,
    init_params,
    und_layout,
    vqa_layout,
)
from core.optim import AdamW, clip_gradients, ensure_finite, learning_rate_at
from core.schema import HomologousPair, PretrainLogRecord
from stages.base import BaseStage

logger = logging.getLogger(__name__)

TASKS = ("und", "gen", "vqa")


@dataclass
class PretrainResult:
    params: ModelParams
    optimizer: AdamW
    step: int
    log: list[PretrainLogRecord] = field(default_factory=list)


def task_layout(pair: HomologousPair, task: str, question_index: int = 0) -> SequenceLayout:
    if task == "und":
        return und_layout(pair.image, pair.caption)
    if task == "gen":
        return gen_layout(pair.caption, pair.image)
    qa = pair.qa[question_index % len(pair.qa)]
    return vqa_layout(pair.image, qa.question, qa.answer)


def batch_layouts(
    pairs: Sequence[HomologousPair], cfg: PretrainConfig, step: int
) -> list[SequenceLayout]:
    """The training batch of ``step``: a pure function of (seed, step)."""
    rng = np.random.default_rng(derive_seed(cfg.seed, "pretrain", step))
    mix = np.asarray(cfg.task_mix, dtype=np.float64)
    mix = mix / mix.sum()
    layouts = []
    for _ in range(cfg.batch_size):
        task = TASKS[int(rng.choice(len(TASKS), p=mix))]
        pair = pairs[int(rng.integers(len(pairs)))]
        question = int(rng.integers(1 << 16))
        layouts.append(task_layout(pair, task, question))
    return layouts


def pretrain_step(
    params: ModelParams,
    optimizer: AdamW,
    layouts: Sequence[SequenceLayout],
    cfg: PretrainConfig,
    step: int,
) -> PretrainLogRecord:
    params.zero_grad()
    loss = batch_nll_loss(params, layouts)
    loss.backward()
    ensure_finite(loss.item(), params.parameters(), step)
    norm = clip_gradients(params.parameters(), cfg.grad_clip)
    lr = learning_rate_at(step, cfg.steps, cfg.learning_rate, cfg.warmup_steps, cfg.cosine)
    optimizer.step(lr)
    return PretrainLogRecord(step=step, loss=loss.item(), grad_norm=norm, learning_rate=lr)


def pretrain(
    pairs: Sequence[HomologousPair],
    model_cfg: ModelConfig,
    cfg: PretrainConfig,
    *,
    params: ModelParams | None = None,
    optimizer_state: dict[str, object] | None = None,
    start_step: int = 0,
    stop_step: int | None = None,
) -> PretrainResult:
    """Train from ``start_step`` up to ``stop_step`` (default ``cfg.steps``)."""
    if not pairs:
        raise ContractError("pretraining needs at least one homologous pair")
    params = params if params is not None else init_params(model_cfg)
    optimizer = AdamW(params, weight_decay=cfg.weight_decay)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    stop = cfg.steps if stop_step is None else min(stop_step, cfg.steps)
    log: list[PretrainLogRecord] = []
    bar = tqdm(
        range(start_step, stop),
        desc="pretrain",
        disable=not logger.isEnabledFor(logging.INFO),
    )
    for step in bar:
        record = pretrain_step(params, optimizer, batch_layouts(pairs, cfg, step), cfg, step)
        log.append(record)
        if step % cfg.log_every == 0 or step == stop - 1:
            logger.info(
                "pretrain step %d loss %.4f lr %.2e", step, record.loss, record.learning_rate
            )
    return PretrainResult(params=params, optimizer=optimizer, step=max(stop, start_step), log=log)


class Pretrainer(BaseStage[Sequence[HomologousPair], PretrainResult]):
    """
    Homologous pairs -> pretrained weights (UND:GEN:VQA mix on the same pairs).

    An existing checkpoint can be injected to resume: pass its weights,
    optimizer state and step.
    """

    def __init__(
        self,
        model_cfg: ModelConfig,
        cfg: PretrainConfig,
        *,
        params: ModelParams | None = None,
        optimizer_state: dict[str, object] | None = None,
        start_step: int = 0,
        stop_step: int | None = None,
    ) -> None:
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.params = params
        self.optimizer_state = optimizer_state
        self.start_step = start_step
        self.stop_step = stop_step

    async def process(self, data: Sequence[HomologousPair]) -> PretrainResult:
        return await asyncio.to_thread(
            pretrain,
            data,
            self.model_cfg,
            self.cfg,
            params=self.params,
            optimizer_state=self.optimizer_state,
            start_step=self.start_step,
            stop_step=self.stop_step,
        )
