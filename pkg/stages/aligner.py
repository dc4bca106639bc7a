"""
Aligner: DPO and Pair-DPO against a frozen reference snapshot.

For one side of a preference tuple the margin is

    Δ = β·[(log π_θ(w|c) − log π_ref(w|c)) − (log π_θ(l|c) − log π_ref(l|c))]

with (c, w, l) = (x, y_w, y_l) for understanding and (y, x_w, x_l) for
generation; log-probs are sums over the response segment. Pair-DPO couples
the two margins of a tuple either as a sum of log-sigmoids (the trainable
default) or as one log-sigmoid of their product, whose gradient vanishes at
θ = θ_ref.
"""

import asyncio
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from tqdm import tqdm

from core.config import AlignmentConfig, derive_seed
from core.errors import ContractError
from core.model import (
    ModelParams,
    ReferenceSnapshot,
    SequenceLayout,
    gen_layout,
    stacked_logprobs,
    und_layout,
)
from core.optim import AdamW, clip_gradients, ensure_finite, learning_rate_at
from core.schema import HomologousPreferenceTuple, Side, TrainLogRecord
from core.tensor import Tensor, log_sigmoid
from stages.base import BaseStage

logger = logging.getLogger(__name__)

MARGIN_CHUNK = 32


@dataclass
class SideTerms:
    """Margins of one side for a batch, plus the implicit rewards that formed them."""

    delta: Tensor
    chosen: NDArray[np.float64]
    rejected: NDArray[np.float64]


def side_layouts(
    batch: Sequence[HomologousPreferenceTuple], side: Side
) -> tuple[list[SequenceLayout], list[SequenceLayout]]:
    if side == "und":
        return [und_layout(t.x, t.y_w) for t in batch], [und_layout(t.x, t.y_l) for t in batch]
    return [gen_layout(t.y, t.x_w) for t in batch], [gen_layout(t.y, t.x_l) for t in batch]


def preference_terms(
    params: ModelParams,
    ref: ReferenceSnapshot,
    batch: Sequence[HomologousPreferenceTuple],
    beta: float,
    side: Side,
) -> SideTerms:
    """Δ per tuple [B]; winners and losers share one padded batch with the reference."""
    if not batch:
        raise ContractError("preference batch is empty")
    winners, losers = side_layouts(batch, side)
    policy, reference = stacked_logprobs(params, ref, winners + losers)
    ratios = policy - reference
    size = len(batch)
    # [I, -I] picks winner minus loser
    contrast = np.hstack([np.eye(size), -np.eye(size)])
    delta = (Tensor.constant(contrast) @ ratios.reshape(2 * size, 1)).reshape(size) * beta
    ratio_data = ratios.data * beta
    return SideTerms(delta=delta, chosen=ratio_data[:size], rejected=ratio_data[size:])


def delta_und(
    params: ModelParams, ref: ReferenceSnapshot, item: HomologousPreferenceTuple, beta: float
) -> Tensor:
    return preference_terms(params, ref, [item], beta, "und").delta.reshape()


def delta_gen(
    params: ModelParams, ref: ReferenceSnapshot, item: HomologousPreferenceTuple, beta: float
) -> Tensor:
    return preference_terms(params, ref, [item], beta, "gen").delta.reshape()


def dpo_from_delta(delta: Tensor) -> Tensor:
    return (-log_sigmoid(delta)).mean()


def pair_dpo_from_deltas(d_und: Tensor, d_gen: Tensor, form: str) -> Tensor:
    if form == "sum":
        return (-log_sigmoid(d_und) - log_sigmoid(d_gen)).mean()
    return (-log_sigmoid(d_und * d_gen)).mean()


def dpo_loss(
    params: ModelParams,
    ref: ReferenceSnapshot,
    batch: Sequence[HomologousPreferenceTuple],
    beta: float,
    side: Side,
) -> Tensor:
    """Mean of −log σ(Δ_side) over the batch."""
    return dpo_from_delta(preference_terms(params, ref, batch, beta, side).delta)


def pair_dpo_loss(
    params: ModelParams,
    ref: ReferenceSnapshot,
    batch: Sequence[HomologousPreferenceTuple],
    beta: float,
    form: str = "sum",
) -> Tensor:
    """Pair-DPO loss.

    ``form="sum"``: mean of −log σ(Δ_Und) − log σ(Δ_Gen).
    ``form="product"``: mean of −log σ(Δ_Und·Δ_Gen).
    """
    d_und = preference_terms(params, ref, batch, beta, "und").delta
    d_gen = preference_terms(params, ref, batch, beta, "gen").delta
    return pair_dpo_from_deltas(d_und, d_gen, form)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _mean(values: NDArray[np.float64] | None) -> float:
    return float(values.mean()) if values is not None and values.size else 0.0


def alignment_loss(
    params: ModelParams,
    ref: ReferenceSnapshot,
    batch: Sequence[HomologousPreferenceTuple],
    cfg: AlignmentConfig,
) -> tuple[Tensor, dict[Side, SideTerms]]:
    """The loss selected by ``cfg.mode`` and the per-side terms it was built from."""
    sides: tuple[Side, ...] = {
        "pair": ("und", "gen"),
        "und_only": ("und",),
        "gen_only": ("gen",),
    }[cfg.mode]
    terms = {side: preference_terms(params, ref, batch, cfg.beta, side) for side in sides}
    if cfg.mode == "pair":
        loss = pair_dpo_from_deltas(terms["und"].delta, terms["gen"].delta, cfg.form)
    else:
        loss = dpo_from_delta(terms[sides[0]].delta)
    return loss, terms


def training_step(
    params: ModelParams,
    ref: ReferenceSnapshot,
    optimizer: AdamW,
    batch: Sequence[HomologousPreferenceTuple],
    cfg: AlignmentConfig,
    step: int,
    total_steps: int,
) -> TrainLogRecord:
    """One AdamW update on the configured loss; the reference is only read."""
    params.zero_grad()
    loss, terms = alignment_loss(params, ref, batch, cfg)
    loss.backward()
    ensure_finite(loss.item(), params.parameters(), step)
    norm = clip_gradients(params.parameters(), cfg.grad_clip)
    lr = learning_rate_at(step, total_steps, cfg.learning_rate, cfg.warmup_steps, cfg.cosine)
    optimizer.step(lr)

    und, gen = terms.get("und"), terms.get("gen")
    active = np.concatenate([t.delta.data for t in terms.values()])
    return TrainLogRecord(
        step=step,
        loss=loss.item(),
        delta_und=_mean(und.delta.data if und else None),
        delta_gen=_mean(gen.delta.data if gen else None),
        reward_chosen_und=_mean(und.chosen if und else None),
        reward_rejected_und=_mean(und.rejected if und else None),
        reward_chosen_gen=_mean(gen.chosen if gen else None),
        reward_rejected_gen=_mean(gen.rejected if gen else None),
        preference_accuracy=float((active > 0).mean()),
        grad_norm=norm,
        learning_rate=lr,
    )


def batch_order(size: int, batch_size: int, steps: int, seed: int) -> list[list[int]]:
    """Index batches drawn from successive seeded permutations of the dataset."""
    rng = np.random.default_rng(derive_seed(seed, "align"))
    order: list[int] = []
    batches = []
    for _ in range(steps):
        if len(order) < batch_size:
            order.extend(int(i) for i in rng.permutation(size))
        batches.append(order[:batch_size])
        del order[:batch_size]
    return batches


@dataclass
class AlignmentResult:
    params: ModelParams
    reference: ReferenceSnapshot
    log: list[TrainLogRecord] = field(default_factory=list)


def align_run(
    params: ModelParams,
    dataset: Sequence[HomologousPreferenceTuple],
    cfg: AlignmentConfig,
    *,
    steps: int | None = None,
    reference: ReferenceSnapshot | None = None,
) -> AlignmentResult:
    """Fine-tune a copy of ``params`` for ``steps`` (default ``cfg.steps``) batches.

    The reference defaults to a snapshot of ``params`` taken at the start;
    ``params`` itself is never modified.
    """
    if not dataset:
        raise ContractError("alignment dataset is empty")
    total = cfg.steps if steps is None else steps
    ref = reference if reference is not None else params.snapshot()
    policy = params.clone()
    optimizer = AdamW(policy, weight_decay=cfg.weight_decay)
    size = min(cfg.batch_size, len(dataset))
    log: list[TrainLogRecord] = []
    bar = tqdm(
        batch_order(len(dataset), size, total, cfg.seed),
        desc=f"align {cfg.mode}",
        disable=not logger.isEnabledFor(logging.INFO),
    )
    for step, indices in enumerate(bar):
        batch = [dataset[i] for i in indices]
        record = training_step(policy, ref, optimizer, batch, cfg, step, total)
        log.append(record)
        if step % cfg.log_every == 0 or step == total - 1:
            logger.info(
                "align step %d loss %.4f Δund %.3f Δgen %.3f",
                step,
                record.loss,
                record.delta_und,
                record.delta_gen,
            )
    return AlignmentResult(params=policy, reference=ref, log=log)


@dataclass
class Margins:
    """Post-training Δ_Und and Δ_Gen per tuple (the implicit reward margins)."""

    und: NDArray[np.float64]
    gen: NDArray[np.float64]


def implicit_margins(
    params: ModelParams,
    ref: ReferenceSnapshot,
    dataset: Sequence[HomologousPreferenceTuple],
    beta: float,
) -> Margins:
    und: list[float] = []
    gen: list[float] = []
    for start in range(0, len(dataset), MARGIN_CHUNK):
        chunk = dataset[start : start + MARGIN_CHUNK]
        und.extend(preference_terms(params, ref, chunk, beta, "und").delta.data.tolist())
        gen.extend(preference_terms(params, ref, chunk, beta, "gen").delta.data.tolist())
    return Margins(und=np.array(und), gen=np.array(gen))


class Aligner(BaseStage[Sequence[HomologousPreferenceTuple], AlignmentResult]):
    """
    Preference tuples -> aligned weights and the per-step train log.

    ``cfg.mode`` selects Pair-DPO or plain DPO on one side; an explicit
    reference snapshot may be injected (self-play keeps it per round).
    """

    def __init__(
        self,
        params: ModelParams,
        cfg: AlignmentConfig,
        *,
        reference: ReferenceSnapshot | None = None,
        steps: int | None = None,
    ) -> None:
        self.params = params
        self.cfg = cfg
        self.reference = reference
        self.steps = steps

    async def process(self, data: Sequence[HomologousPreferenceTuple]) -> AlignmentResult:
        return await asyncio.to_thread(
            align_run, self.params, data, self.cfg, steps=self.steps, reference=self.reference
        )
