"""
Self-play: iterative re-sampling and Pair-DPO over several rounds.

Round 0 curates the homologous pairs from scratch and aligns on them. Each
later round re-samples candidates with the latest weights, keeps the best
one per side and folds it into the pair's retained preference with the
branch rule

    new winner = best sample
    new loser  = previous winner  if best score > previous winner score
                 previous loser   otherwise

and then aligns again against a reference snapshot of the round's starting
weights. The gap is evaluated before round 0 and after every round.
"""

import asyncio
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import TypeVar

from core.config import RunConfig, get_settings
from core.errors import CurationError
from core.model import ModelParams, ReferenceSnapshot, Weights
from core.schema import (
    Caption,
    GapReport,
    HomologousPair,
    HomologousPreferenceTuple,
    ImageTokens,
    QAPair,
    RetainedPreference,
    RoundResult,
    Skip,
)
from stages.aligner import align_run
from stages.base import BaseStage
from stages.curator import (
    best_index,
    curate_pair,
    map_pairs,
    pair_seed,
    rank_captions,
    rank_images,
    self_vqa_accuracy,
    similarity,
    skip_counts,
)
from stages.evaluator import gap_report
from stages.librarian import BASELINE_DIR, RunStore, round_dir

logger = logging.getLogger(__name__)

S = TypeVar("S", Caption, ImageTokens)

PairOutcome = HomologousPreferenceTuple | list[Skip]


# ---------------------------------------------------------------------------
# Selection and the update rule
# ---------------------------------------------------------------------------


def select_best_caption(
    weights: Weights,
    image: ImageTokens,
    y_ref: Caption,
    n: int,
    seed: int,
    temperature: float = 1.0,
) -> tuple[Caption, float]:
    """The most similar of ``n`` fresh captions and its similarity to ``y_ref``."""
    candidates, scores = rank_captions(weights, image, y_ref, n, temperature, seed)
    best = best_index(scores)
    return candidates[best], scores[best]


def select_best_image(
    weights: Weights,
    caption: Caption,
    qa: Sequence[QAPair],
    n: int,
    seed: int,
    temperature: float = 1.0,
    grid_size: int = 4,
) -> tuple[ImageTokens, float]:
    """The most self-VQA-accurate of ``n`` fresh images and its accuracy."""
    candidates, accuracies = rank_images(weights, caption, qa, n, temperature, seed, grid_size)
    best = best_index(accuracies)
    return candidates[best], accuracies[best]


def _branch(prev: tuple[S, S, float], new: S, new_score: float) -> tuple[S, S]:
    winner, loser, score = prev
    if new_score > score:
        return new, winner
    return new, loser


def update_und_pair(
    prev: tuple[Caption, Caption, float], y_max: Caption, s_max: float
) -> tuple[Caption, Caption]:
    """``(y_w, y_l, s_w)`` of the previous round and this round's best -> new (y_w, y_l)."""
    return _branch(prev, y_max, s_max)


def update_gen_pair(
    prev: tuple[ImageTokens, ImageTokens, float],
    x_max: ImageTokens,
    acc_max: float,
    threshold: float = 0.6,
) -> tuple[ImageTokens, ImageTokens] | None:
    """Same rule on accuracies; ``None`` when the best image does not clear ``threshold``."""
    if acc_max <= threshold:
        return None
    return _branch(prev, x_max, acc_max)


def retain(item: HomologousPreferenceTuple) -> RetainedPreference:
    return RetainedPreference(
        pair_id=item.pair_id,
        y_w=item.y_w,
        y_l=item.y_l,
        s_w=item.s_w,
        x_w=item.x_w,
        x_l=item.x_l,
        acc_w=item.acc_w,
    )


# ---------------------------------------------------------------------------
# One pair in a later round
# ---------------------------------------------------------------------------


def refresh_pair(
    weights: Weights,
    pair: HomologousPair,
    prev: RetainedPreference,
    cfg: RunConfig,
    round_index: int,
) -> tuple[PairOutcome, RetainedPreference]:
    """
    Re-sample both sides of one pair and apply the update rule.

    Returns the round's tuple (or its skip markers) and the state to carry
    into the next round. A side whose best image misses the threshold skips
    the pair and leaves the retained state as it was; an updated pair whose
    winner equals its loser, or scores below it, is dropped for this round
    while the retained state keeps the update.
    """
    cur = cfg.curation
    qa = pair.qa[: cur.q]
    und_seed = pair_seed(cur, round_index, pair.pair_id, "und")
    captions, scores = rank_captions(
        weights, pair.image, pair.caption, cur.n, cur.temperature, und_seed
    )
    images, accuracies = rank_images(
        weights,
        pair.caption,
        qa,
        cur.n,
        cur.temperature,
        pair_seed(cur, round_index, pair.pair_id, "gen"),
        pair.scene.grid_size,
    )
    best_caption, best_image = best_index(scores), best_index(accuracies)
    s_max, acc_max = scores[best_caption], accuracies[best_image]

    images_pair = update_gen_pair(
        (prev.x_w, prev.x_l, prev.acc_w), images[best_image], acc_max, cur.gen_accuracy_threshold
    )
    if images_pair is None:
        return [Skip(side="gen", reason="below_threshold")], prev
    y_w, y_l = update_und_pair((prev.y_w, prev.y_l, prev.s_w), captions[best_caption], s_max)
    x_w, x_l = images_pair
    updated = RetainedPreference(
        pair_id=pair.pair_id, y_w=y_w, y_l=y_l, s_w=s_max, x_w=x_w, x_l=x_l, acc_w=acc_max
    )

    s_l = similarity(y_l, pair.caption)
    acc_l = self_vqa_accuracy(weights, x_l, qa)
    skips = []
    if y_w == y_l:
        skips.append(Skip(side="und", reason="winner_equals_loser"))
    elif s_l > s_max:
        skips.append(Skip(side="und", reason="order_violation"))
    if x_w == x_l:
        skips.append(Skip(side="gen", reason="winner_equals_loser"))
    elif acc_l > acc_max:
        skips.append(Skip(side="gen", reason="order_violation"))
    if skips:
        return skips, updated

    item = HomologousPreferenceTuple(
        pair_id=pair.pair_id,
        x=pair.image,
        y=pair.caption,
        x_w=x_w,
        x_l=x_l,
        y_w=y_w,
        y_l=y_l,
        s_w=s_max,
        s_l=s_l,
        acc_w=acc_max,
        acc_l=acc_l,
        seed=und_seed,
        round_index=round_index,
        und_candidates=tuple(captions),
        und_scores=tuple(scores),
        gen_candidates=tuple(images),
        gen_accuracies=tuple(accuracies),
    )
    return item, updated


def resample_round(
    weights: Weights,
    pairs: Sequence[HomologousPair],
    retained: dict[int, RetainedPreference],
    cfg: RunConfig,
    round_index: int,
) -> tuple[list[PairOutcome], dict[int, RetainedPreference]]:
    """Outcomes in pair order and the retained state for the next round."""

    def step(pair: HomologousPair) -> tuple[PairOutcome, RetainedPreference | None]:
        prev = retained.get(pair.pair_id)
        if prev is not None:
            return refresh_pair(weights, pair, prev, cfg, round_index)
        outcome = curate_pair(weights, pair, cfg.curation, round_index)
        return outcome, retain(outcome) if isinstance(outcome, HomologousPreferenceTuple) else None

    workers = cfg.curation.workers or get_settings().WORKERS
    results = asyncio.run(map_pairs(step, pairs, workers, f"self-play round {round_index}"))
    state = dict(retained)
    for _, kept in results:
        if kept is not None:
            state[kept.pair_id] = kept
    return [outcome for outcome, _ in results], state


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------


@dataclass
class SelfPlayResult:
    params: ModelParams
    baseline: GapReport
    rounds: list[RoundResult] = field(default_factory=list)
    datasets: list[list[HomologousPreferenceTuple]] = field(default_factory=list)


def _baseline(
    params: ModelParams,
    eval_pairs: Sequence[HomologousPair],
    cfg: RunConfig,
    store: RunStore | None,
) -> GapReport:
    relative = f"{BASELINE_DIR}/gap.json"
    if store is not None and store.exists(relative) and not store.force:
        report = store.read_json(relative, GapReport)
        if report.checkpoint_hash == params.digest():
            logger.info("reusing baseline gap from %s", store.path(relative))
            return report
    report = gap_report(params, eval_pairs, cfg.eval, label="baseline")
    if store is not None:
        store.write_json(relative, report)
    return report


def run_self_play(
    params: ModelParams,
    pairs: Sequence[HomologousPair],
    cfg: RunConfig,
    rounds: int | None = None,
    *,
    eval_pairs: Sequence[HomologousPair],
    store: RunStore | None = None,
) -> SelfPlayResult:
    """
    Round 0 curates and aligns; later rounds re-sample, update and re-align.

    ``params`` is never modified. With a store, every round persists its
    preference dataset, checkpoint, train log and gap report under
    ``round_<k>/``.
    """
    total = cfg.self_play.rounds if rounds is None else rounds
    if total < 1:
        raise ValueError("self-play needs at least one round")
    selected = pairs[: cfg.curation.max_pairs] if cfg.curation.max_pairs else pairs
    baseline = _baseline(params, eval_pairs, cfg, store)
    result = SelfPlayResult(params=params, baseline=baseline)
    first_reference = params.snapshot()
    retained: dict[int, RetainedPreference] = {}
    current = params

    for index in range(total):
        outcomes, retained = resample_round(current, selected, retained, cfg, index)
        tuples = [o for o in outcomes if isinstance(o, HomologousPreferenceTuple)]
        skipped = skip_counts(outcomes)
        if not tuples:
            raise CurationError(
                f"round {index}: no preference tuple survived {len(selected)} pairs",
                skipped=skipped,
                attempted=len(selected),
                round=index,
            )
        reference: ReferenceSnapshot = (
            current.snapshot()
            if index == 0 or cfg.self_play.refresh_reference
            else first_reference
        )
        aligned = align_run(current, tuples, cfg.alignment, reference=reference)
        current = aligned.params
        report = gap_report(current, eval_pairs, cfg.eval, label=round_dir(index))
        digest = current.digest()
        if store is not None:
            folder = round_dir(index)
            store.write_jsonl(f"{folder}/prefs.jsonl", tuples)
            digest = store.save_checkpoint(folder, current, step=len(aligned.log))
            store.write_jsonl(f"{folder}/trainlog.jsonl", aligned.log)
            store.write_json(f"{folder}/gap.json", report)
        result.rounds.append(
            RoundResult(
                round_index=index,
                tuples=len(tuples),
                skipped=skipped,
                checkpoint_hash=digest,
                report=report,
            )
        )
        result.datasets.append(tuples)
        logger.info(
            "round %d: %d tuples, gap %.4f (baseline %.4f)",
            index,
            len(tuples),
            report.gap,
            baseline.gap,
        )

    result.params = current
    return result


class SelfPlay(BaseStage[Sequence[HomologousPair], SelfPlayResult]):
    """
    Training pairs -> weights after ``rounds`` rounds of self-play.

    The held-out evaluation pairs and an optional run store are injected;
    the returned result carries every round's gap report.
    """

    def __init__(
        self,
        params: ModelParams,
        cfg: RunConfig,
        *,
        eval_pairs: Sequence[HomologousPair],
        rounds: int | None = None,
        store: RunStore | None = None,
    ) -> None:
        self.params = params
        self.cfg = cfg
        self.eval_pairs = eval_pairs
        self.rounds = rounds
        self.store = store

    async def process(self, data: Sequence[HomologousPair]) -> SelfPlayResult:
        return await asyncio.to_thread(
            run_self_play,
            self.params,
            data,
            self.cfg,
            self.rounds,
            eval_pairs=self.eval_pairs,
            store=self.store,
        )
