"""
Curator: homologous preference data from homologous input pairs.

For the understanding side the model captions the pair's image n times and
each caption is scored by multiset token F1 against the reference caption;
the best and worst captions become (y_w, y_l). For the generation side the
model draws n images from the reference caption and answers the pair's
questions about each of them (self-VQA); the most and least accurate images
become (x_w, x_l), provided the best accuracy clears the threshold. Sets
that carry no preference are skipped rather than forced into a pair.
"""

import asyncio
import logging
from collections import Counter
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import TypeVar

import numpy as np
from tqdm import tqdm

from core.config import CurationConfig, derive_seed, get_settings
from core.errors import CurationError, DegenerateInputError
from core.model import Weights
from core.sampling import answer_batch, sample_captions, sample_images
from core.schema import (
    Caption,
    GenerationPreference,
    HomologousPair,
    HomologousPreferenceTuple,
    ImageTokens,
    QAPair,
    Skip,
    UnderstandingPreference,
)
from stages.base import BaseStage

logger = logging.getLogger(__name__)

T = TypeVar("T")


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------


def similarity(a: Caption, b: Caption) -> float:
    """Multiset token F1: 2|A ⊓ B| / (|A| + |B|)."""
    if not a.root or not b.root:
        raise DegenerateInputError("similarity is undefined for an empty caption")
    overlap = sum((Counter(a.root) & Counter(b.root)).values())
    return 2.0 * overlap / (len(a.root) + len(b.root))


def self_vqa_responses(
    weights: Weights, images: Sequence[ImageTokens], qa: Sequence[QAPair]
) -> list[list[int]]:
    """The model's answers to every question, per image (one batched pass)."""
    items = [(image, pair.question) for image in images for pair in qa]
    flat = answer_batch(weights, items)
    return [flat[i * len(qa) : (i + 1) * len(qa)] for i in range(len(images))]


def accuracy_from_responses(responses: Sequence[int], qa: Sequence[QAPair]) -> float:
    """Fraction of responses equal to the reference answers."""
    return sum(r == pair.answer for r, pair in zip(responses, qa, strict=True)) / len(qa)


def self_vqa_accuracy(weights: Weights, image: ImageTokens, qa: Sequence[QAPair]) -> float:
    """Accuracy of the model's own answers about ``image`` (the model is the judge)."""
    if not qa:
        raise ValueError("self-VQA needs at least one question")
    return accuracy_from_responses(self_vqa_responses(weights, [image], qa)[0], qa)


def best_index(scores: Sequence[float]) -> int:
    """Argmax with ties broken towards the lowest index."""
    return int(np.argmax(scores))


def worst_index(scores: Sequence[float]) -> int:
    """Argmin with ties broken towards the lowest index."""
    return int(np.argmin(scores))


def rank_captions(
    weights: Weights,
    image: ImageTokens,
    reference: Caption,
    n: int,
    temperature: float,
    seed: int,
) -> tuple[list[Caption], list[float]]:
    candidates = sample_captions(weights, image, n, temperature, seed)
    return candidates, [similarity(c, reference) for c in candidates]


def rank_images(
    weights: Weights,
    caption: Caption,
    qa: Sequence[QAPair],
    n: int,
    temperature: float,
    seed: int,
    grid_size: int,
) -> tuple[list[ImageTokens], list[float]]:
    candidates = sample_images(weights, caption, n, temperature, seed, grid_size)
    responses = self_vqa_responses(weights, candidates, qa)
    return candidates, [accuracy_from_responses(r, qa) for r in responses]


# ---------------------------------------------------------------------------
# Per-side curation
# ---------------------------------------------------------------------------


def pair_seed(cfg: CurationConfig, round_index: int, pair_id: int, side: str) -> int:
    return derive_seed(cfg.seed, round_index, pair_id, side)


def curate_understanding(
    weights: Weights, pair: HomologousPair, cfg: CurationConfig, *, round_index: int = 0
) -> UnderstandingPreference | Skip:
    seed = pair_seed(cfg, round_index, pair.pair_id, "und")
    candidates, scores = rank_captions(
        weights, pair.image, pair.caption, cfg.n, cfg.temperature, seed
    )
    if len(set(candidates)) == 1:
        return Skip(side="und", reason="identical_candidates")
    if max(scores) == min(scores):
        return Skip(side="und", reason="tied_scores")
    w, lo = best_index(scores), worst_index(scores)
    return UnderstandingPreference(
        image=pair.image,
        y_w=candidates[w],
        y_l=candidates[lo],
        s_w=scores[w],
        s_l=scores[lo],
        candidates=tuple(candidates),
        scores=tuple(scores),
        seed=seed,
    )


def curate_generation(
    weights: Weights, pair: HomologousPair, cfg: CurationConfig, *, round_index: int = 0
) -> GenerationPreference | Skip:
    seed = pair_seed(cfg, round_index, pair.pair_id, "gen")
    candidates, accuracies = rank_images(
        weights,
        pair.caption,
        pair.qa[: cfg.q],
        cfg.n,
        cfg.temperature,
        seed,
        pair.scene.grid_size,
    )
    if max(accuracies) <= cfg.gen_accuracy_threshold:
        return Skip(side="gen", reason="below_threshold")
    if max(accuracies) == min(accuracies):
        return Skip(side="gen", reason="tied_accuracies")
    w, lo = best_index(accuracies), worst_index(accuracies)
    return GenerationPreference(
        caption=pair.caption,
        x_w=candidates[w],
        x_l=candidates[lo],
        acc_w=accuracies[w],
        acc_l=accuracies[lo],
        candidates=tuple(candidates),
        accuracies=tuple(accuracies),
        seed=seed,
    )


def join_halves(
    pair: HomologousPair,
    und: UnderstandingPreference,
    gen: GenerationPreference,
    round_index: int,
) -> HomologousPreferenceTuple:
    return HomologousPreferenceTuple(
        pair_id=pair.pair_id,
        x=pair.image,
        y=pair.caption,
        x_w=gen.x_w,
        x_l=gen.x_l,
        y_w=und.y_w,
        y_l=und.y_l,
        s_w=und.s_w,
        s_l=und.s_l,
        acc_w=gen.acc_w,
        acc_l=gen.acc_l,
        seed=und.seed,
        round_index=round_index,
        und_candidates=und.candidates,
        und_scores=und.scores,
        gen_candidates=gen.candidates,
        gen_accuracies=gen.accuracies,
    )


def curate_pair(
    weights: Weights, pair: HomologousPair, cfg: CurationConfig, round_index: int = 0
) -> HomologousPreferenceTuple | list[Skip]:
    """Both halves for one pair, or the skip markers that dropped it."""
    und = curate_understanding(weights, pair, cfg, round_index=round_index)
    gen = curate_generation(weights, pair, cfg, round_index=round_index)
    if isinstance(und, Skip) or isinstance(gen, Skip):
        return [half for half in (und, gen) if isinstance(half, Skip)]
    return join_halves(pair, und, gen, round_index)


# ---------------------------------------------------------------------------
# Dataset curation
# ---------------------------------------------------------------------------


@dataclass
class CurationResult:
    tuples: list[HomologousPreferenceTuple]
    skipped: dict[str, int] = field(default_factory=dict)
    attempted: int = 0


def skip_counts(outcomes: Sequence[HomologousPreferenceTuple | list[Skip]]) -> dict[str, int]:
    counts: Counter[str] = Counter()
    for outcome in outcomes:
        if isinstance(outcome, list):
            counts.update(f"{s.side}:{s.reason}" for s in outcome)
    return dict(sorted(counts.items()))


async def map_pairs(
    fn: Callable[[HomologousPair], T],
    pairs: Sequence[HomologousPair],
    workers: int,
    desc: str,
) -> list[T]:
    """Run ``fn`` per pair in worker threads; results keep input order."""
    gate = asyncio.Semaphore(workers)
    bar = tqdm(total=len(pairs), desc=desc, disable=not logger.isEnabledFor(logging.INFO))

    async def run(pair: HomologousPair) -> T:
        async with gate:
            result = await asyncio.to_thread(fn, pair)
        bar.update(1)
        return result

    try:
        return list(await asyncio.gather(*(run(p) for p in pairs)))
    finally:
        bar.close()


async def curate_pairs(
    weights: Weights,
    pairs: Sequence[HomologousPair],
    cfg: CurationConfig,
    *,
    round_index: int = 0,
) -> CurationResult:
    selected = pairs[: cfg.max_pairs] if cfg.max_pairs else pairs
    workers = cfg.workers or get_settings().WORKERS
    outcomes = await map_pairs(
        lambda pair: curate_pair(weights, pair, cfg, round_index),
        selected,
        workers,
        f"curate round {round_index}",
    )
    tuples = [o for o in outcomes if isinstance(o, HomologousPreferenceTuple)]
    result = CurationResult(tuples=tuples, skipped=skip_counts(outcomes), attempted=len(selected))
    logger.info(
        "curated %d/%d pairs (skips: %s)", len(tuples), len(selected), result.skipped or "none"
    )
    return result


def require_tuples(result: CurationResult) -> list[HomologousPreferenceTuple]:
    if not result.tuples:
        raise CurationError(
            f"no preference tuple survived curation of {result.attempted} pairs",
            skipped=result.skipped,
            attempted=result.attempted,
        )
    return result.tuples


def curate_dataset(
    weights: Weights,
    pairs: Sequence[HomologousPair],
    cfg: CurationConfig,
    *,
    round_index: int = 0,
) -> list[HomologousPreferenceTuple]:
    """One tuple per pair whose two halves both survived, in input order."""
    return require_tuples(asyncio.run(curate_pairs(weights, pairs, cfg, round_index=round_index)))


class Curator(BaseStage[Sequence[HomologousPair], CurationResult]):
    """
    Homologous pairs -> homologous preference tuples (x, y, x_w, x_l, y_w, y_l).

    The weights used for sampling and self-VQA are injected; an empty
    surviving dataset raises ``CurationError`` with the skip counts.
    """

    def __init__(self, weights: Weights, cfg: CurationConfig, *, round_index: int = 0) -> None:
        self.weights = weights
        self.cfg = cfg
        self.round_index = round_index

    async def process(self, data: Sequence[HomologousPair]) -> CurationResult:
        result = await curate_pairs(self.weights, data, self.cfg, round_index=self.round_index)
        require_tuples(result)
        return result
