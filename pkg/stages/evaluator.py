"""
Evaluator: understanding/generation gap on a held-out split.

Understanding: the model answers every question about the true image.
Generation: the model draws one image per caption; the oracle answers the
same questions against the parsed generated scene. Both scores are means of
per-question {0, 1} indicators and the report keeps every indicator, so
both scores can be recomputed exactly from ``gap.json``.

The answerer and the generator are injectable callables, which lets tests
substitute the oracle, constant answerers or a ground-truth replay.
"""

import asyncio
import logging
from collections.abc import Callable, Iterable, Sequence

from tqdm import tqdm

from core.config import EvalConfig, derive_seed
from core.errors import ContractError, MalformedImageError
from core.model import ModelParams, ReferenceSnapshot, Weights
from core.sampling import answer_batch, sample_images
from core.schema import (
    QA_KINDS,
    Caption,
    GapReport,
    HomologousPair,
    ImageTokens,
    KindScore,
    QAPair,
    QuestionOutcome,
)
from core.world import oracle_answer, parse
from stages.base import BaseStage

logger = logging.getLogger(__name__)

Answerer = Callable[[ImageTokens, Sequence[QAPair]], list[int]]
Generator = Callable[[Caption, int], ImageTokens]


def model_answerer(weights: Weights) -> Answerer:
    def answer(image: ImageTokens, qa: Sequence[QAPair]) -> list[int]:
        return answer_batch(weights, [(image, pair.question) for pair in qa])

    return answer


def model_generator(weights: Weights, temperature: float, grid_size: int = 4) -> Generator:
    def generate(caption: Caption, seed: int) -> ImageTokens:
        return sample_images(weights, caption, 1, temperature, seed, grid_size)[0]

    return generate


def _require_pairs(eval_pairs: Sequence[HomologousPair]) -> None:
    if not eval_pairs:
        raise ContractError("evaluation set is empty")


def _progress(pairs: Sequence[HomologousPair], desc: str) -> Iterable[HomologousPair]:
    return tqdm(pairs, desc=desc, disable=not logger.isEnabledFor(logging.INFO))


def understanding_outcomes(answerer: Answerer, eval_pairs: Sequence[HomologousPair]) -> list[bool]:
    outcomes: list[bool] = []
    for pair in _progress(eval_pairs, "eval understanding"):
        answers = answerer(pair.image, pair.qa)
        outcomes.extend(a == qa.answer for a, qa in zip(answers, pair.qa, strict=True))
    return outcomes


def generation_outcomes(
    generator: Generator, eval_pairs: Sequence[HomologousPair], seed: int
) -> list[bool]:
    outcomes: list[bool] = []
    for pair in _progress(eval_pairs, "eval generation"):
        image = generator(pair.caption, derive_seed(seed, "generate", pair.pair_id))
        try:
            scene = parse(image, pair.scene.grid_size)
        except MalformedImageError:
            logger.warning("pair %d: generated image is unparseable", pair.pair_id)
            outcomes.extend(False for _ in pair.qa)
            continue
        outcomes.extend(oracle_answer(scene, qa.question) == qa.answer for qa in pair.qa)
    return outcomes


def _as_answerer(source: Weights | Answerer) -> Answerer:
    if isinstance(source, (ModelParams, ReferenceSnapshot)):
        return model_answerer(source)
    return source


def _mean(indicators: Sequence[bool]) -> float:
    return sum(indicators) / len(indicators)


def understanding_score(
    source: Weights | Answerer, eval_pairs: Sequence[HomologousPair]
) -> float:
    """Mean of 𝕀[answer == A] over every (pair, question); the model answers."""
    _require_pairs(eval_pairs)
    return _mean(understanding_outcomes(_as_answerer(source), eval_pairs))


def generation_score(
    source: Weights | Generator,
    eval_pairs: Sequence[HomologousPair],
    temperature: float,
    seed: int,
) -> float:
    """Mean of 𝕀[oracle(generated scene, Q) == A]; one generated image per caption."""
    _require_pairs(eval_pairs)
    generator = (
        model_generator(source, temperature, eval_pairs[0].scene.grid_size)
        if isinstance(source, (ModelParams, ReferenceSnapshot))
        else source
    )
    return _mean(generation_outcomes(generator, eval_pairs, seed))


def breakdown(outcomes: Sequence[QuestionOutcome]) -> dict[str, KindScore]:
    table: dict[str, KindScore] = {}
    for kind in QA_KINDS:
        rows = [o for o in outcomes if o.kind == kind]
        if rows:
            table[kind] = KindScore(
                total=len(rows),
                und_correct=sum(o.und_correct for o in rows),
                gen_correct=sum(o.gen_correct for o in rows),
            )
    return table


def gap_report(
    weights: Weights | None,
    eval_pairs: Sequence[HomologousPair],
    cfg: EvalConfig,
    *,
    label: str = "",
    answerer: Answerer | None = None,
    generator: Generator | None = None,
) -> GapReport:
    """Both scores, their exact difference and every per-question indicator."""
    _require_pairs(eval_pairs)
    if answerer is None or generator is None:
        if weights is None:
            raise ContractError("gap_report needs weights or both an answerer and a generator")
        answerer = answerer or model_answerer(weights)
        generator = generator or model_generator(
            weights, cfg.temperature, eval_pairs[0].scene.grid_size
        )
    und = understanding_outcomes(answerer, eval_pairs)
    gen = generation_outcomes(generator, eval_pairs, cfg.seed)
    outcomes = []
    flat = iter(zip(und, gen, strict=True))
    for pair in eval_pairs:
        for index, qa in enumerate(pair.qa):
            und_ok, gen_ok = next(flat)
            outcomes.append(
                QuestionOutcome(
                    pair_id=pair.pair_id,
                    question_index=index,
                    kind=qa.kind,
                    und_correct=und_ok,
                    gen_correct=gen_ok,
                )
            )
    und_score, gen_score = _mean(und), _mean(gen)
    report = GapReport(
        label=label,
        understanding_score=und_score,
        generation_score=gen_score,
        gap=und_score - gen_score,
        n_pairs=len(eval_pairs),
        n_questions=len(outcomes),
        seed=cfg.seed,
        temperature=cfg.temperature,
        checkpoint_hash=weights.digest() if weights is not None else "",
        breakdown=breakdown(outcomes),
        outcomes=tuple(outcomes),
    )
    logger.info(
        "gap %s: und %.4f gen %.4f gap %.4f", label or "-", und_score, gen_score, report.gap
    )
    return report


def recompute_scores(report: GapReport) -> tuple[float, float]:
    """Scores recomputed from the persisted per-question outcomes."""
    und = [o.und_correct for o in report.outcomes]
    gen = [o.gen_correct for o in report.outcomes]
    return _mean(und), _mean(gen)


class GapEvaluator(BaseStage[Sequence[HomologousPair], GapReport]):
    """Held-out pairs -> GapReport for the injected weights (read-only)."""

    def __init__(self, weights: ModelParams, cfg: EvalConfig, *, label: str = "") -> None:
        self.weights = weights
        self.cfg = cfg
        self.label = label

    async def process(self, data: Sequence[HomologousPair]) -> GapReport:
        return await asyncio.to_thread(gap_report, self.weights, data, self.cfg, label=self.label)
