"""Ablation rows: one-sided DPO, Pair-DPO per iteration and the n-sweep."""

from collections.abc import Sequence
from pathlib import Path

import pytest

from core.config import AblationConfig, AlignmentConfig, CurationConfig, EvalConfig, RunConfig
from core.errors import CurationError
from core.model import ModelParams
from core.schema import GapReport, HomologousPair, HomologousPreferenceTuple, RoundResult
from stages import ablation
from stages.ablation import Ablation, ablation_suite, read_ablation
from stages.aligner import AlignmentResult
from stages.librarian import RunStore
from stages.self_play import SelfPlayResult


def _report(label: str, und: float, gen: float) -> GapReport:
    return GapReport(
        label=label,
        understanding_score=und,
        generation_score=gen,
        gap=und - gen,
        n_pairs=1,
        n_questions=4,
        seed=0,
        temperature=1.0,
    )


def _item(pair: HomologousPair) -> HomologousPreferenceTuple:
    return HomologousPreferenceTuple(
        pair_id=pair.pair_id,
        x=pair.image,
        y=pair.caption,
        x_w=pair.image,
        x_l=pair.image,
        y_w=pair.caption,
        y_l=pair.caption,
        s_w=1.0,
        s_l=0.0,
        acc_w=1.0,
        acc_l=0.0,
        seed=0,
    )


SCORES = {"und_only": (0.75, 0.5), "gen_only": (0.5, 0.5), "n=2": (0.5, 0.25)}


@pytest.fixture
def stubbed(
    monkeypatch: pytest.MonkeyPatch, train_pairs: list[HomologousPair]
) -> list[str]:
    """Replace training and evaluation with canned reports; returns the curation calls."""
    curated: list[str] = []
    baseline = _report("baseline", 0.75, 0.25)

    def self_play(
        params: ModelParams,
        pairs: Sequence[HomologousPair],
        cfg: RunConfig,
        rounds: int | None = None,
        *,
        eval_pairs: Sequence[HomologousPair],
        store: RunStore | None = None,
    ) -> SelfPlayResult:
        result = SelfPlayResult(params=params, baseline=baseline)
        for index in range(rounds or 1):
            report = _report(f"round_{index}", 0.75, 0.5 + 0.125 * index)
            result.rounds.append(
                RoundResult(round_index=index, tuples=5, checkpoint_hash="h", report=report)
            )
            result.datasets.append([_item(p) for p in pairs[:5]])
        return result

    def align(
        params: ModelParams,
        dataset: Sequence[HomologousPreferenceTuple],
        cfg: AlignmentConfig,
        **kwargs: object,
    ) -> AlignmentResult:
        return AlignmentResult(params=params, reference=params.snapshot())

    def evaluate(
        params: ModelParams, pairs: Sequence[HomologousPair], cfg: EvalConfig, *, label: str
    ) -> GapReport:
        return _report(label, *SCORES[label])

    def curate(
        params: ModelParams, pairs: Sequence[HomologousPair], cfg: CurationConfig
    ) -> list[HomologousPreferenceTuple]:
        curated.append(f"n={cfg.n}")
        if cfg.n == 5:
            raise CurationError("nothing survived", skipped={}, attempted=len(pairs))
        return [_item(p) for p in pairs]

    monkeypatch.setattr(ablation, "run_self_play", self_play)
    monkeypatch.setattr(ablation, "align_run", align)
    monkeypatch.setattr(ablation, "gap_report", evaluate)
    monkeypatch.setattr(ablation, "curate_dataset", curate)
    return curated


@pytest.fixture
def cfg(tiny_run_cfg: RunConfig) -> RunConfig:
    return tiny_run_cfg.model_copy(
        update={"ablation": AblationConfig(n_values=(1, 2, 3, 5), iterations=2)}
    )


def test_rows_cover_modes_iterations_and_sweep(
    stubbed: list[str],
    cfg: RunConfig,
    tiny_params: ModelParams,
    train_pairs: list[HomologousPair],
    eval_pairs: list[HomologousPair],
) -> None:
    rows = ablation_suite(tiny_params, train_pairs, cfg, eval_pairs=eval_pairs)
    assert [(r.mode, r.n, r.round) for r in rows] == [
        ("baseline", 3, 0),
        ("und_only", 3, 1),
        ("gen_only", 3, 1),
        ("pair", 3, 1),
        ("pair", 3, 2),
        ("n_sweep", 1, 0),
        ("n_sweep", 2, 1),
        ("n_sweep", 3, 1),
        ("n_sweep", 5, 0),
    ]
    by_key = {(r.mode, r.n, r.round): r for r in rows}
    assert by_key[("und_only", 3, 1)].gap == 0.25
    assert by_key[("pair", 3, 2)].gen == 0.625
    # the configured n reuses the first self-play round instead of re-curating
    assert by_key[("n_sweep", 3, 1)].gap == by_key[("pair", 3, 1)].gap
    assert stubbed == ["n=2", "n=5"]
    assert by_key[("n_sweep", 1, 0)].note.startswith("n < 2")
    assert by_key[("n_sweep", 1, 0)].gap == by_key[("baseline", 3, 0)].gap
    assert by_key[("n_sweep", 5, 0)].note == "no tuple survived curation"


async def test_stage_writes_the_table(
    stubbed: list[str],
    cfg: RunConfig,
    tiny_params: ModelParams,
    train_pairs: list[HomologousPair],
    eval_pairs: list[HomologousPair],
    tmp_path: Path,
) -> None:
    store = RunStore(tmp_path)
    rows = await Ablation(tiny_params, cfg, eval_pairs=eval_pairs, store=store).process(
        train_pairs
    )
    assert store.exists("ablation/ablation.csv")
    assert read_ablation(store) == rows
