"""
Ablation: Pair-DPO against one-sided DPO, the effect of iterations, and the
number of sampled candidates per side.

Mode rows: the untouched baseline, understanding-only DPO, generation-only
DPO and Pair-DPO after each self-play round. Sweep rows: one round of
Pair-DPO per value of n.
"""

import asyncio
import logging
from collections.abc import Sequence

import pandas as pd

from core.config import RunConfig
from core.errors import CurationError
from core.model import ModelParams
from core.schema import AblationRow, GapReport, HomologousPair, HomologousPreferenceTuple
from stages.aligner import align_run
from stages.base import BaseStage
from stages.curator import curate_dataset
from stages.evaluator import gap_report
from stages.librarian import ABLATION_CSV, RunStore
from stages.self_play import run_self_play

logger = logging.getLogger(__name__)

COLUMNS = ["mode", "n", "round", "und", "gen", "gap", "tuples", "note"]


def _row(
    mode: str, n: int, round_index: int, report: GapReport, tuples: int = 0, note: str = ""
) -> AblationRow:
    return AblationRow(
        mode=mode,
        n=n,
        round=round_index,
        und=report.understanding_score,
        gen=report.generation_score,
        gap=report.gap,
        tuples=tuples,
        note=note,
    )


def one_sided_rows(
    params: ModelParams,
    tuples: Sequence[HomologousPreferenceTuple],
    eval_pairs: Sequence[HomologousPair],
    cfg: RunConfig,
) -> list[AblationRow]:
    rows = []
    for mode in ("und_only", "gen_only"):
        align_cfg = cfg.alignment.model_copy(update={"mode": mode})
        aligned = align_run(params, tuples, align_cfg)
        report = gap_report(aligned.params, eval_pairs, cfg.eval, label=mode)
        rows.append(_row(mode, cfg.curation.n, 1, report, len(tuples)))
    return rows


def sweep_row(
    params: ModelParams,
    pairs: Sequence[HomologousPair],
    eval_pairs: Sequence[HomologousPair],
    cfg: RunConfig,
    n: int,
    baseline: GapReport,
) -> AblationRow:
    """One round of Pair-DPO with ``n`` candidates per side."""
    if n < 2:
        return _row("n_sweep", n, 0, baseline, note="n < 2 yields no preference pair")
    curation = cfg.curation.model_copy(update={"n": n})
    try:
        tuples = curate_dataset(params, pairs, curation)
    except CurationError as exc:
        logger.warning("n=%d: %s", n, exc.message)
        return _row("n_sweep", n, 0, baseline, note="no tuple survived curation")
    aligned = align_run(params, tuples, cfg.alignment)
    report = gap_report(aligned.params, eval_pairs, cfg.eval, label=f"n={n}")
    return _row("n_sweep", n, 1, report, len(tuples))


def ablation_suite(
    params: ModelParams,
    pairs: Sequence[HomologousPair],
    cfg: RunConfig,
    *,
    eval_pairs: Sequence[HomologousPair],
    store: RunStore | None = None,
) -> list[AblationRow]:
    """Mode rows then sweep rows; written to ``ablation/ablation.csv`` when a store is given."""
    n = cfg.curation.n
    played = run_self_play(params, pairs, cfg, cfg.ablation.iterations, eval_pairs=eval_pairs)
    rows = [_row("baseline", n, 0, played.baseline)]
    rows.extend(one_sided_rows(params, played.datasets[0], eval_pairs, cfg))
    rows.extend(_row("pair", n, r.round_index + 1, r.report, r.tuples) for r in played.rounds)

    selected = pairs[: cfg.curation.max_pairs] if cfg.curation.max_pairs else pairs
    for value in cfg.ablation.n_values:
        if value == n:
            first = played.rounds[0]
            rows.append(_row("n_sweep", n, 1, first.report, first.tuples))
        else:
            rows.append(sweep_row(params, selected, eval_pairs, cfg, value, played.baseline))
        logger.info("n-sweep n=%d gap %.4f", value, rows[-1].gap)

    if store is not None:
        store.write_csv(ABLATION_CSV, ablation_frame(rows))
    return rows


def ablation_frame(rows: Sequence[AblationRow]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in rows], columns=COLUMNS)


def read_ablation(store: RunStore) -> list[AblationRow]:
    frame = store.read_csv(ABLATION_CSV).fillna({"note": ""})
    return [AblationRow.model_validate(record) for record in frame.to_dict(orient="records")]


class Ablation(BaseStage[Sequence[HomologousPair], list[AblationRow]]):
    """Training pairs -> one ablation row per mode and per sweep value."""

    def __init__(
        self,
        params: ModelParams,
        cfg: RunConfig,
        *,
        eval_pairs: Sequence[HomologousPair],
        store: RunStore | None = None,
    ) -> None:
        self.params = params
        self.cfg = cfg
        self.eval_pairs = eval_pairs
        self.store = store

    async def process(self, data: Sequence[HomologousPair]) -> list[AblationRow]:
        return await asyncio.to_thread(
            ablation_suite,
            self.params,
            data,
            self.cfg,
            eval_pairs=self.eval_pairs,
            store=self.store,
        )
