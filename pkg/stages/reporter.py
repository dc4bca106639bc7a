"""
Reporter: one human-readable summary of a run directory.

Collects ``baseline/gap.json``, every ``round_<k>/gap.json`` and, when
present, ``ablation/ablation.csv`` into ``report.md`` and ``summary.csv``.
Both outputs are derived artifacts and are regenerated on every call, so
re-running the report is idempotent.
"""

import asyncio
import logging
from dataclasses import dataclass, field

import pandas as pd

from core.errors import MalformedImageError
from core.schema import QA_KINDS, AblationRow, GapReport, HomologousPreferenceTuple, ImageTokens
from core.world import ascii_grid, parse
from stages.ablation import read_ablation
from stages.base import BaseStage
from stages.librarian import ABLATION_CSV, BASELINE_DIR, RunStore, round_dir

logger = logging.getLogger(__name__)

REPORT_NAME = "report.md"
SUMMARY_NAME = "summary.csv"
SUMMARY_COLUMNS = [
    "label",
    "round",
    "understanding_score",
    "generation_score",
    "gap",
    "reduction",
    "n_pairs",
    "n_questions",
    "seed",
    "checkpoint_hash",
]


@dataclass
class RunSummary:
    baseline: GapReport
    rounds: list[GapReport] = field(default_factory=list)
    ablation: list[AblationRow] = field(default_factory=list)
    example: HomologousPreferenceTuple | None = None


def collect(store: RunStore) -> RunSummary:
    """Read every report artifact present; the baseline is mandatory."""
    summary = RunSummary(baseline=store.read_json(f"{BASELINE_DIR}/gap.json", GapReport))
    index = 0
    while store.exists(f"{round_dir(index)}/gap.json"):
        summary.rounds.append(store.read_json(f"{round_dir(index)}/gap.json", GapReport))
        index += 1
    if store.exists(ABLATION_CSV):
        summary.ablation = read_ablation(store)
    prefs = f"{round_dir(0)}/prefs.jsonl"
    if store.exists(prefs):
        tuples = store.read_jsonl(prefs, HomologousPreferenceTuple)
        summary.example = tuples[0] if tuples else None
    return summary


def reduction(baseline_gap: float, gap: float) -> float | None:
    """Relative gap reduction against the baseline; undefined for a zero baseline gap."""
    if baseline_gap == 0:
        return None
    return (baseline_gap - gap) / baseline_gap


def summary_frame(summary: RunSummary) -> pd.DataFrame:
    rows = []
    for index, report in enumerate([summary.baseline, *summary.rounds]):
        rows.append(
            {
                "label": report.label or ("baseline" if index == 0 else round_dir(index - 1)),
                "round": index - 1,
                "understanding_score": report.understanding_score,
                "generation_score": report.generation_score,
                "gap": report.gap,
                "reduction": reduction(summary.baseline.gap, report.gap),
                "n_pairs": report.n_pairs,
                "n_questions": report.n_questions,
                "seed": report.seed,
                "checkpoint_hash": report.checkpoint_hash,
            }
        )
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


# ---------------------------------------------------------------------------
# Markdown
# ---------------------------------------------------------------------------


def _fmt(value: float | None, digits: int = 3) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def _percent(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.0%}"


def gap_table(frame: pd.DataFrame) -> list[str]:
    lines = [
        "| Model | Understanding | Generation | Gap | Reduction |",
        "|---|---:|---:|---:|---:|",
    ]
    for row in frame.itertuples(index=False):
        lines.append(
            f"| {row.label} | {_fmt(row.understanding_score)} | {_fmt(row.generation_score)} "
            f"| {_fmt(row.gap)} | {_percent(None if pd.isna(row.reduction) else row.reduction)} |"
        )
    return lines


def breakdown_table(reports: list[GapReport]) -> list[str]:
    header = "| Kind | " + " | ".join(f"{r.label} und | {r.label} gen" for r in reports) + " |"
    lines = [header, "|---|" + "---:|---:|" * len(reports)]
    for kind in QA_KINDS:
        cells = []
        for report in reports:
            score = report.breakdown.get(kind)
            if score is None or score.total == 0:
                cells += ["-", "-"]
            else:
                cells += [
                    _fmt(score.und_correct / score.total),
                    _fmt(score.gen_correct / score.total),
                ]
        lines.append(f"| {kind} | " + " | ".join(cells) + " |")
    return lines


def ablation_table(rows: list[AblationRow]) -> list[str]:
    lines = [
        "| Mode | n | Round | Understanding | Generation | Gap | Tuples | Note |",
        "|---|---:|---:|---:|---:|---:|---:|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r.mode} | {r.n} | {r.round} | {_fmt(r.und)} | {_fmt(r.gen)} | {_fmt(r.gap)} "
            f"| {r.tuples} | {r.note} |"
        )
    return lines


def _grid(image: ImageTokens, grid_size: int) -> list[str]:
    try:
        return ascii_grid(parse(image, grid_size)).splitlines()
    except MalformedImageError:
        return ["(unparseable)"]


def example_block(item: HomologousPreferenceTuple) -> list[str]:
    grid_size = int(round(len(item.x.root) ** 0.5))
    grids = [_grid(image, grid_size) for image in (item.x, item.x_w, item.x_l)]
    width = max(len(line) for grid in grids for line in grid)
    titles = ["x", f"x_w (acc {item.acc_w:.2f})", f"x_l (acc {item.acc_l:.2f})"]
    column = max(width, *(len(t) for t in titles)) + 3
    lines = ["```", "".join(t.ljust(column) for t in titles).rstrip()]
    for parts in zip(*grids, strict=False):
        lines.append("".join(p.ljust(column) for p in parts).rstrip())
    lines += [
        "",
        f"y   : {item.y.text()}",
        f"y_w : {item.y_w.text()}  (s {item.s_w:.2f})",
        f"y_l : {item.y_l.text()}  (s {item.s_l:.2f})",
        "```",
    ]
    return lines


def render_report(summary: RunSummary, run_name: str = "") -> str:
    frame = summary_frame(summary)
    lines = [f"# Understanding/generation gap{': ' + run_name if run_name else ''}", ""]
    lines += ["## Gap per round", "", *gap_table(frame), ""]
    final = summary.rounds[-1] if summary.rounds else None
    compared = [summary.baseline] + ([final] if final is not None else [])
    lines += ["## Per-kind accuracy", "", *breakdown_table(compared), ""]
    if summary.ablation:
        lines += ["## Ablation", "", *ablation_table(summary.ablation), ""]
    if summary.example is not None:
        lines += [
            f"## Paired preference example (pair {summary.example.pair_id})",
            "",
            *example_block(summary.example),
            "",
        ]
    lines += [
        f"Evaluation: {summary.baseline.n_pairs} pairs, {summary.baseline.n_questions} "
        f"questions, seed {summary.baseline.seed}, temperature {summary.baseline.temperature}.",
        "",
    ]
    return "\n".join(lines)


def write_report(store: RunStore, run_name: str = "") -> RunSummary:
    """Aggregate the run into ``report.md`` and ``summary.csv`` (always regenerated)."""
    summary = collect(store)
    derived = RunStore(store.root, force=True)
    derived.write_text(REPORT_NAME, render_report(summary, run_name))
    derived.write_csv(SUMMARY_NAME, summary_frame(summary))
    logger.info("report written to %s", store.path(REPORT_NAME))
    return summary


class Reporter(BaseStage[RunStore, RunSummary]):
    """Run directory -> report.md and summary.csv."""

    def __init__(self, run_name: str = "") -> None:
        self.run_name = run_name

    async def process(self, data: RunStore) -> RunSummary:
        return await asyncio.to_thread(write_report, data, self.run_name)
