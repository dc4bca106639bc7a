"""
Charts for a finished run: gap per self-play round and the n-sweep curve.

Rendered by ``main.py report --plot`` into the run directory.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from stages.librarian import RunStore  # noqa: E402
from stages.reporter import RunSummary, collect, summary_frame  # noqa: E402

ROUNDS_PNG = "gap_rounds.png"
SWEEP_PNG = "n_sweep.png"


def plot_rounds(summary: RunSummary, output_path: Path) -> Path:
    """Grouped bars of understanding, generation and gap for the baseline and each round."""
    frame = summary_frame(summary)
    x = range(len(frame))
    width = 0.27
    fig, ax = plt.subplots(figsize=(max(5, 1.6 * len(frame)), 4))
    ax.bar([i - width for i in x], frame["understanding_score"], width, label="understanding")
    ax.bar(list(x), frame["generation_score"], width, label="generation")
    ax.bar([i + width for i in x], frame["gap"], width, label="gap", color="#c0392b")
    ax.set_xticks(list(x))
    ax.set_xticklabels(frame["label"])
    ax.set_ylabel("score")
    ax.set_title("Understanding/generation gap per round")
    ax.legend()
    fig.tight_layout()
    fig.savefig(output_path, dpi=120)
    plt.close(fig)
    return output_path


def plot_sweep(summary: RunSummary, output_path: Path) -> Path | None:
    """Gap against the number of candidates per side; ``None`` without sweep rows."""
    rows = sorted((r for r in summary.ablation if r.mode == "n_sweep"), key=lambda r: r.n)
    if not rows:
        return None
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([r.n for r in rows], [r.gap for r in rows], marker="o", label="gap")
    ax.axhline(summary.baseline.gap, linestyle="--", color="grey", label="baseline")
    ax.set_xlabel("candidates per side (n)")
    ax.set_ylabel("gap")
    ax.set_title("Gap after one round vs n")
    ax.legend()
    fig.tight_layout()
    fig.savefig(output_path, dpi=120)
    plt.close(fig)
    return output_path


def plot_run(store: RunStore) -> list[Path]:
    summary = collect(store)
    written = [plot_rounds(summary, store.path(ROUNDS_PNG))]
    sweep = plot_sweep(summary, store.path(SWEEP_PNG))
    if sweep is not None:
        written.append(sweep)
    return written

