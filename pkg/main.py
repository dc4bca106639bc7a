"""
gapflow: command-line entry point.

Subcommands map onto the pipeline filters:

    gen-data -> pretrain -> curate -> align | iterate -> eval-gap -> ablate -> report

Every command works inside one run directory (``--run``, default
``$GAPFLOW_OUTPUT_ROOT/<run_name>``), holds its lock while running, echoes
the resolved config next to what it writes and refuses to overwrite an
existing artifact unless ``--force`` is given. Failures print one JSON line
``{"error", "message", "details"}`` to stderr and exit with status 2.
"""

import argparse
import asyncio
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from pydantic import ValidationError

from core.config import RunConfig, get_settings, load_run_config
from core.errors import GapflowError, RunDirectoryError
from core.model import ModelParams
from core.schema import HomologousPair, HomologousPreferenceTuple, PretrainLogRecord
from core.world import build_splits
from stages.ablation import Ablation
from stages.aligner import Aligner, implicit_margins
from stages.curator import Curator
from stages.evaluator import GapEvaluator
from stages.librarian import (
    ABLATION_CSV,
    BASELINE_DIR,
    CONFIG_NAME,
    CURATION_DIR,
    EVAL_DATA,
    PRETRAIN_DIR,
    TRAIN_DATA,
    RunStore,
    align_dir,
    round_dir,
)
from stages.pretrainer import Pretrainer
from stages.reporter import Reporter, example_block
from stages.self_play import SelfPlay

logger = logging.getLogger("gapflow")

MODES = {
    "pair": "pair",
    "und": "und_only",
    "gen": "gen_only",
    "und_only": "und_only",
    "gen_only": "gen_only",
}

# dest -> dotted config keys it overrides
FLAG_KEYS: dict[str, tuple[str, ...]] = {
    "count": ("world.train_pairs",),
    "eval_count": ("world.eval_pairs",),
    "grid": ("world.grid_size",),
    "q": ("world.questions_per_pair", "curation.q"),
    "seed": ("seed",),
    "pretrain_steps": ("pretrain.steps",),
    "n": ("curation.n",),
    "temperature": ("curation.temperature",),
    "max_pairs": ("curation.max_pairs",),
    "workers": ("curation.workers",),
    "mode": ("alignment.mode",),
    "form": ("alignment.form",),
    "beta": ("alignment.beta",),
    "align_steps": ("alignment.steps",),
    "rounds": ("self_play.rounds",),
    "eval_seed": ("eval.seed",),
}


# ---------------------------------------------------------------------------
# Configuration and run directory
# ---------------------------------------------------------------------------


def flag_overrides(args: argparse.Namespace) -> list[str]:
    overrides = list(args.set or [])
    for dest, keys in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "mode":
            value = MODES[value]
        encoded = value if isinstance(value, str) else json.dumps(value)
        overrides.extend(f"{key}={encoded}" for key in keys)
    return overrides


def resolve(args: argparse.Namespace) -> tuple[RunConfig, RunStore]:
    """Config from --config, else the run's echoed config, else defaults; then overrides."""
    overrides = flag_overrides(args)
    if args.config is not None:
        cfg = load_run_config(Path(args.config), overrides)
    elif args.run is not None and (Path(args.run) / CONFIG_NAME).exists():
        cfg = load_run_config(Path(args.run) / CONFIG_NAME, overrides)
    else:
        cfg = load_run_config(None, overrides)
    root = Path(args.run) if args.run is not None else cfg.resolved_output_dir()
    if args.run is None and args.config is None and (root / CONFIG_NAME).exists():
        cfg = load_run_config(root / CONFIG_NAME, overrides)
    return cfg, RunStore(root, force=args.force)


def load_weights(store: RunStore, relative: str = PRETRAIN_DIR) -> ModelParams:
    return store.load_checkpoint(relative).params


def read_splits(store: RunStore) -> tuple[list[HomologousPair], list[HomologousPair]]:
    return store.read_pairs(TRAIN_DATA), store.read_pairs(EVAL_DATA)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace, cfg: RunConfig, store: RunStore) -> None:
    train, held_out = build_splits(cfg.world, cfg.seed)
    store.write_config(cfg)
    store.write_pairs(TRAIN_DATA, train)
    store.write_pairs(EVAL_DATA, held_out)
    questions = sum(len(p.qa) for p in train)
    print(
        f"wrote {len(train)} training pairs ({questions} questions) and "
        f"{len(held_out)} evaluation pairs to {store.path('data')}"
    )


def cmd_pretrain(args: argparse.Namespace, cfg: RunConfig, store: RunStore) -> None:
    pairs = store.read_pairs(args.data or TRAIN_DATA)
    params: ModelParams | None = None
    optimizer_state: dict[str, object] | None = None
    start = 0
    history: list[PretrainLogRecord] = []
    if not args.resume:
        store.claim(f"{PRETRAIN_DIR}/checkpoint.bin")
    else:
        checkpoint = store.load_checkpoint(PRETRAIN_DIR)
        params, optimizer_state = checkpoint.params, checkpoint.optimizer_state
        start = checkpoint.step
        history = store.read_jsonl(f"{PRETRAIN_DIR}/trainlog.jsonl", PretrainLogRecord)[:start]
        store = RunStore(store.root, force=True)
        logger.info("resuming pretraining at step %d", start)
    pretrainer = Pretrainer(
        cfg.model,
        cfg.pretrain,
        params=params,
        optimizer_state=optimizer_state,
        start_step=start,
        stop_step=args.stop_step,
    )
    result = asyncio.run(pretrainer.process(pairs))
    store.write_config(cfg, f"{PRETRAIN_DIR}/{CONFIG_NAME}")
    digest = store.save_checkpoint(
        PRETRAIN_DIR,
        result.params,
        step=result.step,
        optimizer_state=result.optimizer.state_dict(),
    )
    log = history + result.log
    store.write_jsonl(f"{PRETRAIN_DIR}/trainlog.jsonl", log)
    final = f"{log[-1].loss:.4f}" if log else "n/a"
    print(f"pretrained to step {result.step}; final loss {final}; checkpoint {digest[:12]}")


def cmd_curate(args: argparse.Namespace, cfg: RunConfig, store: RunStore) -> None:
    store.claim(f"{CURATION_DIR}/prefs.jsonl")
    params = load_weights(store)
    pairs = store.read_pairs(TRAIN_DATA)
    result = asyncio.run(Curator(params, cfg.curation).process(pairs))
    tuples = result.tuples
    store.write_config(cfg, f"{CURATION_DIR}/{CONFIG_NAME}")
    store.write_jsonl(f"{CURATION_DIR}/prefs.jsonl", tuples)
    print(f"curated {len(tuples)}/{result.attempted} pairs; skips {result.skipped or 'none'}")


def _preferences(store: RunStore) -> list[HomologousPreferenceTuple]:
    for relative in (f"{CURATION_DIR}/prefs.jsonl", f"{round_dir(0)}/prefs.jsonl"):
        if store.exists(relative):
            return store.read_jsonl(relative, HomologousPreferenceTuple)
    raise RunDirectoryError(
        f"no preference dataset in {store.root}; run `curate` first", path=str(store.root)
    )


def cmd_align(args: argparse.Namespace, cfg: RunConfig, store: RunStore) -> None:
    params = load_weights(store)
    tuples = _preferences(store)
    _, held_out = read_splits(store)
    folder = align_dir(cfg.alignment.mode)
    store.claim(f"{folder}/checkpoint.bin")
    result = asyncio.run(Aligner(params, cfg.alignment).process(tuples))
    store.write_config(cfg, f"{folder}/{CONFIG_NAME}")
    digest = store.save_checkpoint(folder, result.params, step=len(result.log))
    store.write_jsonl(f"{folder}/trainlog.jsonl", result.log)
    margins = implicit_margins(result.params, result.reference, tuples, cfg.alignment.beta)
    report = asyncio.run(GapEvaluator(result.params, cfg.eval, label=folder).process(held_out))
    store.write_json(f"{folder}/gap.json", report)
    print(
        f"aligned ({cfg.alignment.mode}, {len(result.log)} steps): final loss "
        f"{result.log[-1].loss:.4f}; mean Δund {margins.und.mean():.4f} "
        f"Δgen {margins.gen.mean():.4f}; gap {report.gap:.4f}; checkpoint {digest[:12]}"
    )


def cmd_iterate(args: argparse.Namespace, cfg: RunConfig, store: RunStore) -> None:
    store.claim(f"{round_dir(0)}/prefs.jsonl")
    params = load_weights(store)
    train, held_out = read_splits(store)
    store.write_config(cfg, f"{round_dir(0)}/{CONFIG_NAME}")
    result = asyncio.run(SelfPlay(params, cfg, eval_pairs=held_out, store=store).process(train))
    print(f"baseline gap {result.baseline.gap:.4f}")
    for r in result.rounds:
        print(
            f"{round_dir(r.round_index)}: {r.tuples} tuples, und {r.report.understanding_score:.4f}"
            f" gen {r.report.generation_score:.4f} gap {r.report.gap:.4f}"
        )


def cmd_eval_gap(args: argparse.Namespace, cfg: RunConfig, store: RunStore) -> None:
    source = args.checkpoint or PRETRAIN_DIR
    params = load_weights(store, source)
    _, held_out = read_splits(store)
    folder = BASELINE_DIR if source == PRETRAIN_DIR else source
    store.claim(f"{folder}/gap.json")
    report = asyncio.run(GapEvaluator(params, cfg.eval, label=folder).process(held_out))
    store.write_config(cfg, f"{folder}/{CONFIG_NAME}")
    store.write_json(f"{folder}/gap.json", report)
    print(
        json.dumps(
            {
                "label": report.label,
                "understanding_score": report.understanding_score,
                "generation_score": report.generation_score,
                "gap": report.gap,
                "checkpoint_hash": report.checkpoint_hash,
            }
        )
    )


def cmd_ablate(args: argparse.Namespace, cfg: RunConfig, store: RunStore) -> None:
    store.claim(ABLATION_CSV)
    params = load_weights(store)
    train, held_out = read_splits(store)
    store.write_config(cfg, f"ablation/{CONFIG_NAME}")
    rows = asyncio.run(Ablation(params, cfg, eval_pairs=held_out, store=store).process(train))
    for row in rows:
        print(f"{row.mode:9s} n={row.n} round={row.round} gap {row.gap:.4f} {row.note}".rstrip())


def cmd_report(args: argparse.Namespace, cfg: RunConfig, store: RunStore) -> None:
    summary = asyncio.run(Reporter(cfg.run_name).process(store))
    print(f"report: {store.path('report.md')} ({len(summary.rounds)} rounds)")
    if args.plot:
        from scripts.plot_gap import plot_run

        for path in plot_run(store):
            print(f"plot: {path}")


def cmd_show_example(args: argparse.Namespace, cfg: RunConfig, store: RunStore) -> None:
    tuples = _preferences(store)
    wanted = tuples[0].pair_id if args.pair is None else args.pair
    item = next((t for t in tuples if t.pair_id == wanted), None)
    if item is None:
        raise RunDirectoryError(f"pair {args.pair} has no preference tuple", pair_id=args.pair)
    print("\n".join(line for line in example_block(item) if line != "```"))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "curate": cmd_curate,
    "align": cmd_align,
    "iterate": cmd_iterate,
    "eval-gap": cmd_eval_gap,
    "ablate": cmd_ablate,
    "report": cmd_report,
    "show-example": cmd_show_example,
}
READ_ONLY = {"show-example"}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run config")
    common.add_argument(
        "--set", action="append", metavar="SECTION.KEY=VALUE", help="Override a config value"
    )
    common.add_argument("--run", "--out", dest="run", help="Run directory")
    common.add_argument("--force", action="store_true", help="Overwrite existing artifacts")
    common.add_argument("--log-level", help="Logging level (default GAPFLOW_LOG_LEVEL)")

    parser = argparse.ArgumentParser(
        prog="gapflow", description="Close the understanding/generation gap of a toy unified model."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="Generate homologous pairs")
    p.add_argument("--count", type=int, help="Training pairs")
    p.add_argument("--eval-count", type=int, help="Held-out evaluation pairs")
    p.add_argument("--grid", type=int, help="Grid side length")
    p.add_argument("--q", type=int, help="Questions per pair")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("pretrain", parents=[common], help="Mixed-task pretraining")
    p.add_argument("--data", help="Training pairs JSONL (default: the run's data/train.jsonl)")
    p.add_argument("--steps", dest="pretrain_steps", type=int)
    p.add_argument("--resume", action="store_true", help="Continue from pretrain/")
    p.add_argument("--stop-step", type=int, help="Stop early at this step (resumable)")

    p = sub.add_parser("curate", parents=[common], help="Curate homologous preference data")
    p.add_argument("--n", type=int, help="Candidates per side")
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-pairs", type=int)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("align", parents=[common], help="Pair-DPO or one-sided DPO")
    p.add_argument("--mode", choices=sorted(MODES))
    p.add_argument("--form", choices=["sum", "product"])
    p.add_argument("--beta", type=float)
    p.add_argument("--steps", dest="align_steps", type=int)

    p = sub.add_parser("iterate", parents=[common], help="Self-play rounds")
    p.add_argument("--rounds", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--steps", dest="align_steps", type=int)
    p.add_argument("--max-pairs", type=int)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("eval-gap", parents=[common], help="Understanding/generation gap")
    p.add_argument("--checkpoint", help="Checkpoint directory inside the run (default pretrain)")
    p.add_argument("--eval-seed", type=int)

    p = sub.add_parser("ablate", parents=[common], help="Mode rows and the n-sweep")
    p.add_argument("--steps", dest="align_steps", type=int)
    p.add_argument("--max-pairs", type=int)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("report", parents=[common], help="Aggregate report.md and summary.csv")
    p.add_argument("--plot", action="store_true", help="Also render PNG charts")

    p = sub.add_parser("show-example", parents=[common], help="Print one preference tuple")
    p.add_argument("--pair", type=int, help="pair_id (default: the first tuple)")
    return parser


def configure_logging(level: str | None) -> None:
    logging.basicConfig(
        level=(level or get_settings().LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        cfg, store = resolve(args)
        command = COMMANDS[args.command]
        if args.command in READ_ONLY:
            command(args, cfg, store)
        else:
            with store.lock():
                command(args, cfg, store)
    except GapflowError as exc:
        print(json.dumps(exc.to_json()), file=sys.stderr)
        return 2
    except OSError as exc:
        error = RunDirectoryError(f"{exc.strerror or exc}", path=str(exc.filename or ""))
        print(json.dumps(error.to_json()), file=sys.stderr)
        return 2
    except (ValidationError, ValueError) as exc:
        error = {"error": "invalid_config", "message": str(exc), "details": {}}
        print(json.dumps(error), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
