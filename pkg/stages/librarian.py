"""
Librarian: artifact store for one run directory.

Owns every on-disk format: JSONL datasets and logs, JSON reports, CSV tables,
checkpoints, the echoed ``config.json`` and the ``.lock`` that keeps a second
command out of the directory. Existing artifacts are never overwritten unless
the store was opened with ``force=True``.

Layout::

    <run>/config.json
    <run>/data/{train,eval}.jsonl
    <run>/pretrain/{checkpoint.bin, manifest.json, optimizer.bin, trainlog.jsonl}
    <run>/curation/prefs.jsonl
    <run>/align_<mode>/{checkpoint.bin, manifest.json, trainlog.jsonl, gap.json}
    <run>/baseline/gap.json
    <run>/round_<k>/{prefs.jsonl, checkpoint.bin, manifest.json, trainlog.jsonl, gap.json}
    <run>/ablation/ablation.csv
    <run>/report.md, <run>/summary.csv

Every command also echoes its resolved config as ``config.json`` in the
directory it writes to.
"""

import logging
import os
from collections.abc import Iterable, Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import TypeVar

import pandas as pd
from pydantic import BaseModel

from core.config import RunConfig, load_run_config
from core.errors import RunDirectoryError
from core.model import Checkpoint, ModelParams, load_checkpoint, save_checkpoint
from core.schema import HomologousPair

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)

LOCK_NAME = ".lock"
CONFIG_NAME = "config.json"
TRAIN_DATA = "data/train.jsonl"
EVAL_DATA = "data/eval.jsonl"
PRETRAIN_DIR = "pretrain"
BASELINE_DIR = "baseline"
ABLATION_CSV = "ablation/ablation.csv"
CURATION_DIR = "curation"


def round_dir(index: int) -> str:
    return f"round_{index}"


def align_dir(mode: str) -> str:
    return f"align_{mode}"


class RunStore:
    """
    File-system store for the artifacts of a single run.

    Paths given to the read/write helpers are relative to the run root.
    Writers refuse to replace an existing file unless ``force`` is set;
    readers raise ``RunDirectoryError`` naming the missing artifact.
    """

    def __init__(self, root: Path, *, force: bool = False) -> None:
        self.root = Path(root)
        self.force = force

    # -- paths and guards -----------------------------------------------------

    def path(self, relative: str | Path) -> Path:
        return self.root / relative

    def exists(self, relative: str | Path) -> bool:
        return self.path(relative).exists()

    def _make_dir(self, directory: Path) -> None:
        try:
            directory.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise RunDirectoryError(
                f"cannot create directory {directory}: {exc.strerror}", path=str(directory)
            ) from exc

    def claim(self, relative: str | Path) -> Path:
        """Return a writable path, refusing to overwrite without ``force``."""
        target = self.path(relative)
        if target.exists() and not self.force:
            raise RunDirectoryError(
                f"{target} already exists; pass --force to overwrite", path=str(target)
            )
        self._make_dir(target.parent)
        return target

    def require(self, relative: str | Path) -> Path:
        target = self.path(relative)
        if not target.exists():
            raise RunDirectoryError(f"missing run artifact {target}", path=str(target))
        return target

    @contextmanager
    def lock(self) -> Iterator[None]:
        """Hold the run directory exclusively for the duration of one command."""
        self._make_dir(self.root)
        lock_path = self.path(LOCK_NAME)
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise RunDirectoryError(
                f"run directory {self.root} is locked by another command", path=str(lock_path)
            ) from exc
        except OSError as exc:
            raise RunDirectoryError(
                f"cannot lock run directory {self.root}: {exc.strerror}", path=str(lock_path)
            ) from exc
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            lock_path.unlink(missing_ok=True)

    # -- generic formats ------------------------------------------------------

    def write_jsonl(self, relative: str | Path, records: Iterable[BaseModel]) -> Path:
        target = self.claim(relative)
        lines = [r.model_dump_json(by_alias=True) for r in records]
        target.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        logger.debug("wrote %d records to %s", len(lines), target)
        return target

    def read_jsonl(self, relative: str | Path, model: type[M]) -> list[M]:
        text = self.require(relative).read_text(encoding="utf-8")
        return [model.model_validate_json(line) for line in text.splitlines() if line.strip()]

    def write_json(self, relative: str | Path, record: BaseModel) -> Path:
        target = self.claim(relative)
        target.write_text(record.model_dump_json(by_alias=True, indent=2) + "\n", encoding="utf-8")
        return target

    def read_json(self, relative: str | Path, model: type[M]) -> M:
        return model.model_validate_json(self.require(relative).read_text(encoding="utf-8"))

    def write_csv(self, relative: str | Path, frame: pd.DataFrame) -> Path:
        target = self.claim(relative)
        frame.to_csv(target, index=False, float_format="%.17g")
        return target

    def read_csv(self, relative: str | Path) -> pd.DataFrame:
        return pd.read_csv(self.require(relative), float_precision="round_trip")

    def write_text(self, relative: str | Path, text: str) -> Path:
        target = self.claim(relative)
        target.write_text(text, encoding="utf-8")
        return target

    # -- domain helpers -------------------------------------------------------

    def write_config(self, cfg: RunConfig, relative: str | Path = CONFIG_NAME) -> Path:
        """Echo the resolved config; re-echoing an identical config is allowed."""
        target = self.path(relative)
        text = cfg.model_dump_json(indent=2) + "\n"
        if target.exists() and target.read_text(encoding="utf-8") == text:
            return target
        target = self.claim(relative)
        target.write_text(text, encoding="utf-8")
        return target

    def read_config(self, overrides: list[str] | None = None) -> RunConfig:
        return load_run_config(self.require(CONFIG_NAME), overrides)

    def write_pairs(self, relative: str | Path, pairs: Iterable[HomologousPair]) -> Path:
        return self.write_jsonl(relative, pairs)

    def read_pairs(self, relative: str | Path) -> list[HomologousPair]:
        return self.read_jsonl(relative, HomologousPair)

    def save_checkpoint(
        self,
        relative_dir: str | Path,
        params: ModelParams,
        *,
        step: int = 0,
        optimizer_state: dict[str, object] | None = None,
    ) -> str:
        self.claim(Path(relative_dir) / "checkpoint.bin")
        digest = save_checkpoint(
            self.path(relative_dir), params, step=step, optimizer_state=optimizer_state
        )
        logger.info("checkpoint %s saved (sha256 %s)", self.path(relative_dir), digest[:12])
        return digest

    def load_checkpoint(self, relative_dir: str | Path) -> Checkpoint:
        self.require(Path(relative_dir) / "manifest.json")
        return load_checkpoint(self.path(relative_dir))
