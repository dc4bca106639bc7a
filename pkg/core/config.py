"""
Configuration loader with validation.

Process-level settings (output root, log level, worker count) come from the
environment via pydantic-settings. Experiment configuration is a tree of
pydantic models aggregated in ``RunConfig``; it is read from a TOML file
(``key = value`` lines under ``[section]`` headers) or from the ``config.json``
echoed into every run directory, then patched with ``section.key=value``
overrides from the command line.
"""

import hashlib
import json
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - Python 3.10 fallback
    import tomli as tomllib
from functools import lru_cache
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from core.vocabulary import MAX_GRID_SIZE, VOCAB


class Settings(BaseSettings):
    """Process settings loaded from environment (prefix ``GAPFLOW_``, e.g. .env)."""

    model_config = SettingsConfigDict(
        env_prefix="GAPFLOW_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    OUTPUT_ROOT: Path = Field(default=Path("runs"), description="Default root for run directories.")
    LOG_LEVEL: str = Field(default="INFO", description="Root logger level for the CLI.")
    WORKERS: int = Field(default=1, ge=1, description="Default worker threads for per-pair maps.")


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Load and return validated process settings (singleton)."""
    return Settings()


# ---------------------------------------------------------------------------
# Module configs
# ---------------------------------------------------------------------------


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WorldConfig(_Section):
    grid_size: int = Field(default=4, ge=2, le=MAX_GRID_SIZE, description="Grid side length.")
    min_objects: int = Field(default=1, ge=1)
    max_objects: int = Field(default=3, ge=1)
    questions_per_pair: int = Field(default=6, ge=1, description="q: QA pairs generated per scene.")
    train_pairs: int = Field(default=2000, ge=1, description="Homologous pairs for training.")
    eval_pairs: int = Field(default=500, ge=1, description="Held-out pairs for gap evaluation.")

    @model_validator(mode="after")
    def _objects_fit(self) -> "WorldConfig":
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects must not exceed max_objects")
        if self.max_objects > self.grid_size**2:
            raise ValueError("max_objects cannot exceed the number of grid cells")
        return self

    @property
    def image_length(self) -> int:
        return self.grid_size**2

    @property
    def max_caption_length(self) -> int:
        # "a <color> <shape> at row <r> col <c>" per object, "and" between objects.
        return 7 * self.max_objects + (self.max_objects - 1)


class ModelConfig(_Section):
    d_model: int = Field(default=64, ge=2)
    n_layers: int = Field(default=2, ge=1)
    n_heads: int = Field(default=2, ge=1)
    context: int = Field(default=64, ge=4, description="L_max: maximum sequence length.")
    mlp_ratio: int = Field(default=4, ge=1)
    tie_embeddings: bool = Field(default=False, description="Reuse the token embedding as head.")
    init_std: float = Field(default=0.02, gt=0)
    init_seed: int = 0
    max_caption_tokens: int = Field(default=24, ge=1, description="Decode budget for captions.")

    @model_validator(mode="after")
    def _heads_divide(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        return self

    @property
    def vocab_size(self) -> int:
        return VOCAB.size

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class PretrainConfig(_Section):
    steps: int = Field(default=3000, ge=0)
    batch_size: int = Field(default=16, ge=1)
    learning_rate: float = Field(default=3e-3, ge=0)
    weight_decay: float = Field(default=0.01, ge=0)
    warmup_steps: int = Field(default=100, ge=0)
    cosine: bool = True
    grad_clip: float | None = Field(default=1.0, gt=0)
    task_mix: tuple[float, float, float] = Field(
        default=(1.0, 1.0, 1.0), description="Sampling weights for UND, GEN, VQA examples."
    )
    seed: int = 0
    log_every: int = Field(default=100, ge=1)


class CurationConfig(_Section):
    n: int = Field(default=4, ge=2, description="Candidates sampled per side.")
    q: int = Field(default=6, ge=1, description="Questions per pair used for self-VQA.")
    gen_accuracy_threshold: float = Field(default=0.6, gt=0, lt=1)
    temperature: float = Field(default=1.0, ge=0)
    seed: int = 0
    workers: int | None = Field(default=None, ge=1, description="None: use GAPFLOW_WORKERS.")
    max_pairs: int | None = Field(default=None, ge=1, description="Curate only the first k pairs.")


class AlignmentConfig(_Section):
    beta: float = Field(default=0.2, gt=0)
    form: Literal["sum", "product"] = "sum"
    mode: Literal["pair", "und_only", "gen_only"] = "pair"
    learning_rate: float = Field(default=2e-4, ge=0)
    steps: int = Field(default=600, ge=1)
    batch_size: int = Field(default=4, ge=1)
    weight_decay: float = Field(default=0.01, ge=0)
    cosine: bool = True
    warmup_steps: int = Field(default=0, ge=0)
    grad_clip: float | None = Field(default=None, gt=0)
    seed: int = 0
    log_every: int = Field(default=50, ge=1)


class SelfPlayConfig(_Section):
    rounds: int = Field(default=3, ge=1)
    refresh_reference: bool = Field(
        default=True, description="Round i's reference is round i-1's final params."
    )


class EvalConfig(_Section):
    temperature: float = Field(default=1.0, ge=0, description="Sampling temperature for images.")
    seed: int = 1234


class AblationConfig(_Section):
    n_values: tuple[int, ...] = (1, 2, 4, 6, 8)
    iterations: int = Field(default=3, ge=1)


# section -> seed field that follows the run seed unless set explicitly
DERIVED_SEEDS = {
    "model": "init_seed",
    "pretrain": "seed",
    "curation": "seed",
    "alignment": "seed",
}


class RunConfig(_Section):
    """Everything needed to reproduce a run, plus its name and location."""

    run_name: str = "default"
    output_dir: Path | None = Field(default=None, description="None: OUTPUT_ROOT/run_name.")
    seed: int = 0
    world: WorldConfig = Field(default_factory=WorldConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    curation: CurationConfig = Field(default_factory=CurationConfig)
    alignment: AlignmentConfig = Field(default_factory=AlignmentConfig)
    self_play: SelfPlayConfig = Field(default_factory=SelfPlayConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)

    @model_validator(mode="before")
    @classmethod
    def _derive_section_seeds(cls, data: Any) -> Any:
        if not isinstance(data, dict) or not isinstance(data.get("seed", 0), int):
            return data
        run_seed = data.get("seed", 0)
        patched = dict(data)
        for section, key in DERIVED_SEEDS.items():
            value = patched.get(section, {})
            derived = derive_seed(run_seed, section)
            if isinstance(value, BaseModel):
                if key not in value.model_fields_set:
                    patched[section] = value.model_copy(update={key: derived})
            elif isinstance(value, dict) and key not in value:
                patched[section] = {**value, key: derived}
        return patched

    @model_validator(mode="after")
    def _layouts_fit_context(self) -> "RunConfig":
        image = self.world.image_length
        caption = max(self.world.max_caption_length, self.model.max_caption_tokens)
        longest = 2 + max(image + 1 + caption, caption + 1 + image) + 1
        if longest > self.model.context:
            raise ValueError(
                f"model.context={self.model.context} is shorter than the longest layout ({longest})"
            )
        return self

    def resolved_output_dir(self) -> Path:
        return self.output_dir or get_settings().OUTPUT_ROOT / self.run_name


# ---------------------------------------------------------------------------
# Loading and overrides
# ---------------------------------------------------------------------------


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` overrides (values parsed as JSON, else string)."""
    patched = json.loads(json.dumps(data, default=str))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = patched
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = _parse_value(raw.strip())
    return patched


def load_run_config(path: Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Read a TOML or JSON config (or defaults), apply overrides, and validate."""
    data: dict[str, Any] = {}
    if path is not None:
        if path.suffix == ".json":
            data = json.loads(path.read_text(encoding="utf-8"))
        else:
            with path.open("rb") as fh:
                data = tomllib.load(fh)
    return RunConfig.model_validate(apply_overrides(data, overrides or []))


def derive_seed(*keys: int | str) -> int:
    """Stable 32-bit seed from a tuple of ints/strings (SeedSequence spawn keys)."""
    ints = [
        k & 0xFFFFFFFF
        if isinstance(k, int)
        else int.from_bytes(hashlib.sha256(k.encode()).digest()[:4], "little")
        for k in keys
    ]
    root, *spawn = ints or [0]
    return int(np.random.SeedSequence(root, spawn_key=tuple(spawn)).generate_state(1)[0])
