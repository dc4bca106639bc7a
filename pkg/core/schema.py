"""
Canonical data contracts for the alignment pipeline.

All data flowing between stages (world -> pretrainer -> curator -> aligner ->
evaluator -> reporter) is strictly typed with Pydantic V2 models. Token
sequences are frozen ``RootModel`` tuples so they serialize as plain integer
arrays and can be compared and hashed directly.
"""

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, RootModel, field_validator, model_validator

from core.vocabulary import ColorName, ShapeName, decode_words

QAKind = Literal["presence", "count", "color", "shape", "relation"]
QA_KINDS: tuple[QAKind, ...] = ("presence", "count", "color", "shape", "relation")
Side = Literal["und", "gen"]


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)


# ---------------------------------------------------------------------------
# World
# ---------------------------------------------------------------------------


class SceneObject(_Frozen):
    shape: ShapeName
    color: ColorName
    row: int = Field(..., ge=0)
    col: int = Field(..., ge=0)

    @property
    def cell(self) -> tuple[int, int]:
        return (self.row, self.col)


class Scene(_Frozen):
    """Ground-truth world state: objects on a grid, stored in row-major order.

    Sampled scenes hold 1-3 objects; scenes parsed from generated grids may
    hold anything from zero objects to a full grid.
    """

    grid_size: int = Field(default=4, ge=2)
    objects: tuple[SceneObject, ...] = ()

    @field_validator("objects", mode="after")
    @classmethod
    def _row_major(cls, objects: tuple[SceneObject, ...]) -> tuple[SceneObject, ...]:
        return tuple(sorted(objects, key=lambda o: o.cell))

    @model_validator(mode="after")
    def _check_cells(self) -> "Scene":
        cells = [o.cell for o in self.objects]
        for row, col in cells:
            if row >= self.grid_size or col >= self.grid_size:
                raise ValueError(f"object at ({row},{col}) outside a {self.grid_size} grid")
        if len(set(cells)) != len(cells):
            raise ValueError("two objects share a cell")
        return self


class ImageTokens(RootModel[tuple[int, ...]]):
    """Row-major grid of local cell-state ids (length grid_size²)."""

    model_config = ConfigDict(frozen=True)


class Caption(RootModel[tuple[int, ...]]):
    """Local word ids of a caption (canonical grammar for reference captions)."""

    model_config = ConfigDict(frozen=True)

    def text(self) -> str:
        return decode_words(self.root)


class QAPair(_Frozen):
    question: tuple[int, ...] = Field(..., min_length=1, description="Local word ids.")
    answer: int = Field(..., description="Local word id from the closed answer vocabulary.")
    kind: QAKind


class HomologousPair(_Frozen):
    """Homologous input (x, y) sharing one scene, with its QA set."""

    pair_id: int = Field(..., ge=0)
    scene: Scene
    image: ImageTokens = Field(..., alias="image_tokens")
    caption: Caption = Field(..., alias="caption_tokens")
    qa: tuple[QAPair, ...]


# ---------------------------------------------------------------------------
# Curation
# ---------------------------------------------------------------------------


class Skip(_Frozen):
    """Marker for a candidate set that carries no usable preference."""

    side: Side
    reason: str


class UnderstandingPreference(_Frozen):
    image: ImageTokens
    y_w: Caption
    y_l: Caption
    s_w: float
    s_l: float
    candidates: tuple[Caption, ...] = ()
    scores: tuple[float, ...] = ()
    seed: int = 0


class GenerationPreference(_Frozen):
    caption: Caption
    x_w: ImageTokens
    x_l: ImageTokens
    acc_w: float
    acc_l: float
    candidates: tuple[ImageTokens, ...] = ()
    accuracies: tuple[float, ...] = ()
    seed: int = 0


class HomologousPreferenceTuple(_Frozen):
    """One Pair-DPO training record (x, y, x_w, x_l, y_w, y_l) plus provenance."""

    pair_id: int
    x: ImageTokens
    y: Caption
    x_w: ImageTokens
    x_l: ImageTokens
    y_w: Caption
    y_l: Caption
    s_w: float = Field(..., description="similarity(y_w, y)")
    s_l: float = Field(..., description="similarity(y_l, y)")
    acc_w: float = Field(..., description="self-VQA accuracy of x_w")
    acc_l: float = Field(..., description="self-VQA accuracy of x_l")
    seed: int
    round_index: int = Field(default=0, ge=0)
    und_candidates: tuple[Caption, ...] = ()
    und_scores: tuple[float, ...] = ()
    gen_candidates: tuple[ImageTokens, ...] = ()
    gen_accuracies: tuple[float, ...] = ()


class RetainedPreference(_Frozen):
    """Per-pair state carried from round i-1 into round i of self-play."""

    pair_id: int
    y_w: Caption
    y_l: Caption
    s_w: float
    x_w: ImageTokens
    x_l: ImageTokens
    acc_w: float


# ---------------------------------------------------------------------------
# Training logs
# ---------------------------------------------------------------------------


class PretrainLogRecord(_Frozen):
    step: int
    loss: float
    grad_norm: float
    learning_rate: float


class TrainLogRecord(_Frozen):
    """One alignment step: loss, mean deltas, implicit rewards and gradient norm."""

    step: int
    loss: float
    delta_und: float
    delta_gen: float
    reward_chosen_und: float
    reward_rejected_und: float
    reward_chosen_gen: float
    reward_rejected_gen: float
    preference_accuracy: float = Field(..., description="Fraction of active deltas > 0.")
    grad_norm: float
    learning_rate: float


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class QuestionOutcome(_Frozen):
    pair_id: int
    question_index: int
    kind: QAKind
    und_correct: bool
    gen_correct: bool


class KindScore(_Frozen):
    total: int = 0
    und_correct: int = 0
    gen_correct: int = 0


class GapReport(_Frozen):
    """Understanding score, generation score and their gap (one table row).

    Both scores are means of per-question {0,1} indicators; ``outcomes``
    keeps every indicator so the scores can be recomputed exactly.
    """

    label: str = ""
    understanding_score: float = Field(..., ge=0.0, le=1.0)
    generation_score: float = Field(..., ge=0.0, le=1.0)
    gap: float
    n_pairs: int
    n_questions: int
    seed: int
    temperature: float
    checkpoint_hash: str = ""
    breakdown: dict[str, KindScore] = Field(default_factory=dict)
    outcomes: tuple[QuestionOutcome, ...] = ()

    @model_validator(mode="after")
    def _gap_is_difference(self) -> "GapReport":
        if self.gap != self.understanding_score - self.generation_score:
            raise ValueError("gap must equal understanding_score - generation_score exactly")
        return self


class RoundResult(_Frozen):
    round_index: int
    tuples: int
    skipped: dict[str, int] = Field(default_factory=dict)
    checkpoint_hash: str
    report: GapReport


class AblationRow(_Frozen):
    mode: str
    n: int
    round: int
    und: float
    gen: float
    gap: float
    tuples: int = 0
    note: str = ""
