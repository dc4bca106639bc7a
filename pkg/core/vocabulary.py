"""
Canonical token taxonomy for the toy bimodal world and the unified model.

This module is the single source of truth for every token id. The world
(``core.world``) speaks in *local* ids: cell states 0..12 for image grids and
word ids 0..W-1 for captions and questions. The unified model uses one joint
vocabulary laid out as [specials | cell states | words]; the image block and
the word block are each contiguous so decoding can be constrained per segment.
This module depends on nothing else in the package.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Literal

# ---------------------------------------------------------------------------
# 1. World attributes and cell states
# ---------------------------------------------------------------------------

ShapeName = Literal["circle", "square", "triangle"]
ColorName = Literal["red", "green", "blue", "yellow"]

SHAPES: tuple[ShapeName, ...] = ("circle", "square", "triangle")
COLORS: tuple[ColorName, ...] = ("red", "green", "blue", "yellow")

CELL_EMPTY = 0
N_CELL_STATES = 1 + len(SHAPES) * len(COLORS)


def cell_state(shape: str, color: str) -> int:
    """Local cell-state id of an occupied cell (shape-major, then color)."""
    return 1 + SHAPES.index(shape) * len(COLORS) + COLORS.index(color)  # type: ignore[arg-type]


def cell_attributes(state: int) -> tuple[ShapeName, ColorName] | None:
    """Inverse of :func:`cell_state`; ``None`` for the empty cell."""
    if state == CELL_EMPTY:
        return None
    if not 0 < state < N_CELL_STATES:
        raise ValueError(f"cell state {state} outside 0..{N_CELL_STATES - 1}")
    shape_idx, color_idx = divmod(state - 1, len(COLORS))
    return SHAPES[shape_idx], COLORS[color_idx]


# ---------------------------------------------------------------------------
# 2. Closed word vocabulary (captions, questions, answers)
# ---------------------------------------------------------------------------

DIGITS: tuple[str, ...] = tuple(str(i) for i in range(10))
MAX_GRID_SIZE = len(DIGITS)

FUNCTION_WORDS: tuple[str, ...] = (
    "a", "at", "row", "col", "and",
    "is", "there", "how", "many", "objects", "are", "what", "color", "shape",
    "the", "object", "of", "left", "right", "above", "below",
    "yes", "no", "?",
)  # fmt: skip

WORDS: tuple[str, ...] = FUNCTION_WORDS + COLORS + SHAPES + DIGITS
_WORD_INDEX = {w: i for i, w in enumerate(WORDS)}

ANSWER_WORDS: tuple[str, ...] = ("yes", "no", "0", "1", "2", "3") + COLORS + SHAPES


def word_id(word: str) -> int:
    """Local id of a word; KeyError for out-of-vocabulary words."""
    return _WORD_INDEX[word]


def encode_words(text: str | Iterable[str]) -> tuple[int, ...]:
    """Encode whitespace-separated text (or a word iterable) to local word ids."""
    words = text.split() if isinstance(text, str) else list(text)
    return tuple(_WORD_INDEX[w] for w in words)


def decode_words(ids: Sequence[int]) -> str:
    """Decode local word ids to a space-joined string."""
    return " ".join(WORDS[i] for i in ids)


ANSWER_IDS: frozenset[int] = frozenset(word_id(w) for w in ANSWER_WORDS)


# ---------------------------------------------------------------------------
# 3. Joint model vocabulary
# ---------------------------------------------------------------------------

SPECIALS: tuple[str, ...] = ("PAD", "BOS", "EOS", "SEP", "TASK_UND", "TASK_GEN", "TASK_VQA")


@dataclass(frozen=True)
class Vocabulary:
    """Joint id space: specials, then the cell-state block, then the word block."""

    n_specials: int = len(SPECIALS)
    n_cells: int = N_CELL_STATES
    n_words: int = len(WORDS)

    @property
    def size(self) -> int:
        return self.n_specials + self.n_cells + self.n_words

    @property
    def cell_offset(self) -> int:
        return self.n_specials

    @property
    def word_offset(self) -> int:
        return self.n_specials + self.n_cells

    def special(self, name: str) -> int:
        return SPECIALS.index(name)

    @property
    def pad(self) -> int:
        return self.special("PAD")

    @property
    def bos(self) -> int:
        return self.special("BOS")

    @property
    def eos(self) -> int:
        return self.special("EOS")

    @property
    def sep(self) -> int:
        return self.special("SEP")

    def image_ids(self) -> range:
        return range(self.cell_offset, self.cell_offset + self.n_cells)

    def word_ids(self) -> range:
        return range(self.word_offset, self.word_offset + self.n_words)

    def answer_ids(self) -> list[int]:
        return sorted(self.word_offset + i for i in ANSWER_IDS)

    def from_cells(self, cells: Sequence[int]) -> list[int]:
        return [self.cell_offset + c for c in cells]

    def to_cells(self, ids: Sequence[int]) -> tuple[int, ...]:
        return tuple(i - self.cell_offset for i in ids)

    def from_words(self, words: Sequence[int]) -> list[int]:
        return [self.word_offset + w for w in words]

    def to_words(self, ids: Sequence[int]) -> tuple[int, ...]:
        return tuple(i - self.word_offset for i in ids)

    def token_name(self, token: int) -> str:
        """Human-readable name of a joint id (for logs and reports)."""
        if token < self.cell_offset:
            return SPECIALS[token]
        if token < self.word_offset:
            attrs = cell_attributes(token - self.cell_offset)
            return "<empty>" if attrs is None else f"<{attrs[1]}-{attrs[0]}>"
        return WORDS[token - self.word_offset]


VOCAB = Vocabulary()
