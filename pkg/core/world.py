"""
Deterministic synthetic bimodal world.

A ``Scene`` (objects on a grid) is the semantic root of every homologous
pair: ``render`` turns it into an image token grid, ``describe`` into its
canonical caption, and ``generate_qa`` into question/answer pairs whose
answers come from ``oracle_answer``, the exact judge. Every function is a
pure function of its inputs and seed.

Question grammar (local word ids, always ending with "?"):

    presence  is there a <color> <shape> ?
    count     how many <color|shape> objects are there ?
    color     what color is the object at row <r> col <c> ?
    shape     what shape is the object at row <r> col <c> ?
    relation  is the <color> <shape> <left of|right of|above|below> the <color> <shape> ?
"""

from collections.abc import Callable, Sequence

import numpy as np

from core.config import WorldConfig, derive_seed
from core.errors import MalformedImageError, QuestionGrammarError
from core.schema import Caption, HomologousPair, ImageTokens, QAKind, QAPair, Scene, SceneObject
from core.vocabulary import (
    CELL_EMPTY,
    COLORS,
    N_CELL_STATES,
    SHAPES,
    WORDS,
    cell_attributes,
    cell_state,
    encode_words,
    word_id,
)

RELATIONS: dict[str, Callable[[SceneObject, SceneObject], bool]] = {
    "left of": lambda a, b: a.col < b.col,
    "right of": lambda a, b: a.col > b.col,
    "above": lambda a, b: a.row < b.row,
    "below": lambda a, b: a.row > b.row,
}

# Fixed slot order: with q >= 4 the first four slots cover presence (absent
# object, answer "no"), count, color and relation.
_QA_SCHEDULE: tuple[str, ...] = (
    "presence_absent", "count", "color", "relation", "presence_present", "shape",
)  # fmt: skip


# ---------------------------------------------------------------------------
# Scenes and images
# ---------------------------------------------------------------------------


def sample_scene(rng_seed: int, cfg: WorldConfig | None = None) -> Scene:
    """Uniform object count, then uniform cells (no collisions) and attributes."""
    cfg = cfg or WorldConfig()
    rng = np.random.default_rng(rng_seed)
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    cells = rng.choice(cfg.grid_size**2, size=count, replace=False)
    objects = []
    for cell in cells:
        row, col = divmod(int(cell), cfg.grid_size)
        objects.append(
            SceneObject(
                shape=SHAPES[int(rng.integers(len(SHAPES)))],
                color=COLORS[int(rng.integers(len(COLORS)))],
                row=row,
                col=col,
            )
        )
    return Scene(grid_size=cfg.grid_size, objects=tuple(objects))


def render(scene: Scene) -> ImageTokens:
    """Row-major cell-state grid of a scene."""
    grid = [CELL_EMPTY] * scene.grid_size**2
    for obj in scene.objects:
        grid[obj.row * scene.grid_size + obj.col] = cell_state(obj.shape, obj.color)
    return ImageTokens(tuple(grid))


def parse(image: ImageTokens, grid_size: int = 4) -> Scene:
    """Inverse of :func:`render`; rejects malformed grids."""
    tokens = image.root
    if len(tokens) != grid_size**2:
        raise MalformedImageError(
            f"image has {len(tokens)} tokens, expected {grid_size**2}",
            length=len(tokens),
            grid_size=grid_size,
        )
    objects = []
    for index, state in enumerate(tokens):
        if not 0 <= state < N_CELL_STATES:
            raise MalformedImageError(f"cell {index} holds out-of-vocabulary id {state}", id=state)
        attrs = cell_attributes(state)
        if attrs is not None:
            row, col = divmod(index, grid_size)
            objects.append(SceneObject(shape=attrs[0], color=attrs[1], row=row, col=col))
    return Scene(grid_size=grid_size, objects=tuple(objects))


def describe(scene: Scene) -> Caption:
    """Canonical caption: one clause per object in row-major order, joined by "and"."""
    clauses = [f"a {o.color} {o.shape} at row {o.row} col {o.col}" for o in scene.objects]
    return Caption(encode_words(" and ".join(clauses)))


def ascii_grid(scene: Scene) -> str:
    """Two-character cells (color initial + shape initial), ".." for empty."""
    cells = [[".."] * scene.grid_size for _ in range(scene.grid_size)]
    for obj in scene.objects:
        cells[obj.row][obj.col] = obj.color[0] + obj.shape[0]
    return "\n".join(" ".join(row) for row in cells)


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------


def _matches(obj: SceneObject, attribute: str) -> bool:
    return obj.color == attribute or obj.shape == attribute


def _object_at(scene: Scene, row: int, col: int) -> SceneObject | None:
    return next((o for o in scene.objects if o.row == row and o.col == col), None)


def _parse_cell(words: Sequence[str], grid_size: int) -> tuple[int, int]:
    if words[0] != "row" or words[2] != "col":
        raise QuestionGrammarError(f"expected 'row <r> col <c>', got {' '.join(words)!r}")
    try:
        row, col = int(words[1]), int(words[3])
    except ValueError as exc:
        raise QuestionGrammarError(f"non-numeric coordinates in {' '.join(words)!r}") from exc
    if not (0 <= row < grid_size and 0 <= col < grid_size):
        raise QuestionGrammarError(f"coordinates ({row},{col}) outside the grid")
    return row, col


def _parse_object(words: Sequence[str]) -> tuple[str, str]:
    if len(words) != 2:
        raise QuestionGrammarError(f"expected '<color> <shape>', got {' '.join(words)!r}")
    color, shape = words
    if color not in COLORS or shape not in SHAPES:
        raise QuestionGrammarError(f"expected '<color> <shape>', got {color!r} {shape!r}")
    return color, shape


def question_kind(question: Sequence[int]) -> QAKind:
    """Classify a question by its leading words (grammar check included)."""
    words = [WORDS[i] for i in question]
    if words[:3] == ["is", "there", "a"]:
        return "presence"
    if words[:2] == ["how", "many"]:
        return "count"
    if words[:2] == ["what", "color"]:
        return "color"
    if words[:2] == ["what", "shape"]:
        return "shape"
    if words[:2] == ["is", "the"]:
        return "relation"
    raise QuestionGrammarError(f"unrecognized question {' '.join(words)!r}")


def oracle_answer(scene: Scene, question: Sequence[int]) -> int:
    """Ground-truth answer (local word id) computed from the scene structure.

    Absent referents answer "no"; counts saturate at 9.
    """
    try:
        words = [WORDS[i] for i in question]
    except IndexError as exc:
        raise QuestionGrammarError("question holds out-of-vocabulary ids") from exc
    if not words or words[-1] != "?":
        raise QuestionGrammarError(f"question must end with '?': {' '.join(words)!r}")
    body = words[:-1]
    kind = question_kind(question)
    yes, no = word_id("yes"), word_id("no")

    if kind == "presence":
        if len(body) != 5:
            raise QuestionGrammarError(f"malformed presence question {' '.join(words)!r}")
        color, shape = _parse_object(body[3:5])
        found = any(o.color == color and o.shape == shape for o in scene.objects)
        return yes if found else no

    if kind == "count":
        if len(body) != 6 or body[3:] != ["objects", "are", "there"]:
            raise QuestionGrammarError(f"malformed count question {' '.join(words)!r}")
        attribute = body[2]
        if attribute not in COLORS and attribute not in SHAPES:
            raise QuestionGrammarError(f"unknown attribute {attribute!r}")
        count = sum(1 for o in scene.objects if _matches(o, attribute))
        return word_id(str(min(count, 9)))

    if kind in ("color", "shape"):
        if len(body) != 10 or body[2:6] != ["is", "the", "object", "at"]:
            raise QuestionGrammarError(f"malformed attribute question {' '.join(words)!r}")
        row, col = _parse_cell(body[6:10], scene.grid_size)
        obj = _object_at(scene, row, col)
        if obj is None:
            return no
        return word_id(obj.color if kind == "color" else obj.shape)

    # relation: is the <c1> <s1> <rel...> the <c2> <s2>
    if len(body) < 7:
        raise QuestionGrammarError(f"malformed relation question {' '.join(words)!r}")
    first = _parse_object(body[2:4])
    try:
        the_index = body.index("the", 4)
    except ValueError as exc:
        raise QuestionGrammarError(f"malformed relation question {' '.join(words)!r}") from exc
    relation = " ".join(body[4:the_index])
    if relation not in RELATIONS or len(body) != the_index + 3:
        raise QuestionGrammarError(f"malformed relation question {' '.join(words)!r}")
    second = _parse_object(body[the_index + 1 : the_index + 3])
    holds = RELATIONS[relation]
    for a in scene.objects:
        if (a.color, a.shape) != first:
            continue
        for b in scene.objects:
            if b is not a and (b.color, b.shape) == second and holds(a, b):
                return yes
    return no


# ---------------------------------------------------------------------------
# Question generation
# ---------------------------------------------------------------------------


def _absent_object(scene: Scene, rng: np.random.Generator) -> tuple[str, str]:
    present = {(o.color, o.shape) for o in scene.objects}
    absent = [(c, s) for c in COLORS for s in SHAPES if (c, s) not in present]
    return absent[int(rng.integers(len(absent)))]


def _draw_question(slot: str, scene: Scene, rng: np.random.Generator) -> str:
    objects = scene.objects
    if slot == "presence_absent":
        color, shape = _absent_object(scene, rng)
        return f"is there a {color} {shape} ?"
    if slot == "presence_present":
        obj = objects[int(rng.integers(len(objects)))]
        return f"is there a {obj.color} {obj.shape} ?"
    if slot == "count":
        pool = COLORS + SHAPES
        return f"how many {pool[int(rng.integers(len(pool)))]} objects are there ?"
    if slot in ("color", "shape"):
        obj = objects[int(rng.integers(len(objects)))]
        return f"what {slot} is the object at row {obj.row} col {obj.col} ?"
    # relation: two distinct objects when possible, else the object and a distractor
    relation = list(RELATIONS)[int(rng.integers(len(RELATIONS)))]
    if len(objects) >= 2:
        i, j = rng.choice(len(objects), size=2, replace=False)
        a, b = objects[int(i)], objects[int(j)]
        first, second = (a.color, a.shape), (b.color, b.shape)
    else:
        first = (objects[0].color, objects[0].shape)
        second = _absent_object(scene, rng)
        if rng.integers(2):
            first, second = second, first
    return f"is the {first[0]} {first[1]} {relation} the {second[0]} {second[1]} ?"


def generate_qa(scene: Scene, q: int, rng_seed: int) -> list[QAPair]:
    """``q`` oracle-answered questions cycling through the kind schedule.

    With q >= 4 the set always covers presence, count, color and relation and
    contains a presence question about an absent object (answer "no").
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    if not scene.objects:
        raise ValueError("cannot generate questions for an empty scene")
    rng = np.random.default_rng(rng_seed)
    seen: set[str] = set()
    pairs: list[QAPair] = []
    for index in range(q):
        slot = _QA_SCHEDULE[index % len(_QA_SCHEDULE)]
        text = _draw_question(slot, scene, rng)
        for _ in range(8):
            if text not in seen:
                break
            text = _draw_question(slot, scene, rng)
        seen.add(text)
        question = encode_words(text)
        pairs.append(
            QAPair(
                question=question,
                answer=oracle_answer(scene, question),
                kind=question_kind(question),
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# Homologous pairs
# ---------------------------------------------------------------------------


def make_pair(pair_id: int, scene: Scene, q: int, qa_seed: int) -> HomologousPair:
    return HomologousPair(
        pair_id=pair_id,
        scene=scene,
        image=render(scene),
        caption=describe(scene),
        qa=tuple(generate_qa(scene, q, qa_seed)),
    )


def build_pairs(
    count: int,
    cfg: WorldConfig,
    seed: int,
    *,
    namespace: str = "train",
    start_id: int = 0,
    exclude: set[Scene] | None = None,
) -> list[HomologousPair]:
    """``count`` homologous pairs; scenes listed in ``exclude`` are resampled."""
    pairs: list[HomologousPair] = []
    draw = 0
    while len(pairs) < count:
        scene = sample_scene(derive_seed(seed, namespace, "scene", draw), cfg)
        qa_seed = derive_seed(seed, namespace, "qa", draw)
        draw += 1
        if exclude is not None and scene in exclude:
            continue
        pairs.append(make_pair(start_id + len(pairs), scene, cfg.questions_per_pair, qa_seed))
    return pairs


def build_splits(cfg: WorldConfig, seed: int) -> tuple[list[HomologousPair], list[HomologousPair]]:
    """Training pairs and a held-out evaluation split with no shared scene."""
    train = build_pairs(cfg.train_pairs, cfg, seed, namespace="train")
    held_out = build_pairs(
        cfg.eval_pairs,
        cfg,
        seed,
        namespace="eval",
        start_id=cfg.train_pairs,
        exclude={p.scene for p in train},
    )
    return train, held_out
