"""Token taxonomy: block layout of the joint vocabulary and local/joint conversions."""

import pytest

from core.vocabulary import (
    ANSWER_WORDS,
    COLORS,
    N_CELL_STATES,
    SHAPES,
    VOCAB,
    WORDS,
    cell_attributes,
    cell_state,
    decode_words,
    encode_words,
)


def test_joint_vocabulary_layout() -> None:
    assert N_CELL_STATES == 13
    assert len(WORDS) == 41
    assert VOCAB.size == 61
    assert (VOCAB.pad, VOCAB.bos, VOCAB.eos, VOCAB.sep) == (0, 1, 2, 3)
    assert VOCAB.cell_offset == 7 and VOCAB.word_offset == 20
    assert list(VOCAB.image_ids()) == list(range(7, 20))
    assert VOCAB.word_ids()[-1] == 60


def test_cell_states_are_shape_major() -> None:
    assert cell_state("circle", "red") == 1
    assert cell_state("square", "red") == 1 + len(COLORS)
    for shape in SHAPES:
        for color in COLORS:
            assert cell_attributes(cell_state(shape, color)) == (shape, color)
    assert cell_attributes(0) is None
    with pytest.raises(ValueError):
        cell_attributes(N_CELL_STATES)


def test_word_encoding() -> None:
    ids = encode_words("is there a red circle ?")
    assert decode_words(ids) == "is there a red circle ?"
    with pytest.raises(KeyError):
        encode_words("is there a purple circle ?")


def test_answers_are_words() -> None:
    assert len(VOCAB.answer_ids()) == len(ANSWER_WORDS) == 13
    assert all(VOCAB.token_name(t) in ANSWER_WORDS for t in VOCAB.answer_ids())


def test_local_and_joint_ids_convert_both_ways() -> None:
    cells = (0, 5, 12)
    assert VOCAB.to_cells(VOCAB.from_cells(cells)) == cells
    words = encode_words("how many objects are there ?")
    assert VOCAB.to_words(VOCAB.from_words(words)) == words
    assert VOCAB.token_name(VOCAB.cell_offset + cell_state("triangle", "blue")) == "<blue-triangle>"
    assert VOCAB.token_name(VOCAB.cell_offset) == "<empty>"
    assert VOCAB.token_name(VOCAB.special("TASK_VQA")) == "TASK_VQA"
