"""Constrained decoding: every emitted token stays inside its modality block."""

import numpy as np
import pytest

from core.model import ModelParams
from core.sampling import (
    ANSWER_MASK,
    CAPTION_MASK,
    IMAGE_MASK,
    WORD_MASK,
    answer_batch,
    choose_tokens,
    model_answer,
    sample_captions,
    sample_images,
)
from core.schema import HomologousPair
from core.vocabulary import ANSWER_WORDS, N_CELL_STATES, VOCAB, WORDS, word_id


def test_masks_partition_the_vocabulary() -> None:
    assert not (WORD_MASK & IMAGE_MASK).any()
    assert CAPTION_MASK[VOCAB.eos] and not WORD_MASK[VOCAB.eos]
    assert IMAGE_MASK.sum() == N_CELL_STATES
    assert WORD_MASK.sum() == len(WORDS)
    assert ANSWER_MASK.sum() == len(ANSWER_WORDS)
    assert not (ANSWER_MASK & ~WORD_MASK).any()


def test_greedy_picks_best_allowed_token() -> None:
    logits = np.zeros((2, VOCAB.size))
    logits[:, 0] = 50.0  # PAD scores highest but is never allowed
    logits[0, VOCAB.word_offset + 3] = 2.0
    picks = choose_tokens(logits, WORD_MASK, 0.0)
    assert picks[0] == VOCAB.word_offset + 3
    # ties resolve to the lowest allowed id
    assert picks[1] == VOCAB.word_offset


def test_sampling_never_leaves_the_mask() -> None:
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(500, VOCAB.size)) * 5
    picks = choose_tokens(logits, IMAGE_MASK, 1.3, rng)
    assert IMAGE_MASK[picks].all()


def test_positive_temperature_needs_a_generator() -> None:
    with pytest.raises(ValueError, match="generator"):
        choose_tokens(np.zeros((1, VOCAB.size)), WORD_MASK, 1.0)


def test_captions_are_nonempty_and_bounded(
    tiny_params: ModelParams, train_pairs: list[HomologousPair]
) -> None:
    captions = sample_captions(tiny_params, train_pairs[0].image, n=8, temperature=1.0, rng_seed=5)
    assert len(captions) == 8
    for caption in captions:
        assert 1 <= len(caption.root) <= tiny_params.config.max_caption_tokens
        assert all(0 <= w < len(WORDS) for w in caption.root)


def test_images_have_exactly_one_token_per_cell(
    tiny_params: ModelParams, train_pairs: list[HomologousPair]
) -> None:
    images = sample_images(
        tiny_params, train_pairs[0].caption, n=4, temperature=1.0, rng_seed=5, grid_size=3
    )
    for image in images:
        assert len(image.root) == 9
        assert all(0 <= c < N_CELL_STATES for c in image.root)


def test_sampling_is_seed_deterministic(
    tiny_params: ModelParams, train_pairs: list[HomologousPair]
) -> None:
    pair = train_pairs[1]
    first = sample_captions(tiny_params, pair.image, 3, 1.0, rng_seed=9)
    again = sample_captions(tiny_params, pair.image, 3, 1.0, rng_seed=9)
    assert first == again
    images = sample_images(tiny_params, pair.caption, 3, 1.0, rng_seed=9, grid_size=3)
    assert images == sample_images(tiny_params, pair.caption, 3, 1.0, rng_seed=9, grid_size=3)


def test_greedy_decoding_ignores_the_seed(
    tiny_params: ModelParams, train_pairs: list[HomologousPair]
) -> None:
    image = train_pairs[2].image
    assert sample_captions(tiny_params, image, 2, 0.0, rng_seed=1) == sample_captions(
        tiny_params, image, 2, 0.0, rng_seed=2
    )


def test_nonpositive_candidate_count_is_rejected(
    tiny_params: ModelParams, train_pairs: list[HomologousPair]
) -> None:
    with pytest.raises(ValueError):
        sample_captions(tiny_params, train_pairs[0].image, 0, 1.0, 0)


def test_answers_come_from_the_answer_vocabulary(
    tiny_params: ModelParams, train_pairs: list[HomologousPair]
) -> None:
    allowed = {word_id(w) for w in ANSWER_WORDS}
    items = [(p.image, qa.question) for p in train_pairs for qa in p.qa]
    answers = answer_batch(tiny_params, items)
    assert len(answers) == len(items)
    assert set(answers) <= allowed
    image, question = items[0]
    assert model_answer(tiny_params, image, question) == answers[0]
