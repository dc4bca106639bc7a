"""
Constrained ancestral decoding for the three task layouts.

Each response slot may only emit tokens from its modality block: captions
draw from the word block (plus EOS), images from the cell-state block, and
VQA answers from the closed answer vocabulary. Temperature 0 means greedy
decoding with ties broken towards the lowest id.
"""

from collections.abc import Sequence

import numpy as np
from numpy.typing import NDArray

from core.model import Weights, forward_batch, gen_prompt, pad_batch, und_prompt, vqa_prompt
from core.schema import Caption, ImageTokens
from core.tensor import no_grad
from core.vocabulary import VOCAB

ANSWER_CHUNK = 64


def _mask(ids: Sequence[int] | range) -> NDArray[np.bool_]:
    allowed = np.zeros(VOCAB.size, dtype=bool)
    allowed[list(ids)] = True
    return allowed


WORD_MASK = _mask(VOCAB.word_ids())
CAPTION_MASK = _mask([*VOCAB.word_ids(), VOCAB.eos])
IMAGE_MASK = _mask(VOCAB.image_ids())
ANSWER_MASK = _mask(VOCAB.answer_ids())


def choose_tokens(
    logits: NDArray[np.float64],
    allowed: NDArray[np.bool_],
    temperature: float,
    rng: np.random.Generator | None = None,
) -> NDArray[np.int64]:
    """Pick one id per row of ``logits`` [B, V] among ``allowed`` ids."""
    masked = np.where(allowed, logits, -np.inf)
    if temperature == 0:
        return masked.argmax(axis=-1)
    if rng is None:
        raise ValueError("sampling with temperature > 0 needs a generator")
    scaled = masked / temperature
    probs = np.exp(scaled - scaled.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    draws = rng.random(len(probs))[:, None]
    picks = (np.cumsum(probs, axis=-1) < draws).sum(axis=-1)
    last_allowed = int(np.flatnonzero(allowed)[-1])
    return np.minimum(picks, last_allowed).astype(np.int64)


def _decode(
    weights: Weights,
    prompt: Sequence[int],
    n: int,
    steps: int,
    masks: Sequence[NDArray[np.bool_]],
    temperature: float,
    rng_seed: int,
    *,
    stop_at_eos: bool,
) -> list[list[int]]:
    """Sample ``n`` continuations of one prompt; ``masks[t]`` constrains step t."""
    rng = np.random.default_rng(rng_seed)
    tokens = np.tile(np.asarray(prompt, dtype=np.int64), (n, 1))
    outputs: list[list[int]] = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    with no_grad():
        for step in range(steps):
            logits = forward_batch(weights, tokens).data[:, -1, :]
            picks = choose_tokens(logits, masks[min(step, len(masks) - 1)], temperature, rng)
            for row, token in enumerate(picks):
                if not done[row]:
                    if stop_at_eos and token == VOCAB.eos:
                        done[row] = True
                    else:
                        outputs[row].append(int(token))
            if done.all():
                break
            picks = np.where(done, VOCAB.pad, picks)
            tokens = np.concatenate([tokens, picks[:, None]], axis=1)
    return outputs


def sample_captions(
    weights: Weights,
    image: ImageTokens,
    n: int,
    temperature: float,
    rng_seed: int,
) -> list[Caption]:
    """``n`` captions in the UND layout; never empty, at most ``max_caption_tokens`` words."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rows = _decode(
        weights,
        und_prompt(image),
        n,
        weights.config.max_caption_tokens,
        # EOS is not allowed as the first caption token
        [WORD_MASK, CAPTION_MASK],
        temperature,
        rng_seed,
        stop_at_eos=True,
    )
    return [Caption(VOCAB.to_words(row)) for row in rows]


def sample_images(
    weights: Weights,
    caption: Caption,
    n: int,
    temperature: float,
    rng_seed: int,
    grid_size: int = 4,
) -> list[ImageTokens]:
    """``n`` images in the GEN layout; exactly grid_size² cell-state tokens each."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rows = _decode(
        weights,
        gen_prompt(caption),
        n,
        grid_size**2,
        [IMAGE_MASK],
        temperature,
        rng_seed,
        stop_at_eos=False,
    )
    return [ImageTokens(VOCAB.to_cells(row)) for row in rows]


def answer_batch(
    weights: Weights, items: Sequence[tuple[ImageTokens, Sequence[int]]]
) -> list[int]:
    """Greedy answers (local word ids) for many (image, question) prompts."""
    answers: list[int] = []
    for start in range(0, len(items), ANSWER_CHUNK):
        chunk = items[start : start + ANSWER_CHUNK]
        prompts = [vqa_prompt(image, question) for image, question in chunk]
        last = np.array([len(p) - 1 for p in prompts])
        with no_grad():
            logits = forward_batch(weights, pad_batch(prompts)).data
        picks = choose_tokens(logits[np.arange(len(chunk)), last], ANSWER_MASK, 0.0)
        answers.extend(int(t) - VOCAB.word_offset for t in picks)
    return answers


def model_answer(weights: Weights, image: ImageTokens, question: Sequence[int]) -> int:
    """Greedy single-token answer in the VQA layout, constrained to the answer vocabulary."""
    return answer_batch(weights, [(image, question)])[0]
