"""Unit tests for core.model: layouts, forward pass, log-probabilities, losses and checkpoints."""

import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

from core.config import ModelConfig
from core.errors import ContractError, SequenceLengthError
from core.gradcheck import check_gradients
from core.model import (
    ModelParams,
    SequenceLayout,
    batch_nll_loss,
    forward_batch,
    forward_logits,
    gen_layout,
    init_params,
    is_decayed,
    load_checkpoint,
    nll_loss,
    pad_batch,
    parameter_shapes,
    response_logprobs,
    save_checkpoint,
    sequence_logprob,
    und_layout,
    vqa_layout,
)
from core.optim import AdamW
from core.schema import HomologousPair
from core.tensor import log_softmax
from core.vocabulary import VOCAB

# ---------------------------------------------------------------------------
# Parameters and layouts
# ---------------------------------------------------------------------------


def test_parameter_table_is_canonical(tiny_model_cfg: ModelConfig) -> None:
    shapes = parameter_shapes(tiny_model_cfg)
    names = list(shapes)
    assert names[:2] == ["tok_emb", "pos_emb"]
    assert names[-1] == "head"
    assert shapes["tok_emb"] == (VOCAB.size, 8)
    assert shapes["layers.0.mlp.w1"] == (8, 16)
    tied = parameter_shapes(tiny_model_cfg.model_copy(update={"tie_embeddings": True}))
    assert "head" not in tied


def test_init_is_seeded(tiny_model_cfg: ModelConfig) -> None:
    a, b = init_params(tiny_model_cfg, seed=1), init_params(tiny_model_cfg, seed=1)
    assert a.array_equal(b)
    assert a.digest() == b.digest()
    assert a.digest() != init_params(tiny_model_cfg, seed=2).digest()
    assert np.all(a["layers.0.ln1.gain"].data == 1.0)


def test_weight_decay_applies_to_matrices_only() -> None:
    assert is_decayed((4, 4))
    assert not is_decayed((4,))


def test_layouts_split_prompt_and_response(train_pairs: list[HomologousPair]) -> None:
    pair = train_pairs[0]
    und = und_layout(pair.image, pair.caption)
    assert und.prompt[:2] == (VOCAB.bos, VOCAB.special("TASK_UND"))
    assert und.prompt[-1] == VOCAB.sep
    assert und.response[-1] == VOCAB.eos
    assert len(und.response) == len(pair.caption.root) + 1
    gen = gen_layout(pair.caption, pair.image)
    assert len(gen.response) == len(pair.image.root) + 1
    qa = pair.qa[0]
    vqa = vqa_layout(pair.image, qa.question, qa.answer)
    assert vqa.response == (VOCAB.word_offset + qa.answer, VOCAB.eos)


def test_empty_response_is_rejected() -> None:
    with pytest.raises(ContractError, match="empty response"):
        SequenceLayout("und", (VOCAB.bos,), ())


def test_pad_batch_right_pads() -> None:
    batch = pad_batch([[5, 6, 7], [8]])
    np.testing.assert_array_equal(batch, [[5, 6, 7], [8, VOCAB.pad, VOCAB.pad]])


# ---------------------------------------------------------------------------
# Forward pass and log-probabilities
# ---------------------------------------------------------------------------


def test_forward_shapes(tiny_params: ModelParams) -> None:
    logits = forward_batch(tiny_params, pad_batch([[1, 4, 9], [1, 5]]))
    assert logits.shape == (2, 3, VOCAB.size)
    assert forward_logits(tiny_params, [1, 4, 9]).shape == (3, VOCAB.size)


def test_overlength_sequence_is_rejected(tiny_params: ModelParams) -> None:
    with pytest.raises(SequenceLengthError):
        forward_logits(tiny_params, [1] * (tiny_params.config.context + 1))


def test_causal_prefix_is_unaffected_by_later_tokens(tiny_params: ModelParams) -> None:
    short = forward_logits(tiny_params, [1, 4, 9]).data
    longer = forward_logits(tiny_params, [1, 4, 9, 30, 31]).data
    np.testing.assert_allclose(longer[:3], short, rtol=0, atol=1e-12)


def test_padding_does_not_change_logprobs(
    tiny_params: ModelParams, train_pairs: list[HomologousPair]
) -> None:
    pair = train_pairs[0]
    short = vqa_layout(pair.image, pair.qa[0].question, pair.qa[0].answer)
    long = und_layout(pair.image, pair.caption)
    alone = response_logprobs(tiny_params, [short]).data[0]
    batched = response_logprobs(tiny_params, [short, long]).data[0]
    assert alone == pytest.approx(batched, abs=1e-12)


def test_sequence_logprob_sums_response_positions_only(
    tiny_params: ModelParams, train_pairs: list[HomologousPair]
) -> None:
    layout = und_layout(train_pairs[1].image, train_pairs[1].caption)
    logp = log_softmax(forward_logits(tiny_params, layout.tokens)).data
    start = len(layout.prompt)
    expected = sum(logp[t - 1, layout.tokens[t]] for t in range(start, len(layout)))
    assert sequence_logprob(tiny_params, layout).item() == pytest.approx(expected, abs=1e-10)
    per_token = -expected / len(layout.response)
    assert nll_loss(tiny_params, layout).item() == pytest.approx(per_token, abs=1e-10)


def test_initial_loss_is_close_to_uniform(
    tiny_model_cfg: ModelConfig, train_pairs: list[HomologousPair]
) -> None:
    params = init_params(tiny_model_cfg, seed=0)
    layouts = [und_layout(p.image, p.caption) for p in train_pairs[:4]]
    assert batch_nll_loss(params, layouts).item() == pytest.approx(math.log(VOCAB.size), abs=0.2)


def test_nll_gradient_matches_finite_differences(
    tiny_params: ModelParams, train_pairs: list[HomologousPair]
) -> None:
    pair = train_pairs[2]
    layout = gen_layout(pair.caption, pair.image)
    result = check_gradients(lambda: nll_loss(tiny_params, layout), tiny_params.parameters())
    assert result.passed(1e-6), result


@pytest.mark.parametrize("seed", range(5))
def test_gradients_on_random_tiny_configs(seed: int, train_pairs: list[HomologousPair]) -> None:
    rng = np.random.default_rng(seed)
    heads = int(rng.choice([1, 2]))
    cfg = ModelConfig(
        d_model=4 * heads,
        n_layers=int(rng.integers(1, 3)),
        n_heads=heads,
        context=40,
        mlp_ratio=2,
        tie_embeddings=bool(rng.integers(2)),
        init_std=0.3,
    )
    params = init_params(cfg, seed=seed)
    pair = train_pairs[seed % len(train_pairs)]
    layouts = [und_layout(pair.image, pair.caption), gen_layout(pair.caption, pair.image)]
    result = check_gradients(
        lambda: batch_nll_loss(params, layouts), params.parameters(), seed=seed
    )
    assert result.passed(1e-6), result


# ---------------------------------------------------------------------------
# Reference snapshots
# ---------------------------------------------------------------------------


def test_snapshot_is_frozen_and_detached(tiny_params: ModelParams) -> None:
    snap = tiny_params.snapshot()
    before = snap.digest()
    with pytest.raises(ValueError):
        snap["tok_emb"].data[0, 0] = 1.0
    tiny_params["tok_emb"].data[0, 0] += 1.0
    assert snap.digest() == before
    assert not snap["tok_emb"].requires_grad


def test_clone_is_independent(tiny_params: ModelParams) -> None:
    copy = tiny_params.clone()
    copy["head"].data += 1.0
    assert not copy.array_equal(tiny_params)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tiny_params: ModelParams, tmp_path: Path) -> None:
    digest = save_checkpoint(tmp_path, tiny_params, step=12)
    assert digest == hashlib.sha256((tmp_path / "checkpoint.bin").read_bytes()).hexdigest()
    assert digest == tiny_params.digest()
    loaded = load_checkpoint(tmp_path)
    assert loaded.step == 12
    assert loaded.optimizer_state is None
    assert loaded.params.array_equal(tiny_params)
    assert loaded.params.config == tiny_params.config


def test_manifest_lists_every_tensor(tiny_params: ModelParams, tmp_path: Path) -> None:
    save_checkpoint(tmp_path, tiny_params)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["format_version"] == 1
    table = manifest["tensors"]
    assert [t["name"] for t in table] == list(parameter_shapes(tiny_params.config))
    assert table[1]["offset"] == table[0]["nbytes"]
    assert {t["dtype"] for t in table} == {"<f8"}


def test_checkpoint_carries_optimizer_moments(tiny_params: ModelParams, tmp_path: Path) -> None:
    optimizer = AdamW(tiny_params)
    for p in tiny_params.parameters():
        p.grad = np.ones_like(p.data)
    optimizer.step(1e-3)
    save_checkpoint(tmp_path, tiny_params, step=1, optimizer_state=optimizer.state_dict())
    state = load_checkpoint(tmp_path).optimizer_state
    assert state is not None and state["t"] == 1
    for name, moment in optimizer.m.items():
        np.testing.assert_array_equal(state["m"][name], moment)
        np.testing.assert_array_equal(state["v"][name], optimizer.v[name])


def test_unknown_format_version_is_rejected(tiny_params: ModelParams, tmp_path: Path) -> None:
    save_checkpoint(tmp_path, tiny_params)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["format_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ContractError, match="unsupported checkpoint format"):
        load_checkpoint(tmp_path)
