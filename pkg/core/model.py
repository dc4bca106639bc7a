"""
Tiny decoder-only transformer over the joint vocabulary.

One network serves three tasks through its sequence layout:

    UND  [BOS, TASK_UND, image..., SEP | caption..., EOS]
    GEN  [BOS, TASK_GEN, caption..., SEP | image..., EOS]
    VQA  [BOS, TASK_VQA, image..., SEP, question..., SEP | answer, EOS]

Tokens before "|" are the prompt; log-probabilities and losses only ever
cover the response segment. Batches are right-padded with PAD, which never
influences a real position because attention is causal.

Checkpoints are a ``manifest.json`` (config plus a tensor table of name,
shape, byte offset and length) next to ``checkpoint.bin``, the parameters as
little-endian float64 concatenated in manifest order.
"""

import hashlib
import json
import math
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Literal

import numpy as np
from numpy.typing import NDArray

from core.config import ModelConfig
from core.errors import ContractError, SequenceLengthError
from core.schema import Caption, ImageTokens
from core.tensor import (
    Tensor,
    gather,
    gelu,
    layer_norm,
    log_softmax,
    matmul,
    no_grad,
    softmax,
    transpose,
)
from core.vocabulary import VOCAB

Task = Literal["und", "gen", "vqa"]
MASK_VALUE = -1e9
CHECKPOINT_FORMAT = 1
BLOB_DTYPE = "<f8"


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter table; its order is the checkpoint order."""
    d, hidden, vocab = cfg.d_model, cfg.d_model * cfg.mlp_ratio, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (vocab, d), "pos_emb": (cfg.context, d)}
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        shapes |= {
            p + "ln1.gain": (d,),
            p + "ln1.bias": (d,),
            p + "attn.wq": (d, d),
            p + "attn.wk": (d, d),
            p + "attn.wv": (d, d),
            p + "attn.wo": (d, d),
            p + "ln2.gain": (d,),
            p + "ln2.bias": (d,),
            p + "mlp.w1": (d, hidden),
            p + "mlp.b1": (hidden,),
            p + "mlp.w2": (hidden, d),
            p + "mlp.b2": (d,),
        }
    shapes |= {"ln_f.gain": (d,), "ln_f.bias": (d,)}
    if not cfg.tie_embeddings:
        shapes["head"] = (d, vocab)
    return shapes


@dataclass
class ModelParams:
    """Trainable policy weights, keyed by canonical name."""

    config: ModelConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def clone(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor.parameter(t.data.copy(), name=k) for k, t in self.tensors.items()},
        )

    def snapshot(self) -> "ReferenceSnapshot":
        return ReferenceSnapshot.of(self)

    def digest(self) -> str:
        """SHA-256 of the checkpoint blob (the "checkpoint hash")."""
        return hashlib.sha256(params_blob(self)).hexdigest()

    def array_equal(self, other: "ModelParams | ReferenceSnapshot") -> bool:
        return all(np.array_equal(t.data, other[k].data) for k, t in self)


@dataclass(frozen=True)
class ReferenceSnapshot:
    """Frozen copy of a policy; its arrays are read-only and never tracked."""

    config: ModelConfig
    tensors: Mapping[str, Tensor] = field(repr=False)

    @classmethod
    def of(cls, params: ModelParams) -> "ReferenceSnapshot":
        frozen: dict[str, Tensor] = {}
        for name, t in params:
            const = Tensor.constant(t.data, name=name)
            const.data.flags.writeable = False
            frozen[name] = const
        return cls(params.config, MappingProxyType(frozen))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def digest(self) -> str:
        return hashlib.sha256(params_blob(self)).hexdigest()

    def to_params(self) -> ModelParams:
        return ModelParams(
            self.config, {k: Tensor.parameter(t.data.copy(), name=k) for k, t in self}
        )


Weights = ModelParams | ReferenceSnapshot


def init_params(cfg: ModelConfig, seed: int | None = None) -> ModelParams:
    """Normal(0, init_std) matrices, unit gains, zero biases."""
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, cfg.init_std, size=shape)
        tensors[name] = Tensor.parameter(data, name=name)
    return ModelParams(cfg, tensors)


def is_decayed(shape: tuple[int, ...]) -> bool:
    """Weight decay applies to matrices only."""
    return len(shape) >= 2


# ---------------------------------------------------------------------------
# Layouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SequenceLayout:
    """Joint-id sequence split into prompt and (non-empty) response."""

    task: Task
    prompt: tuple[int, ...]
    response: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.response:
            raise ContractError(f"{self.task} layout has an empty response segment")

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.prompt + self.response

    def __len__(self) -> int:
        return len(self.prompt) + len(self.response)


def und_prompt(image: ImageTokens) -> tuple[int, ...]:
    return (VOCAB.bos, VOCAB.special("TASK_UND"), *VOCAB.from_cells(image.root), VOCAB.sep)


def gen_prompt(caption: Caption) -> tuple[int, ...]:
    return (VOCAB.bos, VOCAB.special("TASK_GEN"), *VOCAB.from_words(caption.root), VOCAB.sep)


def vqa_prompt(image: ImageTokens, question: Sequence[int]) -> tuple[int, ...]:
    return (
        VOCAB.bos,
        VOCAB.special("TASK_VQA"),
        *VOCAB.from_cells(image.root),
        VOCAB.sep,
        *VOCAB.from_words(question),
        VOCAB.sep,
    )


def und_layout(image: ImageTokens, caption: Caption) -> SequenceLayout:
    return SequenceLayout(
        "und", und_prompt(image), (*VOCAB.from_words(caption.root), VOCAB.eos)
    )


def gen_layout(caption: Caption, image: ImageTokens) -> SequenceLayout:
    return SequenceLayout("gen", gen_prompt(caption), (*VOCAB.from_cells(image.root), VOCAB.eos))


def vqa_layout(image: ImageTokens, question: Sequence[int], answer: int) -> SequenceLayout:
    return SequenceLayout(
        "vqa", vqa_prompt(image, question), (VOCAB.word_offset + answer, VOCAB.eos)
    )


def pad_batch(sequences: Sequence[Sequence[int]]) -> NDArray[np.int64]:
    """Right-pad token sequences with PAD into a [B, T] matrix."""
    width = max(len(s) for s in sequences)
    batch = np.full((len(sequences), width), VOCAB.pad, dtype=np.int64)
    for row, seq in enumerate(sequences):
        batch[row, : len(seq)] = seq
    return batch


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _one_hot(ids: NDArray[np.int64], size: int) -> Tensor:
    return Tensor.constant(np.eye(size)[ids])


def _causal_mask(length: int) -> Tensor:
    upper = np.triu(np.ones((length, length), dtype=bool), k=1)
    return Tensor.constant(np.where(upper, MASK_VALUE, 0.0))


def _attention(weights: Weights, prefix: str, h: Tensor, mask: Tensor) -> Tensor:
    cfg = weights.config
    batch, length, _ = h.shape
    heads, head_dim = cfg.n_heads, cfg.head_dim

    def split(t: Tensor) -> Tensor:
        return t.reshape(batch, length, heads, head_dim).transpose(0, 2, 1, 3)

    q = split(h @ weights[prefix + "wq"])
    k = split(h @ weights[prefix + "wk"])
    v = split(h @ weights[prefix + "wv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim)) + mask
    mixed = (softmax(scores) @ v).transpose(0, 2, 1, 3).reshape(batch, length, cfg.d_model)
    return mixed @ weights[prefix + "wo"]


def forward_batch(weights: Weights, tokens: NDArray[np.int64]) -> Tensor:
    """Logits [B, T, V] for a padded [B, T] token matrix."""
    cfg = weights.config
    batch, length = tokens.shape
    if length > cfg.context:
        raise SequenceLengthError(
            f"sequence of length {length} exceeds the model context {cfg.context}",
            length=length,
            context=cfg.context,
        )
    x = _one_hot(tokens, cfg.vocab_size) @ weights["tok_emb"]
    x = x + _one_hot(np.arange(length), cfg.context) @ weights["pos_emb"]
    mask = _causal_mask(length)
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        h = layer_norm(x, weights[p + "ln1.gain"], weights[p + "ln1.bias"])
        x = x + _attention(weights, p + "attn.", h, mask)
        h = layer_norm(x, weights[p + "ln2.gain"], weights[p + "ln2.bias"])
        h = gelu(h @ weights[p + "mlp.w1"] + weights[p + "mlp.b1"])
        x = x + (h @ weights[p + "mlp.w2"] + weights[p + "mlp.b2"])
    x = layer_norm(x, weights["ln_f.gain"], weights["ln_f.bias"])
    head = transpose(weights["tok_emb"], (1, 0)) if cfg.tie_embeddings else weights["head"]
    return matmul(x, head)


def forward_logits(weights: Weights, tokens: Sequence[int]) -> Tensor:
    """Logits [T, V] for one sequence."""
    ids = np.asarray(tokens, dtype=np.int64)[None, :]
    logits = forward_batch(weights, ids)
    return logits.reshape(*logits.shape[1:])


# ---------------------------------------------------------------------------
# Log-probabilities and losses
# ---------------------------------------------------------------------------


def _response_targets(
    layouts: Sequence[SequenceLayout],
) -> tuple[NDArray[np.int64], NDArray[np.int64], NDArray[np.float64]]:
    """Padded tokens, next-token targets, and the response-position mask."""
    tokens = pad_batch([lay.tokens for lay in layouts])
    targets = np.full_like(tokens, VOCAB.pad)
    targets[:, :-1] = tokens[:, 1:]
    mask = np.zeros(tokens.shape, dtype=np.float64)
    for row, lay in enumerate(layouts):
        # logits at t predict token t + 1
        mask[row, len(lay.prompt) - 1 : len(lay) - 1] = 1.0
    return tokens, targets, mask


def response_logprobs(weights: Weights, layouts: Sequence[SequenceLayout]) -> Tensor:
    """Per-layout sum of response-token log-probs, shape [B]."""
    if not layouts:
        raise ContractError("response_logprobs needs at least one layout")
    tokens, targets, mask = _response_targets(layouts)
    picked = gather(log_softmax(forward_batch(weights, tokens)), targets)
    return (picked * Tensor.constant(mask)).sum(axis=1)


def sequence_logprob(weights: Weights, layout: SequenceLayout) -> Tensor:
    """Sum (not mean) of response-token log-probs under teacher forcing."""
    return response_logprobs(weights, [layout]).reshape()


def nll_loss(weights: Weights, layout: SequenceLayout) -> Tensor:
    """Mean negative log-likelihood over response positions only."""
    return sequence_logprob(weights, layout) * (-1.0 / len(layout.response))


def batch_nll_loss(weights: Weights, layouts: Sequence[SequenceLayout]) -> Tensor:
    """Mean over examples of each example's :func:`nll_loss`."""
    lengths = np.array([len(lay.response) for lay in layouts], dtype=np.float64)
    per_token = response_logprobs(weights, layouts) * Tensor.constant(-1.0 / lengths)
    return per_token.mean()


def stacked_logprobs(
    policy: ModelParams, reference: ReferenceSnapshot, layouts: Sequence[SequenceLayout]
) -> tuple[Tensor, Tensor]:
    """Policy (tracked) and reference (constant) log-probs on the same padded batch."""
    policy_lp = response_logprobs(policy, layouts)
    with no_grad():
        reference_lp = response_logprobs(reference, layouts)
    return policy_lp, reference_lp


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def params_blob(weights: Weights) -> bytes:
    return b"".join(t.data.astype(BLOB_DTYPE).tobytes() for _, t in weights)


def tensor_table(arrays: Mapping[str, NDArray[np.float64]]) -> list[dict[str, Any]]:
    table, offset = [], 0
    for name, arr in arrays.items():
        nbytes = arr.size * 8
        table.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": nbytes,
                "dtype": BLOB_DTYPE,
            }
        )
        offset += nbytes
    return table


def read_blob(blob: bytes, table: Sequence[Mapping[str, Any]]) -> dict[str, NDArray[np.float64]]:
    arrays: dict[str, NDArray[np.float64]] = {}
    for entry in table:
        count = entry["nbytes"] // 8
        flat = np.frombuffer(blob, dtype=BLOB_DTYPE, count=count, offset=entry["offset"])
        arrays[entry["name"]] = flat.astype(np.float64).reshape(entry["shape"])
    return arrays


@dataclass
class Checkpoint:
    params: ModelParams
    step: int = 0
    optimizer_state: dict[str, Any] | None = None


def save_checkpoint(
    directory: Path,
    params: ModelParams,
    *,
    step: int = 0,
    optimizer_state: Mapping[str, Any] | None = None,
) -> str:
    """Write manifest.json + checkpoint.bin (+ optimizer.bin); return the checkpoint hash."""
    directory.mkdir(parents=True, exist_ok=True)
    blob = params_blob(params)
    manifest: dict[str, Any] = {
        "format_version": CHECKPOINT_FORMAT,
        "model": params.config.model_dump(mode="json"),
        "step": step,
        "tensors": tensor_table({k: t.data for k, t in params}),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    if optimizer_state is not None:
        moments: dict[str, NDArray[np.float64]] = {}
        for key in ("m", "v"):
            for name, arr in optimizer_state[key].items():
                moments[f"{key}.{name}"] = arr
        manifest["optimizer"] = {"t": optimizer_state["t"], "tensors": tensor_table(moments)}
        (directory / "optimizer.bin").write_bytes(
            b"".join(a.astype(BLOB_DTYPE).tobytes() for a in moments.values())
        )
    (directory / "checkpoint.bin").write_bytes(blob)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return str(manifest["sha256"])


def load_checkpoint(directory: Path) -> Checkpoint:
    """Bit-exact inverse of :func:`save_checkpoint`."""
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise ContractError(
            f"unsupported checkpoint format {manifest.get('format_version')!r}",
            path=str(directory),
        )
    cfg = ModelConfig.model_validate(manifest["model"])
    arrays = read_blob((directory / "checkpoint.bin").read_bytes(), manifest["tensors"])
    expected = parameter_shapes(cfg)
    if list(arrays) != list(expected):
        raise ContractError("checkpoint tensor table does not match the model config")
    params = ModelParams(cfg, {k: Tensor.parameter(a, name=k) for k, a in arrays.items()})
    state = None
    if "optimizer" in manifest:
        table = manifest["optimizer"]["tensors"]
        flat = read_blob((directory / "optimizer.bin").read_bytes(), table)
        state = {
            "t": manifest["optimizer"]["t"],
            "m": {k[2:]: a for k, a in flat.items() if k.startswith("m.")},
            "v": {k[2:]: a for k, a in flat.items() if k.startswith("v.")},
        }
    return Checkpoint(params=params, step=int(manifest.get("step", 0)), optimizer_state=state)

