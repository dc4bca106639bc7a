"""AdamW, clipping and the learning-rate schedule."""

import math

import numpy as np
import pytest

from core.errors import NonFiniteError
from core.model import ModelParams
from core.optim import AdamW, clip_gradients, ensure_finite, grad_norm, learning_rate_at


def _unit_grads(params: ModelParams, value: float = 1.0) -> None:
    for p in params.parameters():
        p.grad = np.full_like(p.data, value)


def test_warmup_then_cosine() -> None:
    assert learning_rate_at(0, 100, 1.0, warmup_steps=10) == pytest.approx(0.1)
    assert learning_rate_at(9, 100, 1.0, warmup_steps=10) == pytest.approx(1.0)
    assert learning_rate_at(10, 100, 1.0, warmup_steps=10) == pytest.approx(1.0)
    assert learning_rate_at(55, 100, 1.0, warmup_steps=10) == pytest.approx(0.5)
    assert learning_rate_at(100, 100, 1.0, warmup_steps=10) == pytest.approx(0.0, abs=1e-12)


def test_constant_schedule_without_cosine() -> None:
    assert learning_rate_at(70, 100, 3e-4, cosine=False) == 3e-4


def test_clipping_bounds_the_global_norm(tiny_params: ModelParams) -> None:
    _unit_grads(tiny_params)
    params = tiny_params.parameters()
    raw = clip_gradients(params, 1.0)
    assert raw == pytest.approx(math.sqrt(sum(p.data.size for p in params)))
    assert grad_norm(params) == pytest.approx(1.0)
    assert clip_gradients(params, None) == pytest.approx(1.0)


def test_zero_learning_rate_leaves_params_bit_identical(tiny_params: ModelParams) -> None:
    before = tiny_params.clone()
    _unit_grads(tiny_params)
    optimizer = AdamW(tiny_params, weight_decay=0.5)
    optimizer.step(0.0)
    assert tiny_params.array_equal(before)
    assert optimizer.t == 1


def test_decay_skips_gains_and_biases(tiny_params: ModelParams) -> None:
    before = tiny_params.clone()
    _unit_grads(tiny_params, 0.0)
    AdamW(tiny_params, weight_decay=0.1).step(0.5)
    np.testing.assert_allclose(tiny_params["head"].data, before["head"].data * 0.95)
    np.testing.assert_array_equal(
        tiny_params["layers.0.ln1.gain"].data, before["layers.0.ln1.gain"].data
    )


def test_first_step_moves_each_coordinate_by_lr(tiny_params: ModelParams) -> None:
    before = tiny_params.clone()
    _unit_grads(tiny_params, 0.3)
    AdamW(tiny_params, weight_decay=0.0).step(1e-3)
    delta = before["tok_emb"].data - tiny_params["tok_emb"].data
    np.testing.assert_allclose(delta, 1e-3, rtol=1e-6)


def test_state_round_trip_continues_identically(tiny_params: ModelParams) -> None:
    twin = tiny_params.clone()
    a, b = AdamW(tiny_params), AdamW(twin)
    _unit_grads(tiny_params, 0.2)
    _unit_grads(twin, 0.2)
    a.step(1e-2)
    b.load_state_dict(a.state_dict())
    for name, t in tiny_params:
        twin[name].data[...] = t.data
    a.step(1e-2)
    b.step(1e-2)
    assert tiny_params.array_equal(twin)


def test_non_finite_loss_or_gradient_aborts(tiny_params: ModelParams) -> None:
    params = tiny_params.parameters()
    with pytest.raises(NonFiniteError):
        ensure_finite(float("nan"), params, step=3)
    _unit_grads(tiny_params)
    params[0].grad[0, 0] = np.inf  # type: ignore[index]
    with pytest.raises(NonFiniteError) as info:
        ensure_finite(1.0, params, step=4)
    assert info.value.details["tensor"] == "tok_emb"
    ensure_finite(1.0, params[1:], step=4)
