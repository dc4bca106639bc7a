"""AdamW with decoupled weight decay, gradient clipping and the warm-up/cosine schedule."""

import math
from collections.abc import Mapping
from typing import Any

import numpy as np

from core.errors import NonFiniteError
from core.model import ModelParams, is_decayed
from core.tensor import Tensor


def learning_rate_at(
    step: int, total_steps: int, base_lr: float, warmup_steps: int = 0, cosine: bool = True
) -> float:
    """Linear warm-up over ``warmup_steps``, then cosine decay to zero (or constant)."""
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if not cosine:
        return base_lr
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def grad_norm(params: list[Tensor]) -> float:
    return math.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None))


def clip_gradients(params: list[Tensor], max_norm: float | None) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; return the raw norm."""
    norm = grad_norm(params)
    if max_norm is not None and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


class AdamW:
    """Adaptive moments with weight decay decoupled from the gradient.

    Decay multiplies matrices by ``1 - lr * weight_decay`` before the moment
    update; vectors (gains, biases) are never decayed. With ``lr == 0`` the
    parameters stay bit-identical.
    """

    def __init__(
        self,
        params: ModelParams,
        *,
        weight_decay: float = 0.01,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def step(self, lr: float) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for name, p in self.params:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay and is_decayed(p.shape):
                p.data *= 1.0 - lr * self.weight_decay
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict[str, Any]:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: Mapping[str, Any]) -> None:
        self.t = int(state["t"])
        self.m = {name: np.array(state["m"][name], dtype=np.float64) for name, _ in self.params}
        self.v = {name: np.array(state["v"][name], dtype=np.float64) for name, _ in self.params}


def ensure_finite(loss: float, params: list[Tensor], step: int) -> None:
    """Abort a training step whose loss or gradient is NaN/Inf."""
    if not math.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss} at step {step}", step=step, loss=loss)
    for p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteError(
                f"non-finite gradient for {p.name} at step {step}", step=step, tensor=p.name
            )
