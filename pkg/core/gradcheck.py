"""Central finite-difference gradient checks against the autodiff tape."""

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from core.tensor import Tensor, no_grad


@dataclass(frozen=True)
class GradCheckResult:
    """Worst coordinate found by :func:`check_gradients`."""

    max_error: float
    worst_tensor: str
    worst_index: tuple[int, ...]
    coordinates: int

    def passed(self, tolerance: float = 1e-6) -> bool:
        return self.max_error < tolerance


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    *,
    eps: float = 1e-5,
    coordinates: int = 64,
    seed: int = 0,
) -> GradCheckResult:
    """Compare analytic gradients with central differences on sampled coordinates.

    The error of a coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    Coordinates are drawn uniformly over all elements of ``params``.
    """
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_picks = rng.choice(total, size=min(coordinates, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = (0.0, "", ())
    for flat in sorted(int(i) for i in flat_picks):
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        param = params[which]
        index = np.unravel_index(flat - int(offsets[which]), param.data.shape)
        original = float(param.data[index])
        with no_grad():
            param.data[index] = original + eps
            plus = loss_fn().item()
            param.data[index] = original - eps
            minus = loss_fn().item()
        param.data[index] = original
        numeric = (plus - minus) / (2.0 * eps)
        error = abs(float(analytic[which][index]) - numeric) / max(1.0, abs(numeric))
        if error >= worst[0]:
            worst = (error, param.name or f"param{which}", tuple(int(i) for i in index))
    return GradCheckResult(
        max_error=worst[0], worst_tensor=worst[1], worst_index=worst[2], coordinates=len(flat_picks)
    )
