"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")


@numba.njit(cache=True)
def _fused_update(p, g, m, v, b1, b2, step_size, inv_sqrt_corr2, eps):
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= step_size * mi / (np.sqrt(vi) * inv_sqrt_corr2 + eps)


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState) -> AdamState:
    """One in-place Adam update of ``params``; missing grads count as zero."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state was built for a different parameter list")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.data.shape:
            raise ShapeError(f"moment shape {m.shape} != parameter shape {p.data.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} != parameter shape {p.data.shape}")
        _fused_update(
            p.data.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
            b1, b2, state.learning_rate / corr1, 1.0 / np.sqrt(corr2), state.epsilon,
        )
    return state


class Adam:
    """Convenience wrapper pairing a parameter list with its AdamState."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
