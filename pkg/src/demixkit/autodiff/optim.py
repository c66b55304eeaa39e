from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from demixkit.autodiff.tensor import Tensor
from demixkit.errors import ShapeError


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    beta1: float = 0.95
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 1e-3

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("adam_step: params, grads and moments differ in count")
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeError(f"adam_step: shape mismatch {p.shape}, grad {g.shape}, moments {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return state


class Adam:
    """Adam over a fixed list of tensors, reading gradients from ``.grad``."""

    def __init__(self, params: Sequence[Tensor], learning_rate=1e-3, beta1=0.95, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(
            self.params, learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon
        )

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state)
