"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam. ``step()`` consumes and clears the gradients."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, state: AdamState | None = None):
        self.params = params
        if state is None:
            state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
            state.m = {k: np.zeros_like(p.data) for k, p in params.items()}
            state.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        for k, p in params.items():
            if k not in state.m or state.m[k].shape != p.shape or state.v[k].shape != p.shape:
                raise ContractError(f"optimizer state for {k!r} does not match parameter shape {p.shape}")
        self.state = state

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractError(f"adam step without gradients for: {', '.join(missing)}")
        s = self.state
        s.step += 1
        c1 = 1.0 - s.beta1 ** s.step
        c2 = 1.0 - s.beta2 ** s.step
        for k, p in self.params.items():
            g = p.grad
            m = s.m[k]
            v = s.v[k]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            p.data -= s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)
            p.grad = None


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """Functional form of :meth:`Adam.step`."""
    Adam(params, state=state).step()
