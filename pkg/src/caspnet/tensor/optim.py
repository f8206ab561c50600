"""Adam with bias correction."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .core import Parameter


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** t
        c2 = 1 - b2 ** t
        for p in self.params:
            if p.grad is None:
                # parameter took no part in this graph: moments still decay
                g = np.zeros_like(p.data)
            else:
                g = p.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"adam/step": np.array([self.step_count], dtype=np.float64)}
        for name in self.m:
            out[f"adam/m/{name}"] = self.m[name]
            out[f"adam/v/{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.step_count = int(tensors["adam/step"][0])
        for name in self.m:
            self.m[name][...] = tensors[f"adam/m/{name}"]
            self.v[name][...] = tensors[f"adam/v/{name}"]


def adam_step(params, lr: float, state: Adam | None = None, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Adam:
    """Functional form: apply one Adam update using each parameter's ``grad``; returns the state."""
    if state is None:
        state = Adam(params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    state.lr = lr
    state.step()
    return state
