"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .core import Tape, Tensor, no_tape


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_tape():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data.sum())
            flat[i] = orig - h
            fm = float(fn().data.sum())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def analytic_grads(fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        out = fn()
        loss = ops.total(out) if out.data.size != 1 else out
    tape.backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise deviation relative to the gradient's overall magnitude."""
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> list[float]:
    """Relative error per tensor between taped gradients and central differences of ``sum(fn())``."""
    ana = analytic_grads(fn, tensors)
    return [relative_error(a, numerical_grad(fn, t, h)) for a, t in zip(ana, tensors)]
