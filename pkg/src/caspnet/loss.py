"""Distance-aware focal classification loss and masked offset regression."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor
from .tensor.core import record


@dataclass
class LossConfig:
    alpha: float = 0.25
    beta: float = 4.0
    gamma: float = 2.0
    class_weights: dict = field(default_factory=dict)   # class name -> weight, default 1.0
    eps: float = 1e-6

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be >= 0")
        if any(w < 0 for w in self.class_weights.values()):
            raise ValueError("class weights must be >= 0")

    def weight(self, cls: str) -> float:
        return float(self.class_weights.get(cls, 1.0))


def _check_labels(y: np.ndarray) -> None:
    if y.size and (y.min() < 0 or y.max() > 1):
        raise ValueError("ground-truth class values must lie in [0, 1]")


def focal_terms(p: np.ndarray, y: np.ndarray, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel focal loss (non-negative) and its derivative w.r.t. the unclamped probability."""
    a, b, g = cfg.alpha, cfg.beta, cfg.gamma
    pc = np.clip(p, cfg.eps, 1 - cfg.eps)
    live = (p >= cfg.eps) & (p <= 1 - cfg.eps)
    pos = y == 1
    logp, log1m = np.log(pc), np.log1p(-pc)
    one_m = 1 - pc
    neg_w = (1 - a) * (1 - y) ** b
    loss = np.where(pos, -a * one_m ** g * logp, -neg_w * pc ** g * log1m)
    if g == 0:
        dpos = -a / pc
        dneg = neg_w / one_m
    else:
        dpos = -a * (-g * one_m ** (g - 1) * logp + one_m ** g / pc)
        dneg = -neg_w * (g * pc ** (g - 1) * log1m - pc ** g / one_m)
    grad = np.where(pos, dpos, dneg) * live
    return loss, grad


def focal_class_loss(o_tc: Tensor, y_tc: np.ndarray, e_tc: int, cfg: LossConfig = LossConfig()) -> Tensor:
    """Focal loss of one class grid at one step, normalized by (agent count + 1)."""
    y = np.asarray(y_tc, dtype=np.float64)
    _check_labels(y)
    loss, grad = focal_terms(o_tc.data.astype(np.float64), y, cfg)
    norm = 1.0 / (e_tc + 1)
    out = Tensor(loss.sum() * norm, dtype=o_tc.dtype)
    record((o_tc,), (out,), lambda gr: ((gr * norm * grad).astype(o_tc.dtype),))
    return out


def class_loss(o: Tensor, y: np.ndarray, counts: np.ndarray, classes, cfg: LossConfig = LossConfig()) -> Tensor:
    """Weighted sum over classes and steps of the focal loss; ``o`` and ``y`` are (N, |C|, U, V)."""
    y = np.asarray(y, dtype=np.float64)
    _check_labels(y)
    if o.shape != y.shape:
        raise ValueError(f"prediction {o.shape} and ground truth {y.shape} differ")
    loss, grad = focal_terms(o.data.astype(np.float64), y, cfg)
    w = np.array([cfg.weight(c) for c in classes], dtype=np.float64)
    scale = w[None, :] / (np.asarray(counts, dtype=np.float64) + 1.0)        # (N, |C|)
    value = float((loss.sum(axis=(2, 3)) * scale).sum())
    out = Tensor(value, dtype=o.dtype)
    record((o,), (out,), lambda gr: ((gr * scale[:, :, None, None] * grad).astype(o.dtype),))
    return out


def offset_mask(y: np.ndarray, n_classes: int) -> np.ndarray:
    """Pixels whose class channels sum to exactly one, shape (N, U, V)."""
    return np.asarray(y)[:, :n_classes].sum(axis=1) == 1


def offset_loss(o_off: Tensor, y: np.ndarray, n_classes: int) -> Tensor:
    """Squared offset error summed over pixels selected by :func:`offset_mask`; ``o_off`` is (N, 2, U, V)."""
    y = np.asarray(y)
    mask = offset_mask(y, n_classes)[:, None]
    diff = (o_off.data.astype(np.float64) - y[:, n_classes:n_classes + 2]) * mask
    out = Tensor(float((diff ** 2).sum()), dtype=o_off.dtype)
    record((o_off,), (out,), lambda gr: ((2 * gr * diff).astype(o_off.dtype),))
    return out


def total_loss(classes_prob: Tensor, offsets: Tensor, y: np.ndarray, counts: np.ndarray, class_names,
               cfg: LossConfig = LossConfig()) -> tuple[Tensor, Tensor, Tensor]:
    """(L_class + L_offset) / N, returned with both components."""
    from .tensor import add, scale

    nc = len(class_names)
    n = y.shape[0]
    lc = class_loss(classes_prob, y[:, :nc], counts, class_names, cfg)
    lo = offset_loss(offsets, y, nc)
    return scale(add(lc, lo), 1.0 / n), lc, lo
