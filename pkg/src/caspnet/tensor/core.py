"""Tensor, Parameter and the recording tape used for reverse-mode differentiation."""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_TAPES: list["Tape"] = []


def default_dtype() -> type:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating point type (e.g. float64 for gradient checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    """Dense array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


GridTensor = Tensor


class Parameter(Tensor):
    """A named model tensor. Non-trainable parameters hold running statistics."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class _Record:
    __slots__ = ("inputs", "outputs", "backward")

    def __init__(self, inputs, outputs, backward):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    Usage::

        with Tape() as tape:
            loss = model(x)
        tape.backward(loss)
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def record(self, inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward: Callable) -> None:
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); start a new Tape")
        self.records.append(_Record(tuple(inputs), tuple(outputs), backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if self._consumed:
            raise RuntimeError("backward() called twice on the same tape; re-run the forward pass")
        if loss.data.size != 1 and grad is None:
            raise ValueError("backward() without an explicit grad needs a scalar loss")
        self._consumed = True
        if not loss.requires_grad:
            self.records.clear()
            return
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.data.dtype)
        _accumulate(loss, seed)
        for rec in reversed(self.records):
            out_grads = [o.grad for o in rec.outputs]
            if all(g is None for g in out_grads):
                continue
            out_grads = [np.zeros_like(o.data) if g is None else g for o, g in zip(rec.outputs, out_grads)]
            in_grads = rec.backward(*out_grads)
            for inp, g in zip(rec.inputs, in_grads):
                if g is not None and inp.requires_grad:
                    _accumulate(inp, g)
        self.records.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        raise ValueError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    # never in-place: a backward fn may hand the same array to several inputs
    t.grad = g if t.grad is None else t.grad + g


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(inputs: Iterable[Tensor], outputs: Sequence[Tensor], backward: Callable) -> None:
    """Attach ``backward`` to the active tape when any input needs a gradient."""
    inputs = tuple(inputs)
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    for o in outputs:
        o.requires_grad = True
    tape.record(inputs, outputs, backward)


@contextlib.contextmanager
def no_tape():
    """Suspend recording (inference or optimizer updates inside a taped region)."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)
