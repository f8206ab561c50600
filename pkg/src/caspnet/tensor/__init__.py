"""Minimal dense-tensor arithmetic with a reverse-mode tape."""
from .core import (GridTensor, Parameter, Tape, Tensor, active_tape, as_tensor, default_dtype,
                   no_tape, precision, set_default_dtype)
from .ops import (add, batch_norm2d, bilinear_upsample2x, concat, conv2d, conv_lstm_step,
                  conv_transpose2d, lstm_cell, max_pool2d, maximum, mul, narrow, relu, reshape,
                  scale, sigmoid, softmax_channels, square, stack, sub, tanh, total)
from .optim import Adam, adam_step


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


__all__ = [
    "Adam", "GridTensor", "Parameter", "Tape", "Tensor", "active_tape", "adam_step", "add",
    "as_tensor", "backward", "batch_norm2d", "bilinear_upsample2x", "concat", "conv2d",
    "conv_lstm_step", "conv_transpose2d", "default_dtype", "lstm_cell", "max_pool2d", "maximum",
    "mul", "narrow", "no_tape", "precision", "relu", "reshape", "scale", "set_default_dtype",
    "sigmoid", "softmax_channels", "square", "stack", "sub", "tanh", "total",
]
