"""Differentiable primitives. Layouts are batch-free: feature maps are (C, H, W)."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, dtype=np.result_type(a.data, b.data))

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    record((a, b), (out,), backward)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, dtype=np.result_type(a.data, b.data))

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    record((a, b), (out,), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, dtype=np.result_type(a.data, b.data))

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    record((a, b), (out,), backward)
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    out = Tensor(x.data * x.data.dtype.type(factor), dtype=x.dtype)
    record((x,), (out,), lambda g: (g * g.dtype.type(factor),))
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0), dtype=x.dtype)
    record((x,), (out,), lambda g: (g * mask,))
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: stable for any magnitude, one vectorized pass
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = Tensor(s, dtype=x.dtype)
    record((x,), (out,), lambda g: (g * s * (1 - s),))
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t, dtype=x.dtype)
    record((x,), (out,), lambda g: (g * (1 - t * t),))
    return out


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data, dtype=x.dtype)
    record((x,), (out,), lambda g: (2 * g * x.data,))
    return out


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    out = Tensor(x.data.sum(), dtype=x.dtype)
    record((x,), (out,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    return out


def maximum(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise max over equally shaped tensors; gradient goes to the first argmax."""
    stacked = np.stack([t.data for t in tensors])
    idx = stacked.argmax(axis=0)
    out = Tensor(np.take_along_axis(stacked, idx[None], axis=0)[0], dtype=stacked.dtype)

    def backward(g):
        return tuple(np.where(idx == k, g, 0).astype(g.dtype) for k in range(len(tensors)))

    record(tensors, (out,), backward)
    return out


# ---------------------------------------------------------------- structural

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), dtype=tensors[0].dtype)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return tuple(grads)

    record(tensors, (out,), backward)
    return out


def stack(tensors: Sequence[Tensor]) -> Tensor:
    out = Tensor(np.stack([t.data for t in tensors]), dtype=tensors[0].dtype)
    record(tensors, (out,), lambda g: tuple(g[k] for k in range(len(tensors))))
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``start:start+length`` along ``axis``."""
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(x.data[sl], dtype=x.dtype)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    record((x,), (out,), backward)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), dtype=x.dtype)
    record((x,), (out,), lambda g: (g.reshape(x.shape),))
    return out


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dil: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, ho, wo), dtype=xp.dtype)
    hs = (ho - 1) * stride + 1
    ws = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i * dil:i * dil + hs:stride, j * dil:j * dil + ws:stride]
    return cols


def _col2im(cols: np.ndarray, shape, stride: int, dil: int) -> np.ndarray:
    c, kh, kw, ho, wo = cols.shape
    out = np.zeros(shape, dtype=cols.dtype)
    hs = (ho - 1) * stride + 1
    ws = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i * dil:i * dil + hs:stride, j * dil:j * dil + ws:stride] += cols[:, i, j]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding=0, dilation: int = 1) -> Tensor:
    """Cross-correlation of ``x`` (C_in, H, W) with ``weight`` (C_out, C_in, kh, kw).

    ``padding`` is an int or a (pad_h, pad_w) pair.
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects (C,H,W) input and 4-d kernel, got {x.shape} and {weight.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = weight.shape
    if kc != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {c_in} channels, kernel expects {kc}")
    if dilation < 1 or stride < 1:
        raise ValueError("stride and dilation must be >= 1")
    ph, pw = _pair(padding)
    eh, ew = (kh - 1) * dilation + 1, (kw - 1) * dilation + 1
    ho = (h + 2 * ph - eh) // stride + 1
    wo = (w + 2 * pw - ew) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape} and kernel {weight.shape}")

    wmat = weight.data.reshape(c_out, -1)
    if kh == 1 and kw == 1 and stride == 1 and ph == 0 and pw == 0:
        cols = x.data.reshape(c_in, -1)
        xp_shape = None
    else:
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
        xp_shape = xp.shape
        cols = _im2col(xp, kh, kw, ho, wo, stride, dilation).reshape(c_in * kh * kw, ho * wo)
    y = wmat @ cols
    if bias is not None:
        y += bias.data[:, None]
    out = Tensor(y.reshape(c_out, ho, wo), dtype=x.dtype)

    def backward(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ g2
            if xp_shape is None:
                gx = gcols.reshape(x.shape)
            else:
                gxp = _col2im(gcols.reshape(c_in, kh, kw, ho, wo), xp_shape, stride, dilation)
                gx = gxp[:, ph:ph + h, pw:pw + w]
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    record(inputs, (out,), backward if bias is not None else (lambda g: backward(g)[:2]))
    return out


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2,
                     padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is (C_in, C_out, kh, kw).

    Output extent is (H-1)*stride + kh - 2*padding.
    """
    c_in, h, w = x.shape
    kc, c_out, kh, kw = weight.shape
    if kc != c_in:
        raise ValueError(f"conv_transpose2d channel mismatch: input has {c_in} channels, kernel expects {kc}")
    full_h, full_w = (h - 1) * stride + kh, (w - 1) * stride + kw
    p = int(padding)
    ho, wo = full_h - 2 * p, full_w - 2 * p
    if ho < 1 or wo < 1:
        raise ValueError("conv_transpose2d output would be empty")
    wmat = weight.data.reshape(c_in, -1)
    xmat = x.data.reshape(c_in, -1)
    cols = (wmat.T @ xmat).reshape(c_out, kh, kw, h, w)
    full = _col2im(cols, (c_out, full_h, full_w), stride, 1)
    y = full[:, p:p + ho, p:p + wo]
    if bias is not None:
        y = y + bias.data[:, None, None]
    out = Tensor(np.ascontiguousarray(y), dtype=x.dtype)

    def backward(g):
        gfull = np.pad(g, ((0, 0), (p, p), (p, p))) if p else g
        gcols = _im2col(gfull, kh, kw, h, w, stride, 1).reshape(c_out * kh * kw, h * w)
        gx = (wmat @ gcols).reshape(x.shape) if x.requires_grad else None
        gw = (xmat @ gcols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(1, 2)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    record(inputs, (out,), backward if bias is not None else (lambda g: backward(g)[:2]))
    return out


# ---------------------------------------------------------------- pooling / norm

def max_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping max pooling. Returns the pooled tensor and flat in-window argmax indices."""
    if k != stride:
        raise ValueError("only non-overlapping pooling (k == stride) is supported")
    c, h, w = x.shape
    if h % stride or w % stride:
        raise ValueError(f"max_pool2d needs extents divisible by {stride}, got {(h, w)}")
    ho, wo = h // k, w // k
    win = x.data.reshape(c, ho, k, wo, k).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], dtype=x.dtype)

    def backward(g):
        gwin = np.zeros((c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        return (gwin.reshape(c, ho, wo, k, k).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    record((x,), (out,), backward)
    return out, idx


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor | None = None,
                 running_var: Tensor | None = None, training: bool = True, momentum: float = 0.1,
                 eps: float = 1e-5) -> Tensor:
    """Per-channel normalization with statistics over the spatial extent of one sample.

    In training mode the running statistics (if given) are updated in place.
    """
    c = x.shape[0]
    n = x.data[0].size
    if training:
        mean = x.data.mean(axis=(1, 2))
        var = x.data.var(axis=(1, 2))
        if running_mean is not None:
            running_mean.data *= 1 - momentum
            running_mean.data += momentum * mean
        if running_var is not None:
            unbiased = var * (n / (n - 1)) if n > 1 else var
            running_var.data *= 1 - momentum
            running_var.data += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise ValueError("eval-mode batch_norm2d needs running statistics")
        mean, var = running_mean.data, running_var.data
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[:, None, None]) * inv[:, None, None]
    out = Tensor(xhat * gamma.data[:, None, None] + beta.data[:, None, None], dtype=x.dtype)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(1, 2))
        gbeta = g.sum(axis=(1, 2))
        dxhat = g * gamma.data[:, None, None]
        if training:
            s1 = dxhat.sum(axis=(1, 2), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(1, 2), keepdims=True)
            gx = (inv[:, None, None] / n) * (n * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv[:, None, None]
        return gx, ggamma, gbeta

    record((x, gamma, beta), (out,), backward)
    assert out.shape[0] == c
    return out


# ---------------------------------------------------------------- attention / resampling

def softmax_channels(x: Tensor) -> Tensor:
    """Softmax across axis 0 independently at every pixel."""
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=0, keepdims=True)
    out = Tensor(s, dtype=x.dtype)

    def backward(g):
        return (s * (g - (g * s).sum(axis=0, keepdims=True)),)

    record((x,), (out,), backward)
    return out


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    # align_corners=False: output index o samples source coordinate (o + 0.5) / 2 - 0.5
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = int(np.floor(src))
        i0 = min(i0, n - 1)
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def bilinear_upsample2x(x: Tensor) -> Tensor:
    c, h, w = x.shape
    ah = _upsample_matrix(h, x.dtype)
    aw = _upsample_matrix(w, x.dtype)
    y = np.matmul(np.matmul(ah, x.data), aw.T)
    out = Tensor(y, dtype=x.dtype)
    record((x,), (out,), lambda g: (np.matmul(np.matmul(ah.T, g), aw),))
    return out


# ---------------------------------------------------------------- recurrent cell

def lstm_cell(gates: Tensor, c_prev: Tensor | None) -> tuple[Tensor, Tensor]:
    """Fused LSTM state update from pre-activation gates (4*Ch, H, W), order (i, f, o, g)."""
    ch = gates.shape[0] // 4
    z = gates.data
    ifo = _sigmoid(z[:3 * ch])
    i, f, o = ifo[:ch], ifo[ch:2 * ch], ifo[2 * ch:]
    gg = np.tanh(z[3 * ch:])
    cp = c_prev.data if c_prev is not None else np.zeros_like(i)
    c = f * cp + i * gg
    tc = np.tanh(c)
    h = o * tc
    h_out = Tensor(h, dtype=gates.dtype)
    c_out = Tensor(c, dtype=gates.dtype)

    def backward(gh, gc):
        dc = gc + gh * o * (1 - tc * tc)
        dz = np.empty_like(z)
        dz[:ch] = dc * gg * i * (1 - i)
        dz[ch:2 * ch] = dc * cp * f * (1 - f)
        dz[2 * ch:3 * ch] = gh * tc * o * (1 - o)
        dz[3 * ch:] = dc * i * (1 - gg * gg)
        return (dz, dc * f) if c_prev is not None else (dz,)

    inputs = (gates, c_prev) if c_prev is not None else (gates,)
    record(inputs, (h_out, c_out), backward)
    return h_out, c_out


def conv_lstm_step(x: Tensor, h_prev: Tensor | None, c_prev: Tensor | None, weight: Tensor,
                   bias: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """One ConvLSTM step.

    ``weight`` is (4*Ch, C_x + Ch, k, k) acting on the channel concatenation of ``x`` and
    ``h_prev``; gates are ordered (input, forget, output, candidate). A missing state means zeros.
    """
    ch = weight.shape[0] // 4
    k = weight.shape[2]
    if weight.shape[0] != 4 * ch or weight.shape[1] != x.shape[0] + ch:
        raise ValueError(f"ConvLSTM kernel {weight.shape} incompatible with input {x.shape}")
    if h_prev is not None and h_prev.shape[1:] != x.shape[1:]:
        raise ValueError(f"ConvLSTM spatial mismatch: x {x.shape[1:]} vs h {h_prev.shape[1:]}")
    if h_prev is None:
        h_prev = Tensor(np.zeros((ch,) + x.shape[1:]), dtype=x.dtype)
    gates = conv2d(concat([x, h_prev]), weight, bias, padding=k // 2)
    return lstm_cell(gates, c_prev)
