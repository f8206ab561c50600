"""CASPNet: trajectory/map encoders, attention skip connections and a ConvLSTM decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .raster import INPUT_CHANNELS, SCENE_CLASSES
from .tensor import Parameter, Tensor

HEAD_PRIOR = 0.1  # initial occupancy probability of the class channels


@dataclass
class CaspNetConfig:
    pyramid_levels: int = 3
    channels: tuple = (16, 32, 64)
    dilations: tuple = (1, 2)
    classes: tuple = SCENE_CLASSES
    gabor_enabled: bool = True
    gabor_orientations: int = 4
    gabor_kernel: int = 5
    M: int = 3
    N: int = 12
    U: int = 152
    V: int = 80
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.dilations = tuple(int(d) for d in self.dilations)
        self.classes = tuple(self.classes)
        self.validate()

    def validate(self) -> None:
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if len(self.channels) != self.pyramid_levels:
            raise ValueError(f"channels has {len(self.channels)} entries for {self.pyramid_levels} pyramid levels")
        if not self.dilations or min(self.dilations) < 1:
            raise ValueError("dilations must be a non-empty set of positive ints")
        if not self.classes or any(c not in SCENE_CLASSES for c in self.classes):
            raise ValueError(f"classes must be a non-empty subset of {SCENE_CLASSES}")
        div = 2 ** (self.pyramid_levels - 1)
        if self.U % div or self.V % div:
            raise ValueError(f"U={self.U}, V={self.V} must be divisible by {div} for {self.pyramid_levels} levels")
        if self.M < 1 or self.N < 1:
            raise ValueError("M and N must be >= 1")
        if self.gabor_orientations < 1 or self.gabor_kernel % 2 == 0:
            raise ValueError("gabor_orientations >= 1 and an odd gabor_kernel are required")

    @property
    def n_out(self) -> int:
        return len(self.classes) + 2

    @property
    def attention_kernel(self) -> int:
        # receptive field of a 3x3 convolution at the largest dilation
        return 2 * max(self.dilations) + 1

    # -- key-value text form
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, kv: dict) -> "CaspNetConfig":
        known = {f.name: f for f in fields(cls)}
        args = {}
        for key, raw in kv.items():
            if key not in known:
                continue
            default = known[key].default
            if isinstance(default, tuple):
                items = [s.strip() for s in str(raw).split(",") if s.strip()]
                args[key] = tuple(items) if key == "classes" else tuple(int(s) for s in items)
            elif isinstance(default, bool):
                args[key] = str(raw).strip().lower() in ("1", "true", "yes", "on")
            else:
                args[key] = int(raw)
        return cls(**args)


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def gabor_bank(k: int = 5, orientations: int = 4, sigma: float | None = None, wavelength: float | None = None,
               gamma: float = 0.5) -> np.ndarray:
    """Fixed real Gabor filters (orientations, k, k) at pi/orientations spacing, peak-normalized to 1."""
    sigma = sigma or k / 3.0
    wavelength = wavelength or float(k - 1)
    half = k // 2
    yy, xx = np.meshgrid(np.arange(-half, half + 1), np.arange(-half, half + 1), indexing="ij")
    bank = []
    for r in range(orientations):
        th = r * math.pi / orientations
        xr = xx * math.cos(th) + yy * math.sin(th)
        yr = -xx * math.sin(th) + yy * math.cos(th)
        g = np.exp(-(xr ** 2 + (gamma * yr) ** 2) / (2 * sigma ** 2)) * np.cos(2 * math.pi * xr / wavelength)
        bank.append(g / np.abs(g).max())
    return np.stack(bank)


@dataclass
class PredictionOutput:
    classes: Tensor    # (N, |C|, U, V) occupancy probabilities
    offsets: Tensor    # (N, 2, U, V) in [-0.5, 0.5]
    logits: Tensor     # (N, |C|+2, U, V) raw decoder output

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.classes.data, self.offsets.data], axis=1)


# ---------------------------------------------------------------- functional blocks

def cnn_block(x: Tensor, p: dict, pool: bool, training: bool) -> Tensor:
    """conv3x3 -> norm -> ReLU -> optional 2x2 max pool."""
    y = T.conv2d(x, p["w"], p["b"], padding=1)
    y = T.batch_norm2d(y, p["gamma"], p["beta"], p["mean"], p["var"], training=training)
    y = T.relu(y)
    if pool:
        y, _ = T.max_pool2d(y, 2, 2)
    return y


def gabor_conv(x: Tensor, w: Tensor, b: Tensor | None, bank: np.ndarray | None) -> Tensor:
    """Convolution whose learned kernel is modulated by each fixed Gabor filter, max over orientations."""
    pad = w.shape[-1] // 2
    if bank is None:
        return T.conv2d(x, w, b, padding=pad)
    n_or, c_out = len(bank), w.shape[0]
    # all orientations in one convolution, then a max over the orientation groups
    mod = T.mul(T.reshape(w, (1,) + w.shape), Tensor(bank[:, None, None], dtype=w.dtype))
    stacked = T.reshape(mod, (n_or * c_out,) + w.shape[1:])
    bias = None if b is None else T.concat([b] * n_or)
    y = T.conv2d(x, stacked, bias, padding=pad)
    if n_or == 1:
        return y
    return T.maximum([T.narrow(y, 0, r * c_out, c_out) for r in range(n_or)])


def attention_block(x: Tensor, p: dict, dilations: Sequence[int], keep: list | None = None) -> Tensor:
    """Sum of dilated-conv branches weighted by per-pixel softmax attention over branches."""
    k = p["wa"].shape[-1]
    weights = T.softmax_channels(T.conv2d(x, p["wa"], p["ba"], padding=k // 2))
    if keep is not None:
        keep.append(weights.data)
    out = None
    for i, d in enumerate(dilations):
        branch = T.conv2d(x, p["w"][i], p["b"][i], padding=d, dilation=d)
        term = T.mul(branch, T.narrow(weights, 0, i, 1))
        out = term if out is None else T.add(out, term)
    return out


def conv_lstm_sequence(xs: Sequence[Tensor], w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Run a ConvLSTM over ``xs`` from a zero state; returns the final (h, c).

    Same arithmetic as :func:`caspnet.tensor.conv_lstm_step` but with the input and hidden
    halves of the kernel applied separately so the zero initial state costs nothing.
    """
    cx = xs[0].shape[0]
    ch = w.shape[0] // 4
    k = w.shape[-1]
    wx = T.narrow(w, 1, 0, cx)
    wh = T.narrow(w, 1, cx, ch)
    h = c = None
    for x in xs:
        gates = T.conv2d(x, wx, b, padding=k // 2)
        if h is not None:
            gates = T.add(gates, T.conv2d(h, wh, None, padding=k // 2))
        h, c = T.lstm_cell(gates, c)
    return h, c


def residual_upsample(x: Tensor, p: dict) -> Tensor:
    """Bilinear x2 + 1x1 projection added to a stride-2 transposed convolution."""
    bil = T.conv2d(T.bilinear_upsample2x(x), p["w_proj"], p["b_proj"])
    tr = T.conv_transpose2d(x, p["w_t"], p["b_t"], stride=2, padding=1)
    return T.add(bil, tr)


def inception_residual(x: Tensor, p: dict) -> Tensor:
    """Parallel (1,1), (7,1), (1,7), (3,3) convolutions, concatenated, projected, added to x, ReLU."""
    branches = [
        T.conv2d(x, p["w1"], p["b1"]),
        T.conv2d(x, p["w71"], p["b71"], padding=(3, 0)),
        T.conv2d(x, p["w17"], p["b17"], padding=(0, 3)),
        T.conv2d(x, p["w33"], p["b33"], padding=1),
    ]
    y = T.conv2d(T.concat(branches), p["w_proj"], p["b_proj"])
    return T.relu(T.add(x, y))


# ---------------------------------------------------------------- model

class CaspNet:
    """The full network with a flat registry of named parameters."""

    def __init__(self, cfg: CaspNetConfig):
        self.cfg = cfg
        self.params: dict[str, Parameter] = {}
        self._rng = np.random.default_rng(cfg.seed)
        self.bank = gabor_bank(cfg.gabor_kernel, cfg.gabor_orientations) if cfg.gabor_enabled else None
        self.last_attention: list[np.ndarray] = []
        ch = cfg.channels
        L = cfg.pyramid_levels
        n_in = len(INPUT_CHANNELS)

        self.traj = [self._cnn(f"traj/block{l}", ch[l], n_in if l == 0 else ch[l - 1]) for l in range(L)]

        gk = cfg.gabor_kernel
        self.gabor = [self._conv_bn(f"map/gabor{i}", ch[0], 3 if i == 0 else ch[0], gk) for i in range(2)]
        self.map_blocks = [None] + [self._cnn(f"map/block{l}", ch[l], ch[l - 1]) for l in range(1, L)]

        self.skip_lstm = []
        self.attention = []
        for l in range(L):
            c = ch[l]
            w, b = self._conv(f"skip{l}/lstm", 4 * c, 2 * c, 3)
            self.skip_lstm.append((w, b))
            ka = cfg.attention_kernel
            att = {"w": [], "b": []}
            for i, d in enumerate(cfg.dilations):
                wi, bi = self._conv(f"skip{l}/att/branch{i}_d{d}", c, c, 3)
                att["w"].append(wi)
                att["b"].append(bi)
            att["wa"], att["ba"] = self._conv(f"skip{l}/att/weights", len(cfg.dilations), c, ka)
            self.attention.append(att)

        self.up = {}
        self.incep = {}
        for l in range(L - 2, -1, -1):
            c_in = 2 * ch[L - 1] if l == L - 2 else 3 * ch[l + 1]
            up = {}
            up["w_proj"], up["b_proj"] = self._conv(f"dec/up{l}/proj", ch[l], c_in, 1)
            up["w_t"] = self._param(f"dec/up{l}/tconv.w", (c_in, ch[l], 4, 4), fan_in=c_in * 4)
            up["b_t"] = self._param(f"dec/up{l}/tconv.b", (ch[l],), init="zeros")
            self.up[l] = up
            self.incep[l] = self._inception(f"dec/incep{l}", 3 * ch[l])
        if L == 1:
            self.incep[0] = self._inception("dec/incep0", 2 * ch[0])
        self.dec_in = 2 * ch[0] if L == 1 else 3 * ch[0]
        self.dec_hidden = ch[0]
        self.out_lstm = self._conv("dec/out_lstm", 4 * self.dec_hidden, self.dec_in + self.dec_hidden, 3)
        # per-step head: 3x3 conv + ReLU, then 1x1 to class logits and offsets
        self.head_hidden = 2 * self.dec_hidden
        self.head_mid = self._conv("dec/head_mid", self.head_hidden, self.dec_hidden, 3)
        self.head = self._conv("dec/head", cfg.n_out, self.head_hidden, 1)
        # start from a sparse occupancy prior instead of p = 0.5 everywhere
        self.head[1].data[:len(cfg.classes)] = -math.log((1 - HEAD_PRIOR) / HEAD_PRIOR)

    # -- parameter construction
    def _param(self, name, shape, fan_in=None, init="he", trainable=True) -> Parameter:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name}")
        dtype = T.default_dtype()
        if init == "he":
            bound = math.sqrt(6.0 / fan_in)
            data = self._rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(init)
        p = Parameter(name, data.astype(dtype), trainable=trainable)
        self.params[name] = p
        return p

    def _conv(self, name, c_out, c_in, kh, kw=None):
        kw = kw or kh
        w = self._param(f"{name}.w", (c_out, c_in, kh, kw), fan_in=c_in * kh * kw)
        b = self._param(f"{name}.b", (c_out,), init="zeros")
        return w, b

    def _bn(self, name, c) -> dict:
        return {"gamma": self._param(f"{name}.gamma", (c,), init="ones"),
                "beta": self._param(f"{name}.beta", (c,), init="zeros"),
                "mean": self._param(f"{name}.running_mean", (c,), init="zeros", trainable=False),
                "var": self._param(f"{name}.running_var", (c,), init="ones", trainable=False)}

    def _conv_bn(self, name, c_out, c_in, k) -> dict:
        # no conv bias: the normalization's beta absorbs it
        w = self._param(f"{name}/conv.w", (c_out, c_in, k, k), fan_in=c_in * k * k)
        return {"w": w, "b": None, **self._bn(f"{name}/norm", c_out)}

    def _cnn(self, name, c_out, c_in) -> dict:
        return self._conv_bn(name, c_out, c_in, 3)

    def _inception(self, name, c) -> dict:
        nb = max(c // 4, 2)
        p = {}
        p["w1"], p["b1"] = self._conv(f"{name}/b1x1", nb, c, 1)
        p["w71"], p["b71"] = self._conv(f"{name}/b7x1", nb, c, 7, 1)
        p["w17"], p["b17"] = self._conv(f"{name}/b1x7", nb, c, 1, 7)
        p["w33"], p["b33"] = self._conv(f"{name}/b3x3", nb, c, 3)
        p["w_proj"], p["b_proj"] = self._conv(f"{name}/proj", c, 4 * nb, 1)
        return p

    # -- registry
    def parameters(self, trainable_only: bool = False) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable or not trainable_only]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = [n for n in self.params if n not in tensors]
        if strict and missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in self.params.items():
            if name in tensors:
                arr = tensors[name]
                if arr.shape != p.data.shape:
                    raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
                p.data = np.array(arr, dtype=p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward pieces
    def trajectory_encoder(self, grids, training: bool = False) -> list[list[Tensor]]:
        feats = []
        for m in range(grids.shape[0]):
            x = Tensor(np.asarray(grids[m]), dtype=T.default_dtype())
            levels = []
            for l, p in enumerate(self.traj):
                x = cnn_block(x, p, pool=l > 0, training=training)
                levels.append(x)
            feats.append(levels)
        return feats

    def map_encoder(self, image, training: bool = False) -> list[Tensor]:
        x = Tensor(np.asarray(image), dtype=T.default_dtype())
        for p in self.gabor:
            x = gabor_conv(x, p["w"], p["b"], self.bank)
            x = T.batch_norm2d(x, p["gamma"], p["beta"], p["mean"], p["var"], training=training)
            x = T.relu(x)
        levels = [x]
        if self.cfg.pyramid_levels > 1:
            x, _ = T.max_pool2d(x)
            for l in range(1, self.cfg.pyramid_levels):
                # the first CNN block follows the pooling that closes the Gabor stage
                x = cnn_block(x, self.map_blocks[l], pool=l > 1, training=training)
                levels.append(x)
        return levels

    def skip_connection(self, level: int, step_feats: Sequence[Tensor], map_feat: Tensor) -> Tensor:
        w, b = self.skip_lstm[level]
        h, _ = conv_lstm_sequence(step_feats, w, b)
        att = attention_block(h, self.attention[level], self.cfg.dilations, keep=self.last_attention)
        return T.concat([att, map_feat])

    def decoder(self, fused: Sequence[Tensor]) -> Tensor:
        L = self.cfg.pyramid_levels
        x = fused[L - 1]
        if L == 1:
            x = inception_residual(x, self.incep[0])
        for l in range(L - 2, -1, -1):
            x = residual_upsample(x, self.up[l])
            x = T.concat([x, fused[l]])
            x = inception_residual(x, self.incep[l])
        w, b = self.out_lstm
        wm, bm = self.head_mid
        wh_, bh_ = self.head
        wx = T.narrow(w, 1, 0, self.dec_in)
        wh = T.narrow(w, 1, self.dec_in, self.dec_hidden)
        x_gates = T.conv2d(x, wx, b, padding=1)
        h = c = None
        outs = []
        for _ in range(self.cfg.N):
            gates = x_gates if h is None else T.add(x_gates, T.conv2d(h, wh, None, padding=1))
            h, c = T.lstm_cell(gates, c)
            outs.append(T.conv2d(T.relu(T.conv2d(h, wm, bm, padding=1)), wh_, bh_))
        return T.stack(outs)

    def forward(self, grids, image, training: bool = False) -> PredictionOutput:
        cfg = self.cfg
        grids = np.asarray(grids)
        image = np.asarray(image)
        if grids.shape != (cfg.M, len(INPUT_CHANNELS), cfg.U, cfg.V):
            raise ValueError(f"input grids {grids.shape} do not match config {(cfg.M, 7, cfg.U, cfg.V)}")
        if image.shape != (3, cfg.U, cfg.V):
            raise ValueError(f"map image {image.shape} does not match config {(3, cfg.U, cfg.V)}")
        self.last_attention = []
        traj = self.trajectory_encoder(grids, training)
        maps = self.map_encoder(image, training)
        fused = [self.skip_connection(l, [traj[m][l] for m in range(cfg.M)], maps[l])
                 for l in range(cfg.pyramid_levels)]
        logits = self.decoder(fused)
        nc = len(cfg.classes)
        probs = T.sigmoid(T.narrow(logits, 1, 0, nc))
        offsets = T.scale(T.tanh(T.narrow(logits, 1, nc, 2)), 0.5)
        return PredictionOutput(probs, offsets, logits)

    __call__ = forward
