"""Building blocks for the view-transformation and segmentation networks.

Feature maps are batched ``B×C×H×W`` tensors.  Parameters live as
attributes on :class:`Module` objects and are addressed by dotted
hierarchical names (``layers.0.ffn_q.down.weight``).
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import ShapeError, Tensor


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != parameter shape {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(T.default_dtype())
    return Tensor(data, requires_grad=True)


def zeros_param(shape: tuple[int, ...], value: float = 0.0) -> Tensor:
    return Tensor(np.full(shape, value, dtype=T.default_dtype()), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int | None = None, bias: bool = True):
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        self.weight = uniform_init(rng, (cout, cin, k, k), cin * k * k)
        self.bias = zeros_param((cout,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    """Stride-2 upsampling with ``k=4, pad=1`` by default (exact doubling)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, k: int = 4, stride: int = 2, pad: int = 1):
        self.stride, self.pad = stride, pad
        # fan-in of a transposed conv: each output sees cin * (k/stride)^2 inputs
        self.weight = uniform_init(rng, (cin, cout, k, k), max(1, cin * (k // stride) ** 2))
        self.bias = zeros_param((cout,))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.pad)


class LayerNorm2d(Module):
    """Layer norm over the channel axis of a ``B×C×H×W`` map, per pixel."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = zeros_param((channels,), 1.0)
        self.beta = zeros_param((channels,))

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, axis=1, eps=self.eps)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic ``softmax(q kᵀ / sqrt(d_k))`` for token matrices ``(..., n, d_k)``."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    scores = T.matmul(q, T.transpose(k, _swap_last(k.ndim))) * (1.0 / math.sqrt(q.shape[-1]))
    return T.softmax(scores, axis=-1)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, record: list | None = None) -> Tensor:
    """``softmax(QKᵀ/√d_k) V`` over token matrices; leading axes are batch axes."""
    q, k, v = T._wrap(q), T._wrap(k), T._wrap(v)
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key count {k.shape[-2]} != value count {v.shape[-2]}")
    w = attention_weights(q, k)
    if record is not None:
        record.append(w.data)
    return T.matmul(w, v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return T.transpose(T.reshape(x, (b, c, h * w)), (0, 2, 1))


def from_tokens(tokens: Tensor, h: int, w: int) -> Tensor:
    b, n, c = tokens.shape
    if n != h * w:
        raise ShapeError(f"{n} tokens cannot form a {h}x{w} map")
    return T.reshape(T.transpose(tokens, (0, 2, 1)), (b, c, h, w))


def positional_grids(h: int, w: int, dtype=None) -> tuple[np.ndarray, np.ndarray]:
    """Normalised column (u) and row (v) coordinates in [0, 1]; a length-1 axis maps to 0."""
    dtype = dtype or T.default_dtype()
    cols = np.arange(w, dtype=np.float64) / (w - 1) if w > 1 else np.zeros(w)
    rows = np.arange(h, dtype=np.float64) / (h - 1) if h > 1 else np.zeros(h)
    u = np.broadcast_to(cols[None, :], (h, w)).astype(dtype)
    v = np.broadcast_to(rows[:, None], (h, w)).astype(dtype)
    return u, v


def attach_positions(f: Tensor, mode: str = "modulate") -> Tensor:
    """Positional lifting of an encoder map.

    ``modulate`` gives channels ``[f, f*u, f*v]``; ``concat`` gives ``[f, u, v]``.
    """
    b, c, h, w = f.shape
    u, v = positional_grids(h, w, f.dtype)
    if mode == "modulate":
        return T.concat([f, f * u[None, None], f * v[None, None]], axis=1)
    if mode == "concat":
        grid = np.broadcast_to(np.stack([u, v])[None], (b, 2, h, w)).copy()
        return T.concat([f, Tensor(grid)], axis=1)
    raise ValueError(f"unknown positional mode {mode!r}")


def lifted_channels(enc_channels: int, mode: str) -> int:
    return 3 * enc_channels if mode == "modulate" else enc_channels + 2


# ---------------------------------------------------------------------------
# encoders / decoder / feed-forward blocks
# ---------------------------------------------------------------------------

class Encoder(Module):
    """Strided convolutional encoder reducing H, W by ``downsample`` (a power of two)."""

    def __init__(self, cin: int, channels: int, downsample: int, rng: np.random.Generator, alpha: float = 0.2):
        n_down = int(round(math.log2(downsample)))
        if 2 ** n_down != downsample or n_down < 1:
            raise ValueError(f"downsample factor must be a power of two >= 2, got {downsample}")
        self.alpha = alpha
        self.convs = [Conv2d(cin if i == 0 else channels, channels, 4, rng, stride=2, pad=1)
                      for i in range(n_down)]
        self.out = Conv2d(channels, channels, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = T.leaky_relu(conv(x), self.alpha)
        return self.out(x)


class Decoder(Module):
    """Transposed-convolution upsampler back to image resolution, output clamped to [0, 1]."""

    def __init__(self, channels: int, upsample: int, rng: np.random.Generator, cout: int = 3, alpha: float = 0.2):
        n_up = int(round(math.log2(upsample)))
        self.alpha = alpha
        self.ups = [ConvTranspose2d(channels, channels, rng) for _ in range(n_up)]
        self.out = Conv2d(channels, cout, 3, rng)
        self.out.bias = zeros_param((cout,), 0.5)

    def forward(self, x: Tensor) -> Tensor:
        for up in self.ups:
            x = T.leaky_relu(up(x), self.alpha)
        return T.clamp(self.out(x), 0.0, 1.0)


class MiniUNet(Module):
    """One stride-2 down, one up, additive skip; layer norm after each conv."""

    def __init__(self, channels: int, rng: np.random.Generator, alpha: float = 0.2):
        self.alpha = alpha
        self.down = Conv2d(channels, channels, 4, rng, stride=2, pad=1)
        self.norm_down = LayerNorm2d(channels)
        self.up = ConvTranspose2d(channels, channels, rng)
        self.norm_up = LayerNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        h = T.leaky_relu(self.norm_down(self.down(x)), self.alpha)
        return self.norm_up(self.up(h)) + x


class ConvStack(Module):
    """``n`` stride-1 3×3 convolutions, leaky ReLU between them (and after the last if ``final_act``)."""

    def __init__(self, cin: int, cout: int, n: int, rng: np.random.Generator, final_act: bool, alpha: float = 0.2):
        self.alpha = alpha
        self.final_act = final_act
        self.convs = [Conv2d(cin if i == 0 else cout, cout, 3, rng) for i in range(n)]

    def forward(self, x: Tensor) -> Tensor:
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < last or self.final_act:
                x = T.leaky_relu(x, self.alpha)
        return x


class AttentionLayer(Module):
    """One transport layer: updates queries and keys, moves values by attention.

    With ``use_attention=False`` the attention op is replaced by a 3×3
    convolution over ``[Q, K, VW]`` (the no-attention ablation); every other
    parameter is unchanged.
    """

    def __init__(self, qk_channels: int, v_channels: int, rng: np.random.Generator,
                 use_attention: bool = True, alpha: float = 0.2):
        self.use_attention = use_attention
        self.ffn_q = MiniUNet(qk_channels, rng, alpha)
        self.ffn_k = MiniUNet(qk_channels, rng, alpha)
        self.w_value = Conv2d(v_channels, v_channels, 1, rng)
        self.ffn_v1 = ConvStack(v_channels, v_channels, 1, rng, final_act=True, alpha=alpha)
        self.ffn_v2 = ConvStack(v_channels, v_channels, 2, rng, final_act=False, alpha=alpha)
        if not use_attention:
            self.mix = Conv2d(2 * qk_channels + v_channels, v_channels, 3, rng)

    def transport(self, q: Tensor, k: Tensor, vw: Tensor, record: list | None = None) -> Tensor:
        if q.shape[2:] != k.shape[2:] or k.shape[2:] != vw.shape[2:]:
            raise ShapeError(f"feature maps disagree in spatial size: {q.shape}, {k.shape}, {vw.shape}")
        if not self.use_attention:
            return self.mix(T.concat([q, k, vw], axis=1))
        h, w = q.shape[2:]
        out = scaled_dot_attention(to_tokens(q), to_tokens(k), to_tokens(vw), record)
        return from_tokens(out, h, w)

    def forward(self, q: Tensor, k: Tensor, v: Tensor, record: list | None = None):
        if q.shape[1] != k.shape[1]:
            raise ShapeError(f"Q/K token widths differ: {q.shape[1]} vs {k.shape[1]}")
        q_next = self.ffn_q(q)
        k_next = self.ffn_k(k)
        v_hat = self.transport(q, k, self.w_value(v), record)
        v_bar = self.ffn_v1(v_hat) + v
        v_next = self.ffn_v2(v_bar) + v_bar
        return q_next, k_next, v_next
