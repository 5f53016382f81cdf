"""Neural network building blocks on top of the autodiff engine.

Modules hold their parameters as ``Tensor`` attributes; ``named_parameters``
walks the attribute tree in deterministic (construction) order, which the
checkpoint format and the freeze checks rely on.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def parameter(rng, shape, std=None, fan_in=None, dtype=np.float32, trainable=True):
    """Sample an initial weight tensor. He-style scaling when ``fan_in`` given."""
    if std is None:
        std = math.sqrt(2.0 / fan_in) if fan_in else 0.02
    data = (rng.standard_normal(shape) * std).astype(dtype)
    return Tensor(data, requires_grad=trainable)


def zeros_parameter(shape, dtype=np.float32, trainable=True):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=trainable)


def ones_parameter(shape, dtype=np.float32, trainable=True):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=trainable)


class Module:
    """Base class providing parameter discovery and freezing."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def freeze(self):
        """Permanently exclude all parameters from gradient updates."""
        for p in self.parameters():
            p.requires_grad = False
        return self

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state dict mismatch: missing={missing}, unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, rng, in_channels, out_channels, kernel_size, stride=1,
                 padding=0, bias=True, dtype=np.float32, weight_std=None):
        k = kernel_size
        fan_in = in_channels * k * k
        self.weight = parameter(rng, (out_channels, in_channels, k, k),
                                std=weight_std, fan_in=None if weight_std else fan_in,
                                dtype=dtype)
        self.bias = zeros_parameter((out_channels,), dtype=dtype) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride,
                         padding=self.padding)


class Linear(Module):
    def __init__(self, rng, in_features, out_features, bias=True,
                 dtype=np.float32, weight_std=None):
        self.weight = parameter(rng, (in_features, out_features),
                                std=weight_std, fan_in=None if weight_std else in_features,
                                dtype=dtype)
        self.bias = zeros_parameter((out_features,), dtype=dtype) if bias else None
        self.out_features = out_features

    def forward(self, x):
        shape = x.shape
        if x.ndim > 2:
            # one large GEMM instead of a batch of small ones
            x = ad.reshape(x, (-1, shape[-1]))
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        if len(shape) > 2:
            out = ad.reshape(out, shape[:-1] + (self.out_features,))
        return out


def norm_groups(channels: int) -> int:
    """Largest group count in {8, 4, 2, 1} dividing ``channels``."""
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class GroupNorm(Module):
    def __init__(self, channels, groups=None, eps=1e-5, dtype=np.float32):
        self.gamma = ones_parameter((channels,), dtype=dtype)
        self.beta = zeros_parameter((channels,), dtype=dtype)
        self.groups = groups if groups is not None else norm_groups(channels)
        self.eps = eps

    def forward(self, x):
        return ad.group_norm(x, self.gamma, self.beta, self.groups, eps=self.eps)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        self.gamma = ones_parameter((dim,), dtype=dtype)
        self.beta = zeros_parameter((dim,), dtype=dtype)
        self.eps = eps

    def forward(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class MLP(Module):
    """Stack of linear layers with ReLU between (none after the last)."""

    def __init__(self, rng, in_dim, hidden_dim, out_dim, n_layers, dtype=np.float32):
        dims = [in_dim] + [hidden_dim] * (n_layers - 1) + [out_dim]
        self.layers = [Linear(rng, dims[i], dims[i + 1], dtype=dtype)
                       for i in range(n_layers)]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


def _split_heads(x, n_heads):
    # (N, T, E) -> (N, h, T, E/h)
    n, t, e = x.shape
    return ad.transpose(ad.reshape(x, (n, t, n_heads, e // n_heads)), (0, 2, 1, 3))


def _merge_heads(x):
    # (N, h, T, d) -> (N, T, E)
    n, h, t, d = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (n, t, h * d))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate query and key/value inputs."""

    def __init__(self, rng, dim, n_heads, dtype=np.float32, weight_std=0.02):
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by heads {n_heads}")
        self.q_proj = Linear(rng, dim, dim, dtype=dtype, weight_std=weight_std)
        self.k_proj = Linear(rng, dim, dim, dtype=dtype, weight_std=weight_std)
        self.v_proj = Linear(rng, dim, dim, dtype=dtype, weight_std=weight_std)
        self.out_proj = Linear(rng, dim, dim, dtype=dtype, weight_std=weight_std)
        self.n_heads = n_heads
        self.scale = 1.0 / math.sqrt(dim // n_heads)

    def forward(self, query, key, value):
        q = _split_heads(self.q_proj(query), self.n_heads)
        k = _split_heads(self.k_proj(key), self.n_heads)
        v = _split_heads(self.v_proj(value), self.n_heads)
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * self.scale
        attn = ad.softmax(scores, axis=-1)
        out = _merge_heads(ad.matmul(attn, v))
        return self.out_proj(out)


def sinusoidal_positions_2d(height: int, width: int, dim: int, dtype=np.float32):
    """Fixed 2-D sine/cosine positional encodings, shape (height*width, dim).

    Half the channels encode the row coordinate, half the column, each with
    interleaved sin/cos at geometrically spaced frequencies.
    """
    if dim % 4:
        raise ValueError("positional encoding dim must be divisible by 4")
    quarter = dim // 4
    freqs = np.exp(-math.log(10000.0) * np.arange(quarter) / max(quarter - 1, 1))
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    ys = ys.reshape(-1, 1) * freqs
    xs = xs.reshape(-1, 1) * freqs
    enc = np.concatenate([np.sin(ys), np.cos(ys), np.sin(xs), np.cos(xs)], axis=1)
    return enc.astype(dtype)


# ---------------------------------------------------------------------------
# plain-ndarray resizing (data pipeline; no gradients involved)
# ---------------------------------------------------------------------------

def bilinear_resize(array: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (..., H, W) array with half-pixel centers."""
    h, w = array.shape[-2:]
    ry = ad.linear_interp_matrix(h, out_h, array.dtype if array.dtype.kind == "f" else np.float32)
    rx = ad.linear_interp_matrix(w, out_w, ry.dtype)
    lead = array.shape[:-2]
    flat = array.reshape(-1, h, w).astype(ry.dtype, copy=False)
    out = ry @ flat @ rx.T
    return out.reshape(*lead, out_h, out_w)


def nearest_resize(array: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of a (..., H, W) array; preserves dtype."""
    h, w = array.shape[-2:]
    ys = np.minimum((np.arange(out_h) + 0.5) * (h / out_h), h - 1).astype(np.int64)
    xs = np.minimum((np.arange(out_w) + 0.5) * (w / out_w), w - 1).astype(np.int64)
    return array[..., ys[:, None], xs[None, :]]
