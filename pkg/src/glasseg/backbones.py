"""The two feature extractors of the dual-backbone and their alignment.

* :class:`LearnedBackbone` — a trainable hierarchical convolutional encoder
  emitting a 4-level pyramid at 1/4, 1/8, 1/16, 1/32 of the input resolution.
* :class:`GeneralBackbone` — a frozen patch transformer whose hidden states
  are tapped at evenly spaced depths; a stand-in for a large pretrained
  general-purpose encoder with the same interface (fixed-seed weights, never
  updated).
* :class:`ResizeAdapter` — trainable convolutional adapters that move the
  patch-grid hidden states to each pyramid scale.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (Conv2d, GroupNorm, LayerNorm, Linear, Module,
                     MultiHeadAttention, parameter, sinusoidal_positions_2d)
from .rng import philox

SCALES = (4, 8, 16, 32)

# Normalization constants applied to RGB in [0, 1] at train and test time.
IMAGE_MEAN = (0.5, 0.5, 0.5)
IMAGE_STD = (0.25, 0.25, 0.25)


class ShapeError(ValueError):
    """Raised when an input violates a spatial-divisibility precondition."""


@dataclass
class FeatureMap:
    """A feature grid tagged with the scale it lives at.

    ``values`` is (N, C, H_f, W_f); ``scale_denominator`` relates H_f, W_f to
    the source image size (H_f == image_height / scale_denominator).
    """

    values: Tensor
    scale_denominator: int

    def __post_init__(self):
        if not isinstance(self.values, Tensor):
            self.values = Tensor(self.values)
        if self.values.ndim != 4:
            raise ValueError(f"FeatureMap values must be 4-D, got {self.values.shape}")
        if self.scale_denominator not in SCALES:
            raise ValueError(f"unsupported scale denominator {self.scale_denominator}")

    @property
    def data(self) -> np.ndarray:
        return self.values.data

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]

    def validate(self, image_hw=None):
        if not np.all(np.isfinite(self.data)):
            raise ValueError("FeatureMap contains non-finite values")
        if image_hw is not None:
            eh = -(-image_hw[0] // self.scale_denominator)
            ew = -(-image_hw[1] // self.scale_denominator)
            if (self.height, self.width) != (eh, ew):
                raise ValueError(
                    f"scale-{self.scale_denominator} map is {self.height}x{self.width}, "
                    f"expected {eh}x{ew} for a {image_hw[0]}x{image_hw[1]} image")
        return self


@dataclass
class MultiScaleFeatures:
    """Ordered 4-level pyramid at scales 1/4, 1/8, 1/16, 1/32."""

    levels: list

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ValueError(f"expected 4 levels, got {len(self.levels)}")
        denoms = tuple(l.scale_denominator for l in self.levels)
        if denoms != SCALES:
            raise ValueError(f"levels must be at scales {SCALES}, got {denoms}")
        hs = {l.height * l.scale_denominator for l in self.levels}
        ws = {l.width * l.scale_denominator for l in self.levels}
        if len(hs) != 1 or len(ws) != 1:
            raise ValueError("levels imply inconsistent image sizes")

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    @property
    def channel_counts(self):
        return tuple(l.channels for l in self.levels)


@dataclass(frozen=True)
class LearnedBackboneConfig:
    stage_channels: tuple = (32, 64, 128, 256)
    blocks_per_stage: int = 1

    def __post_init__(self):
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            raise ValueError("stage_channels must be 4 positive integers")
        if list(self.stage_channels) != sorted(self.stage_channels):
            raise ValueError("stage_channels must be non-decreasing")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be positive")


def default_taps(num_blocks: int) -> tuple:
    """Evenly spaced hidden-state taps {D/4, D/2, 3D/4, D} for depth D."""
    if num_blocks % 4:
        raise ValueError("num_blocks must be divisible by 4 for default taps")
    q = num_blocks // 4
    return (q, 2 * q, 3 * q, 4 * q)


@dataclass(frozen=True)
class GeneralBackboneConfig:
    patch_size: int = 16
    embed_dim: int = 64
    num_blocks: int = 8
    tap_indices: tuple = None
    n_heads: int = 4
    seed: int = 310  # fixed: the frozen weights are part of the model identity

    def __post_init__(self):
        object.__setattr__(self, "tap_indices",
                           tuple(self.tap_indices) if self.tap_indices is not None
                           else default_taps(self.num_blocks))
        if len(self.tap_indices) != 4:
            raise ValueError("tap_indices must have 4 entries")
        if list(self.tap_indices) != sorted(set(self.tap_indices)):
            raise ValueError("tap_indices must be strictly increasing")
        if self.tap_indices[-1] != self.num_blocks:
            raise ValueError("last tap must be the final block")
        if min(self.tap_indices) < 1:
            raise ValueError("tap indices are 1-based block positions")


def check_image_batch(images, divisor=32):
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) image batch, got {arr.shape}")
    h, w = arr.shape[2], arr.shape[3]
    if h % divisor or w % divisor:
        raise ShapeError(f"image size {h}x{w} not divisible by {divisor}")
    return arr.shape


class ResidualUnit(Module):
    """Pre-activation residual unit: x + conv3x3(relu(gn(x)))."""

    def __init__(self, rng, channels, dtype=np.float32):
        self.norm = GroupNorm(channels, dtype=dtype)
        self.conv = Conv2d(rng, channels, channels, 3, padding=1, dtype=dtype)

    def forward(self, x):
        return x + self.conv(ad.relu(self.norm(x)))


class LearnedBackbone(Module):
    """Trainable hierarchical encoder: a two-conv stem to 1/4, then three
    stride-2 stages of pre-activation residual units."""

    def __init__(self, cfg: LearnedBackboneConfig, rng, dtype=np.float32):
        self.cfg = cfg
        ch = cfg.stage_channels
        mid = max(8, ch[0] // 2)
        self.stem_a = Conv2d(rng, 3, mid, 3, stride=2, padding=1, dtype=dtype)
        self.stem_norm = GroupNorm(mid, dtype=dtype)
        self.stem_b = Conv2d(rng, mid, ch[0], 3, stride=2, padding=1, dtype=dtype)
        self.downsamples = [Conv2d(rng, ch[i], ch[i + 1], 3, stride=2, padding=1, dtype=dtype)
                            for i in range(3)]
        self.stages = [[ResidualUnit(rng, c, dtype=dtype) for _ in range(cfg.blocks_per_stage)]
                       for c in ch]

    def forward(self, images) -> MultiScaleFeatures:
        check_image_batch(images)
        x = ad.as_tensor(images)
        levels = []
        for s in range(4):
            if s == 0:
                x = self.stem_b(ad.relu(self.stem_norm(self.stem_a(x))))
            else:
                x = self.downsamples[s - 1](x)
            for block in self.stages[s]:
                x = block(x)
            levels.append(FeatureMap(x, SCALES[s]))
        return MultiScaleFeatures(levels)

    def named_parameters(self, prefix=""):
        # explicit traversal: nested stage lists
        base = prefix + "." if prefix else ""
        yield from self.stem_a.named_parameters(base + "stem_a")
        yield from self.stem_norm.named_parameters(base + "stem_n")
        yield from self.stem_b.named_parameters(base + "stem_b")
        for i, d in enumerate(self.downsamples):
            yield from d.named_parameters(f"{base}down.{i}")
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                yield from block.named_parameters(f"{base}stage.{s}.{b}")


class TransformerBlock(Module):
    """Pre-LN transformer block (attention + GELU MLP)."""

    def __init__(self, rng, dim, n_heads, mlp_ratio=4, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(rng, dim, n_heads, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(rng, dim, dim * mlp_ratio, dtype=dtype, weight_std=0.02)
        self.fc2 = Linear(rng, dim * mlp_ratio, dim, dtype=dtype, weight_std=0.02)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        x = x + self.fc2(ad.gelu(self.fc1(self.norm2(x))))
        return x


class GeneralBackbone(Module):
    """Frozen patch transformer tapped at several depths.

    Weights are drawn once from a fixed-seed Philox stream and never updated;
    ``forward`` returns plain (constant) tensors, so no gradient ever reaches
    the weights.  A single global summary token participates in attention but
    is dropped before hidden states are reshaped to grids.
    """

    def __init__(self, cfg: GeneralBackboneConfig, dtype=np.float32):
        self.cfg = cfg
        rng = philox(cfg.seed)
        p, e = cfg.patch_size, cfg.embed_dim
        self.patch_embed = Conv2d(rng, 3, e, p, stride=p, dtype=dtype,
                                  weight_std=float(np.sqrt(2.0 / (3 * p * p))))
        self.global_token = parameter(rng, (1, 1, e), std=0.02, dtype=dtype)
        self.blocks = [TransformerBlock(rng, e, cfg.n_heads, dtype=dtype)
                       for _ in range(cfg.num_blocks)]
        self._dtype = dtype
        self.freeze()

    def forward(self, images) -> list:
        """Return one FeatureMap (scale == patch_size) per tap index."""
        cfg = self.cfg
        shape = check_image_batch(images, divisor=cfg.patch_size)
        n, _, h, w = shape
        gh, gw = h // cfg.patch_size, w // cfg.patch_size
        with ad.no_grad():
            x = self.patch_embed(ad.as_tensor(images))            # (N, E, gh, gw)
            tokens = ad.transpose(ad.reshape(x, (n, cfg.embed_dim, gh * gw)), (0, 2, 1))
            pos = sinusoidal_positions_2d(gh, gw, cfg.embed_dim, dtype=self._dtype)
            tokens = tokens + Tensor(pos)
            gtok = Tensor(np.broadcast_to(self.global_token.data, (n, 1, cfg.embed_dim)).copy())
            x = ad.concat([gtok, tokens], axis=1)
            taps = []
            for i, block in enumerate(self.blocks, start=1):
                x = block(x)
                if i in cfg.tap_indices:
                    grid = ad.transpose(x[:, 1:, :], (0, 2, 1))   # drop global token
                    grid = ad.reshape(grid, (n, cfg.embed_dim, gh, gw))
                    taps.append(FeatureMap(grid, cfg.patch_size))
        if len(taps) != 4:
            raise ValueError(f"tap indices {cfg.tap_indices} out of range for "
                             f"{cfg.num_blocks} blocks")
        return taps


class ResizeAdapter(Module):
    """Trainable conv adapter moving a patch-grid map to a pyramid scale.

    A 3x3 convolution runs at the source grid (stride 2 when downsampling to
    1/32), then bilinear interpolation reaches finer targets 1/4 and 1/8; the
    1/16 target keeps its resolution but still passes through the learned
    convolution.
    """

    def __init__(self, rng, channels, target_scale, source_scale=16, dtype=np.float32):
        if target_scale not in SCALES:
            raise ValueError(f"unsupported target scale {target_scale}")
        self.target_scale = target_scale
        self.source_scale = source_scale
        stride = 2 if target_scale == 2 * source_scale else 1
        self.conv = Conv2d(rng, channels, channels, 3, stride=stride, padding=1, dtype=dtype)

    def forward(self, hidden: FeatureMap) -> FeatureMap:
        if hidden.scale_denominator != self.source_scale:
            raise ValueError(
                f"adapter expects scale {self.source_scale}, got {hidden.scale_denominator}")
        out = self.conv(hidden.values)
        factor = self.source_scale / self.target_scale
        if factor > 1:
            out = ad.upsample_bilinear(out, int(hidden.height * factor),
                                       int(hidden.width * factor))
        return FeatureMap(out, self.target_scale)


# ---------------------------------------------------------------------------
# parameter snapshots / freeze verification
# ---------------------------------------------------------------------------

def snapshot_params(module: Module) -> dict:
    return {name: p.data.copy() for name, p in module.named_parameters()}

def freeze_check(params_before: dict, params_after: dict) -> bool:
    """True iff every parameter is bitwise identical between snapshots."""
    if params_before.keys() != params_after.keys():
        return False
    for name, before in params_before.items():
        after = params_after[name]
        if before.shape != after.shape or before.dtype != after.dtype:
            return False
        if not np.array_equal(before.view(np.uint8), after.view(np.uint8)):
            return False
    return True


def params_hash(params: dict) -> str:
    """Order-independent content hash of named parameter arrays."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(str(params[name].shape).encode())
        h.update(params[name].tobytes())
    return h.hexdigest()
