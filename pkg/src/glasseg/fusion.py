"""Per-scale fusion of the two backbones' features.

At each pyramid scale the learned features and the resized general features
are concatenated along channels, then reduced back to the learned backbone's
channel count by a residual squeeze-and-excitation reduction block.  The
reduction happens stepwise through an intermediate width

    c_mid = max(floor(c_in / 2), c_out)

so no single convolution collapses the channel dimension too abruptly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbones import SCALES, FeatureMap, MultiScaleFeatures, ResizeAdapter
from .layers import Conv2d, GroupNorm, Linear, Module


def channel_mid(c_in: int, c_out: int) -> int:
    """Intermediate width of the stepwise reduction: max(floor(c_in/2), c_out)."""
    if c_in < 1 or c_out < 1:
        raise ValueError(f"channel counts must be positive, got {c_in}, {c_out}")
    return max(c_in // 2, c_out)


@dataclass(frozen=True)
class ChannelReductionSpec:
    c_in: int
    c_out: int

    def __post_init__(self):
        if self.c_out > self.c_in:
            raise ValueError(f"c_out {self.c_out} exceeds c_in {self.c_in}")
        mid = self.c_mid
        if not (self.c_out <= mid <= max(self.c_in, self.c_out)):
            raise AssertionError("c_mid out of bounds")  # impossible by construction

    @property
    def c_mid(self) -> int:
        return channel_mid(self.c_in, self.c_out)


@dataclass(frozen=True)
class SEConfig:
    reduction_ratio: int = 8

    def __post_init__(self):
        if self.reduction_ratio < 1:
            raise ValueError("reduction_ratio must be positive")

    def bottleneck(self, channels: int) -> int:
        return max(1, channels // self.reduction_ratio)


def concat_features(learned: FeatureMap, adapted: FeatureMap) -> FeatureMap:
    """Channel-concatenate two maps; the learned channels lead."""
    if learned.scale_denominator != adapted.scale_denominator:
        raise ValueError(f"scale mismatch: {learned.scale_denominator} vs "
                         f"{adapted.scale_denominator}")
    if (learned.height, learned.width) != (adapted.height, adapted.width):
        raise ValueError(f"spatial mismatch: {learned.height}x{learned.width} vs "
                         f"{adapted.height}x{adapted.width}")
    values = ad.concat([learned.values, adapted.values], axis=1)
    return FeatureMap(values, learned.scale_denominator)


class SEGate(Module):
    """Squeeze-and-excitation channel gate.

    Global average pool per channel, a two-layer bottleneck (ReLU between,
    sigmoid after) and the resulting per-channel gate in (0, 1).
    """

    def __init__(self, rng, channels, cfg: SEConfig, dtype=np.float32):
        hidden = cfg.bottleneck(channels)
        self.fc1 = Linear(rng, channels, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, channels, dtype=dtype)

    def forward(self, x) -> Tensor:
        """x: (N, C, H, W) -> gates (N, C)."""
        squeezed = ad.tmean(x, axis=(2, 3))
        return ad.sigmoid(self.fc2(ad.relu(self.fc1(squeezed))))


class SEChannelReduction(Module):
    """Residual SE block that reduces channels in two convolutional steps.

    Main path: conv3x3 (c_in -> c_mid), norm, relu; conv3x3 (c_mid -> c_out),
    norm, relu; SE gate applied to the result.  A 1x1 projection of the input
    is added as the residual.  Normalization and a post-addition activation
    are toggleable to allow fidelity experiments.
    """

    def __init__(self, rng, c_in, c_out, se_cfg: SEConfig, dtype=np.float32,
                 use_norm=True, final_activation=False):
        spec = ChannelReductionSpec(c_in, c_out)
        self.spec = spec
        self.conv1 = Conv2d(rng, c_in, spec.c_mid, 3, padding=1, dtype=dtype)
        self.conv2 = Conv2d(rng, spec.c_mid, c_out, 3, padding=1, dtype=dtype)
        self.norm1 = GroupNorm(spec.c_mid, dtype=dtype) if use_norm else None
        self.norm2 = GroupNorm(c_out, dtype=dtype) if use_norm else None
        self.se = SEGate(rng, c_out, se_cfg, dtype=dtype)
        self.proj = Conv2d(rng, c_in, c_out, 1, dtype=dtype)
        self.final_activation = final_activation

    def forward(self, feature: FeatureMap) -> FeatureMap:
        x = feature.values
        h = self.conv1(x)
        if self.norm1 is not None:
            h = self.norm1(h)
        h = ad.relu(h)
        h = self.conv2(h)
        if self.norm2 is not None:
            h = self.norm2(h)
        h = ad.relu(h)
        gates = self.se(h)
        n, c = gates.shape
        h = h * ad.reshape(gates, (n, c, 1, 1))
        out = h + self.proj(x)
        if self.final_activation:
            out = ad.relu(out)
        return FeatureMap(out, feature.scale_denominator)


class Conv1x1Reduction(Module):
    """Ablation replacement: a single 1x1 convolution straight to c_out."""

    def __init__(self, rng, c_in, c_out, dtype=np.float32):
        if c_out > c_in:
            raise ValueError(f"c_out {c_out} exceeds c_in {c_in}")
        self.conv = Conv2d(rng, c_in, c_out, 1, dtype=dtype)

    def forward(self, feature: FeatureMap) -> FeatureMap:
        return FeatureMap(self.conv(feature.values), feature.scale_denominator)


class DualFusion(Module):
    """Adapters + per-scale reduction blocks for the full dual-backbone path.

    The shallowest general-backbone tap pairs with the finest pyramid level
    (1/4) and the deepest with the coarsest (1/32).
    """

    def __init__(self, rng, learned_channels, general_dim, se_cfg: SEConfig,
                 reduction="se", source_scale=16, dtype=np.float32, use_norm=True,
                 final_activation=False):
        if reduction not in ("se", "conv1x1"):
            raise ValueError(f"unknown reduction mode {reduction!r}")
        self.adapters = [ResizeAdapter(rng, general_dim, s, source_scale, dtype=dtype)
                         for s in SCALES]
        # per-branch normalization balances the two feature sources before
        # concatenation (the frozen features' scale is arbitrary)
        self.learned_norms = [GroupNorm(c, dtype=dtype) for c in learned_channels]
        self.general_norms = [GroupNorm(general_dim, dtype=dtype) for _ in SCALES]
        self.reductions = []
        for ch in learned_channels:
            c_in = ch + general_dim
            if reduction == "se":
                self.reductions.append(SEChannelReduction(
                    rng, c_in, ch, se_cfg, dtype=dtype, use_norm=use_norm,
                    final_activation=final_activation))
            else:
                self.reductions.append(Conv1x1Reduction(rng, c_in, ch, dtype=dtype))

    def forward(self, learned: MultiScaleFeatures, general_states) -> MultiScaleFeatures:
        if len(general_states) != 4:
            raise ValueError(f"expected 4 general feature maps, got {len(general_states)}")
        out = []
        for i, (adapter, reduce_block, level, hidden) in enumerate(zip(
                self.adapters, self.reductions, learned, general_states)):
            adapted = adapter(hidden)
            level = FeatureMap(self.learned_norms[i](level.values),
                               level.scale_denominator)
            adapted = FeatureMap(self.general_norms[i](adapted.values),
                                 adapted.scale_denominator)
            merged = concat_features(level, adapted)
            out.append(reduce_block(merged))
        return MultiScaleFeatures(out)
