"""End-to-end segmenter assembly for the full architecture and its ablations.

A :class:`GlassSegmenter` owns whichever of the pieces its variant needs:

* ``full``          — learned + general backbones, SE channel reduction
* ``learned_only``  — learned backbone straight into the decoder
* ``general_only``  — frozen general backbone + adapters into the decoder
* ``general_small`` — full architecture with a smaller frozen backbone
* ``no_se``         — full architecture, reductions replaced by 1x1 convs
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbones import (SCALES, FeatureMap, GeneralBackbone,
                        GeneralBackboneConfig, LearnedBackbone,
                        LearnedBackboneConfig, MultiScaleFeatures,
                        ResizeAdapter, default_taps)
from .decoder import (MaskHead, PixelDecoder, QueryDecoder, QuerySet,
                      semantic_inference)
from .fusion import DualFusion, SEConfig
from .layers import Module
from .rng import philox

VARIANTS = ("full", "learned_only", "general_only", "general_small", "no_se")


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int = 64
    n_queries: int = 16
    n_layers: int = 3
    n_heads: int = 4

    def __post_init__(self):
        if min(self.embed_dim, self.n_queries, self.n_layers, self.n_heads) < 1:
            raise ValueError("decoder config values must be positive")


@dataclass(frozen=True)
class FusionSettings:
    reduction_ratio: int = 8
    se_reduction: str = "on"       # "on" | "conv1x1"
    use_norm: bool = True
    final_activation: bool = False


def small_general_config(cfg: GeneralBackboneConfig) -> GeneralBackboneConfig:
    """Halved-depth, halved-width frozen backbone for the small ablation."""
    blocks = max(4, cfg.num_blocks // 2)
    return replace(cfg, embed_dim=max(16, cfg.embed_dim // 2), num_blocks=blocks,
                   tap_indices=default_taps(blocks))


class GeneralOnlyNeck(Module):
    """Adapters bringing the four taps to pyramid scales, no fusion."""

    def __init__(self, rng, general_dim, source_scale, dtype):
        self.adapters = [ResizeAdapter(rng, general_dim, s, source_scale, dtype=dtype)
                         for s in SCALES]

    def forward(self, general_states) -> MultiScaleFeatures:
        return MultiScaleFeatures(
            [adapter(h) for adapter, h in zip(self.adapters, general_states)])


class GlassSegmenter(Module):
    """Dual-backbone glass segmenter producing per-pixel confidence."""

    def __init__(self, variant="full",
                 learned_cfg: LearnedBackboneConfig = LearnedBackboneConfig(),
                 general_cfg: GeneralBackboneConfig = GeneralBackboneConfig(),
                 decoder_cfg: DecoderConfig = DecoderConfig(),
                 fusion_cfg: FusionSettings = FusionSettings(),
                 seed: int = 0, dtype=np.float32):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.learned_cfg = learned_cfg
        self.decoder_cfg = decoder_cfg
        self.dtype = dtype
        rng = philox(seed, stream=1)

        if variant == "general_small":
            general_cfg = small_general_config(general_cfg)
        self.general_cfg = general_cfg

        self.learned = None
        self.general = None
        self.fusion = None
        self.neck = None

        if variant != "general_only":
            self.learned = LearnedBackbone(learned_cfg, rng, dtype=dtype)
        if variant != "learned_only":
            self.general = GeneralBackbone(general_cfg, dtype=dtype)

        se_cfg = SEConfig(fusion_cfg.reduction_ratio)
        if variant in ("full", "general_small", "no_se"):
            mode = "conv1x1" if (variant == "no_se"
                                 or fusion_cfg.se_reduction == "conv1x1") else "se"
            self.fusion = DualFusion(rng, learned_cfg.stage_channels,
                                     general_cfg.embed_dim, se_cfg, reduction=mode,
                                     source_scale=general_cfg.patch_size, dtype=dtype,
                                     use_norm=fusion_cfg.use_norm,
                                     final_activation=fusion_cfg.final_activation)
            pyramid_channels = learned_cfg.stage_channels
        elif variant == "learned_only":
            pyramid_channels = learned_cfg.stage_channels
        else:  # general_only
            self.neck = GeneralOnlyNeck(rng, general_cfg.embed_dim,
                                        general_cfg.patch_size, dtype)
            pyramid_channels = (general_cfg.embed_dim,) * 4

        self.pixel_decoder = PixelDecoder(rng, pyramid_channels,
                                          decoder_cfg.embed_dim, dtype=dtype)
        self.query_decoder = QueryDecoder(rng, decoder_cfg.embed_dim,
                                          decoder_cfg.n_queries, decoder_cfg.n_layers,
                                          decoder_cfg.n_heads, dtype=dtype)
        self.mask_head = MaskHead(rng, decoder_cfg.embed_dim, dtype=dtype)

    # -- feature extraction -------------------------------------------------

    def extract_general(self, images) -> list:
        """Frozen-backbone hidden states for ``images`` (constant tensors)."""
        if self.general is None:
            return None
        return self.general(images)

    def fused_pyramid(self, images, general_states=None) -> MultiScaleFeatures:
        """The pyramid the decoder consumes, per variant.

        ``general_states`` may carry precomputed frozen features (they do not
        depend on any trainable parameter, so callers can cache them).
        """
        if self.general is not None and general_states is None:
            general_states = self.extract_general(images)
        if self.variant == "learned_only":
            return self.learned(images)
        if self.variant == "general_only":
            return self.neck(general_states)
        return self.fusion(self.learned(images), general_states)

    # -- full forward passes --------------------------------------------------

    def forward(self, images, general_states=None):
        """Returns (QuerySet, mask_logits at 1/4 resolution)."""
        pyramid = self.fused_pyramid(images, general_states)
        pd = self.pixel_decoder(pyramid)
        queries = self.query_decoder(pd)
        mask_logits = self.mask_head(queries, pd)
        return queries, mask_logits

    def forward_train(self, images, general_states=None):
        """Forward pass with per-decoder-layer outputs for deep supervision.

        Returns a list of (QuerySet, mask_logits) pairs, final layer last.
        """
        pyramid = self.fused_pyramid(images, general_states)
        pd = self.pixel_decoder(pyramid)
        queries, intermediate = self.query_decoder(pd, return_intermediate=True)
        outputs = [(q, self.mask_head(q, pd)) for q in intermediate]
        outputs.append((queries, self.mask_head(queries, pd)))
        return outputs

    def predict(self, images, general_states=None) -> np.ndarray:
        """Glass confidence in [0, 1] at full input resolution, (N, H, W)."""
        arr = images.data if isinstance(images, Tensor) else np.asarray(images)
        with ad.no_grad():
            queries, mask_logits = self.forward(arr, general_states)
            return semantic_inference(queries, mask_logits,
                                      out_hw=(arr.shape[2], arr.shape[3]))

    # -- parameter bookkeeping ------------------------------------------------

    def frozen_parameters(self):
        return [p for p in self.parameters() if not p.requires_grad]

    def frozen_state(self) -> dict:
        if self.general is None:
            return {}
        return {f"general.{k}": v.data.copy()
                for k, v in self.general.named_parameters()}

    def count_params(self):
        """(total, trainable) parameter counts."""
        total = sum(p.data.size for p in self.parameters())
        trainable = sum(p.data.size for p in self.trainable_parameters())
        return total, trainable
