"""Walk through the dual-backbone feature flow shape by shape.

A trainable hierarchical encoder emits a 4-level pyramid at 1/4..1/32 of the
input; a frozen patch transformer supplies four hidden-state grids at the
patch scale, which trainable adapters resize to the matching pyramid levels;
per-scale squeeze-and-excitation reduction brings the concatenated channels
back to the learned widths.

Run:  python demos/02_dual_backbone_features.py
"""

import numpy as np

from glasseg import autodiff as ad
from glasseg.backbones import snapshot_params, freeze_check, params_hash
from glasseg.fusion import channel_mid
from glasseg.model import GlassSegmenter

model = GlassSegmenter(variant="full", seed=0)
total, trainable = model.count_params()
print(f"full model: {total:,} parameters ({trainable:,} trainable, "
      f"{total - trainable:,} frozen)")

image = np.random.default_rng(0).standard_normal((1, 3, 128, 128)).astype(np.float32)

with ad.no_grad():
    learned = model.learned(image)
    print("\nlearned pyramid (channels x height x width):")
    for level in learned:
        print(f"  1/{level.scale_denominator:<3} -> "
              f"{level.channels} x {level.height} x {level.width}")

    taps = model.extract_general(image)
    print("\nfrozen-backbone hidden states (all at the patch scale):")
    for i, fm in enumerate(taps):
        print(f"  tap {i}: {fm.channels} x {fm.height} x {fm.width} "
              f"(1/{fm.scale_denominator})")

    fused = model.fused_pyramid(image)
    print("\nfused pyramid (same widths as the learned backbone):")
    for level in fused:
        print(f"  1/{level.scale_denominator:<3} -> "
              f"{level.channels} x {level.height} x {level.width}")

print("\nstepwise channel reduction widths (c_in -> c_mid -> c_out):")
for level, tap in zip(learned, taps):
    c_in = level.channels + tap.channels
    print(f"  {c_in} -> {channel_mid(c_in, level.channels)} -> {level.channels}")

# the frozen weights never move and are identical across re-instantiations
before = model.frozen_state()
again = GlassSegmenter(variant="full", seed=41).frozen_state()
print(f"\nfrozen weights reproducible across builds: {freeze_check(before, again)}")
print(f"frozen parameter hash: {params_hash(before)[:16]}...")
