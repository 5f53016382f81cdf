"""Render a grid of procedural glass scenes with their ground-truth masks.

The generator composites translucent panels over textured backgrounds;
optional specular streaks and opaque frames (excluded from the mask) supply
the visual cues that make glass detectable at all.  Every scene is a pure
function of its 64-bit seed.

Run:  python demos/01_synthetic_scenes.py [out.png]
"""

import sys

import numpy as np
from PIL import Image

from glasseg.data import SceneSpec, generate_scene, render_rgb

out_path = sys.argv[1] if len(sys.argv) > 1 else "demo_scenes.png"

rows = []
for seed in range(6):
    spec = SceneSpec(canvas_size=96, seed=seed * 7 + 1)
    sample = generate_scene(spec)
    rgb = np.rint(render_rgb(sample) * 255).astype(np.uint8)
    mask_rgb = np.stack([sample.mask * 255] * 3, axis=-1).astype(np.uint8)
    rows.append(np.concatenate([rgb, mask_rgb], axis=0))

grid = np.concatenate(rows, axis=1)
Image.fromarray(grid).save(out_path)
print(f"wrote {out_path}: top row scenes, bottom row masks")

# determinism: the same seed always yields the same pixels
a = generate_scene(SceneSpec(canvas_size=64, seed=123))
b = generate_scene(SceneSpec(canvas_size=64, seed=123))
assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
print("same seed -> bit-identical scene: OK")

# the hard case: a fully transparent panel is invisible yet still labeled
ghost = generate_scene(SceneSpec(canvas_size=64, seed=5, n_panels=(1, 1),
                                 transparency=(1.0, 1.0), reflection_prob=0.0,
                                 frame_prob=0.0))
print(f"fully transparent panel: {ghost.mask.sum()} labeled pixels, "
      "zero visual evidence")
