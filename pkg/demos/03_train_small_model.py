"""Train a small segmenter on synthetic scenes and plot its progress.

This is a scaled-down run (a few minutes on a laptop CPU); the full desk
protocol lives in the acceptance suite and the CLI.  Artifacts: a loss/IoU
curve and a panel of validation overlays (TP green, FP red, FN blue).

Run:  python demos/03_train_small_model.py [epochs]
"""

import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from glasseg.data import SceneSpec, SyntheticGlassDataset, render_rgb
from glasseg.decoder import binarize
from glasseg.metrics import MetricConfig, evaluate_dataset, render_overlay
from glasseg.model import DecoderConfig, GlassSegmenter
from glasseg.backbones import LearnedBackboneConfig, GeneralBackboneConfig
from glasseg.train import TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 6

spec = SceneSpec(canvas_size=64)
train_set = SyntheticGlassDataset(128, base_seed=11, spec=spec)
val_set = SyntheticGlassDataset(32, base_seed=22, spec=spec)

model = GlassSegmenter(
    variant="full",
    learned_cfg=LearnedBackboneConfig(stage_channels=(16, 32, 64, 64)),
    general_cfg=GeneralBackboneConfig(embed_dim=32, num_blocks=4,
                                      tap_indices=(1, 2, 3, 4)),
    decoder_cfg=DecoderConfig(embed_dim=32, n_queries=8, n_layers=3),
    seed=0,
)
cfg = TrainConfig(epochs=epochs, batch_size=8, warmup_steps=20, seed=0,
                  image_side=64)
history, best = train(model, train_set, val_set, cfg,
                      log=lambda m: print(m, flush=True))

fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
steps, losses, lrs = zip(*history.steps)
ax1.plot(steps, losses, linewidth=0.8)
ax1.set_xlabel("step")
ax1.set_ylabel("loss")
ax1.set_title("training loss")
ep, iou_vals = zip(*[(e + 1, i) for e, i, *_ in history.epochs])
ax2.plot(ep, iou_vals, "o-")
ax2.set_xlabel("epoch")
ax2.set_ylabel("val IoU")
ax2.set_title("validation IoU")
fig.tight_layout()
fig.savefig("demo_training_curve.png", dpi=120)
print("wrote demo_training_curve.png")

report = evaluate_dataset(model, val_set, MetricConfig(), side=64)
print(f"final: iou={report.iou:.3f} f_beta={report.f_beta:.3f} "
      f"mae={report.mae:.3f} ber={report.ber:.2f}")

panels = []
for i in range(6):
    sample = val_set[i]
    conf = model.predict(sample.image[None])[0]
    overlay = render_overlay(render_rgb(sample).astype(np.float64),
                             binarize(conf), sample.mask)
    panels.append(overlay)
Image.fromarray(np.concatenate(panels, axis=1)).save("demo_overlays.png")
print("wrote demo_overlays.png (TP green / FP red / FN blue)")
