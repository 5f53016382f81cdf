"""The four segmentation metrics and reliability diagrams on toy inputs.

Everything reduces to pixel confusion counts; calibration bins pair mean
predicted confidence with the empirical glass frequency.

Run:  python demos/04_metrics_and_calibration.py
"""

import numpy as np

from glasseg.metrics import (ConfusionCounts, ber, calibration_curve, confusion,
                             f_beta, iou, mae)

rng = np.random.default_rng(3)

gt = np.zeros((32, 32), np.uint8)
gt[8:24, 10:26] = 1

print("prediction quality ladder (16x16 glass square ground truth):")
for label, shift in [("perfect", 0), ("2px off", 2), ("6px off", 6)]:
    pred = np.zeros_like(gt)
    pred[8 + shift:24 + shift, 10 + shift:26 + shift] = 1
    c = confusion(pred, gt)
    print(f"  {label:8s} iou={iou(c):.3f} f_beta={f_beta(c):.3f} "
          f"mae={mae(pred, gt):.4f} ber={ber(c):.2f}")

print("\ndegenerate conventions:")
empty = np.zeros((8, 8), np.uint8)
print(f"  both masks empty: iou={iou(confusion(empty, empty))}, "
      f"f_beta={f_beta(confusion(empty, empty))}, "
      f"ber={ber(confusion(empty, empty))}")

# a miscalibrated predictor: confident everywhere, right half the time
conf_maps, gts = [], []
for _ in range(16):
    g = (rng.random((16, 16)) > 0.5).astype(np.uint8)
    conf = np.where(g, 0.9, 0.4) + rng.normal(0, 0.03, g.shape)
    conf_maps.append(np.clip(conf, 0, 1))
    gts.append(g)
curve = calibration_curve(conf_maps, gts, n_bins=10)
print("\nreliability bins (occupied):")
for i in range(10):
    if curve.count[i]:
        gap = curve.frequency[i] - curve.mean_conf[i]
        print(f"  [{curve.bin_low[i]:.1f},{curve.bin_high[i]:.1f})  "
              f"conf={curve.mean_conf[i]:.3f}  freq={curve.frequency[i]:.3f}  "
              f"n={curve.count[i]:6d}  gap={gap:+.3f}")
curve.plot("demo_calibration.png", title="toy reliability diagram")
print("wrote demo_calibration.png")
