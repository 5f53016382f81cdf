"""Compare the architecture variants: parameter counts and inference speed.

Variants: the full dual-backbone, single-backbone ablations, a smaller frozen
backbone, and the fusion blocks swapped for plain 1x1 convolutions.  The
benchmark times serial single-image forward passes after warm-up.

Run:  python demos/05_variants_and_speed.py [passes]
"""

import sys

from glasseg.model import VARIANTS
from glasseg.train import benchmark_speed, build_variant, count_params

passes = int(sys.argv[1]) if len(sys.argv) > 1 else 50

print(f"{'variant':<15} {'params':>10} {'trainable':>10} {'frozen':>9} "
      f"{'fps':>7} {'ms/img':>8}")
for name in VARIANTS:
    model = build_variant(name, seed=0)
    total, trainable = count_params(model)
    report = benchmark_speed(model, n_passes=passes, image_side=128, warmup=4)
    print(f"{name:<15} {total:>10,} {trainable:>10,} {total - trainable:>9,} "
          f"{report.fps:>7.2f} {report.mean_latency_s * 1e3:>8.1f}")

print(f"\n(average of {passes} serial passes at 128x128; the reference "
      "protocol uses 1000)")
