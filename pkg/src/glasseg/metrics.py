"""Segmentation metrics, calibration curves, and error overlays.

All four metrics reduce to per-image confusion counts (positive class =
glass).  Degenerate cases follow the usual conventions: IoU of two empty
masks is 1, F-measure is 0 when nothing is predicted or present except the
all-empty case (1), and a class absent from the ground truth contributes a
perfect recall of 1 to the balanced error rate.  Aggregation over a dataset
averages per-image values by default; global pixel pooling is available
behind a flag.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import render_rgb, resize_pair
from .decoder import binarize
from .layers import bilinear_resize


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricConfig:
    beta_sq: float = 0.3
    threshold: float = 0.5
    mae_mode: str = "binary"         # "binary" | "confidence"
    n_bins: int = 10
    aggregate: str = "per_image"     # "per_image" | "global"

    def __post_init__(self):
        if self.beta_sq <= 0:
            raise ValueError("beta_sq must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        if self.mae_mode not in ("binary", "confidence"):
            raise ValueError(f"unknown mae_mode {self.mae_mode!r}")
        if self.aggregate not in ("per_image", "global"):
            raise ValueError(f"unknown aggregate {self.aggregate!r}")


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Pixel confusion counts between binary masks of equal size."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred != 0
    g = gt != 0
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return c.tp / denom


def f_beta(c: ConfusionCounts, beta_sq: float = 0.3) -> float:
    if c.tp == 0:
        return 1.0 if c.fp == 0 and c.fn == 0 else 0.0
    precision = c.tp / (c.tp + c.fp)
    recall = c.tp / (c.tp + c.fn)
    return (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall)


def mae(pred, gt, mode: str = "binary", threshold: float = 0.5) -> float:
    """Mean absolute pixel error; binary mode thresholds the prediction first."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if mode == "binary":
        pred = (pred >= threshold).astype(np.float64)
    elif mode != "confidence":
        raise ValueError(f"unknown mae mode {mode!r}")
    return float(np.mean(np.abs(pred - gt)))


def ber(c: ConfusionCounts) -> float:
    """Balanced error rate in percent; an absent class counts as fully correct."""
    pos = c.tp + c.fn
    neg = c.tn + c.fp
    recall_pos = c.tp / pos if pos else 1.0
    recall_neg = c.tn / neg if neg else 1.0
    return 100.0 * (1.0 - 0.5 * (recall_pos + recall_neg))


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

@dataclass
class CalibrationCurve:
    bin_low: np.ndarray
    bin_high: np.ndarray
    mean_conf: np.ndarray
    frequency: np.ndarray
    count: np.ndarray

    @property
    def occupied(self) -> np.ndarray:
        return self.count > 0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_low", "bin_high", "mean_conf", "frequency", "count"])
            for i in range(len(self.count)):
                writer.writerow([f"{self.bin_low[i]:.6f}", f"{self.bin_high[i]:.6f}",
                                 f"{self.mean_conf[i]:.9f}" if self.count[i] else "",
                                 f"{self.frequency[i]:.9f}" if self.count[i] else "",
                                 int(self.count[i])])

    def plot(self, path, title="Reliability diagram"):
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 5))
        ax.plot([0, 1], [0, 1], "k--", linewidth=1, label="perfect calibration")
        occ = self.occupied
        ax.plot(self.mean_conf[occ], self.frequency[occ], "o-", color="tab:blue",
                label="model")
        ax.set_xlabel("mean predicted confidence")
        ax.set_ylabel("empirical glass frequency")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_title(title)
        ax.legend(loc="upper left")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def calibration_curve(confidences, gts, n_bins: int = 10) -> CalibrationCurve:
    """Equal-width reliability bins over [0, 1].

    ``confidences``: iterable of confidence maps; ``gts``: matching binary
    masks.  The last bin is closed so a confidence of exactly 1.0 lands in it.
    """
    confidences = list(confidences)
    gts = list(gts)
    if not confidences or len(confidences) != len(gts):
        raise ValueError("need equal non-empty lists of confidences and masks")
    conf = np.concatenate([np.asarray(c, np.float64).ravel() for c in confidences])
    glass = np.concatenate([np.asarray(g).ravel() != 0 for g in gts])
    if conf.shape != glass.shape:
        raise ValueError("confidence/mask pixel counts differ")
    if conf.min() < 0 or conf.max() > 1:
        raise ValueError("confidences must lie in [0, 1]")

    idx = np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    sum_conf = np.bincount(idx, weights=conf, minlength=n_bins)
    sum_glass = np.bincount(idx, weights=glass.astype(np.float64), minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(count > 0, sum_conf / count, np.nan)
        frequency = np.where(count > 0, sum_glass / count, np.nan)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    return CalibrationCurve(bin_low=edges[:-1], bin_high=edges[1:],
                            mean_conf=mean_conf, frequency=frequency, count=count)


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------

OVERLAY_COLORS = {
    "tp": (0.0, 1.0, 0.0),   # green
    "fp": (1.0, 0.0, 0.0),   # red
    "fn": (0.0, 0.0, 1.0),   # blue
}


def render_overlay(image, pred, gt, alpha: float = 0.5) -> np.ndarray:
    """Color-code prediction quality over the image.

    True positives green, false positives red, false negatives blue; true
    negatives keep the original pixel.  Returns uint8 RGB (H, W, 3).
    """
    image = np.asarray(image, np.float64)
    if image.dtype != np.float64 or image.max() > 1.0 + 1e-9:
        raise ValueError("image must be float RGB in [0, 1]")
    pred = np.asarray(pred) != 0
    gt = np.asarray(gt) != 0
    if image.shape[:2] != pred.shape or pred.shape != gt.shape:
        raise ValueError("image/pred/gt sizes differ")
    out = image.copy()
    for name, region in (("tp", pred & gt), ("fp", pred & ~gt), ("fn", ~pred & gt)):
        color = np.asarray(OVERLAY_COLORS[name])
        out[region] = (1.0 - alpha) * out[region] + alpha * color
    return np.round(out * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# dataset evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    iou: float
    f_beta: float
    mae: float
    ber: float
    n_images: int
    per_image: list = field(default_factory=list)

    def to_json(self, extra=None) -> str:
        payload = {"iou": self.iou, "f_beta": self.f_beta, "mae": self.mae,
                   "ber": self.ber, "n_images": self.n_images,
                   "per_image": self.per_image}
        if extra:
            payload.update(extra)
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_counts_and_values(cls, counts, maes, ids, cfg: MetricConfig):
        per_image = [
            {"id": sid, "iou": iou(c), "f_beta": f_beta(c, cfg.beta_sq),
             "mae": m, "ber": ber(c)}
            for sid, c, m in zip(ids, counts, maes)
        ]
        if cfg.aggregate == "global":
            pooled = ConfusionCounts(tp=sum(c.tp for c in counts),
                                     fp=sum(c.fp for c in counts),
                                     tn=sum(c.tn for c in counts),
                                     fn=sum(c.fn for c in counts))
            total_px = sum(c.total for c in counts)
            pooled_mae = sum(m * c.total for m, c in zip(maes, counts)) / total_px
            return cls(iou=iou(pooled), f_beta=f_beta(pooled, cfg.beta_sq),
                       mae=pooled_mae, ber=ber(pooled), n_images=len(counts),
                       per_image=per_image)
        return cls(iou=float(np.mean([r["iou"] for r in per_image])),
                   f_beta=float(np.mean([r["f_beta"] for r in per_image])),
                   mae=float(np.mean([r["mae"] for r in per_image])),
                   ber=float(np.mean([r["ber"] for r in per_image])),
                   n_images=len(counts), per_image=per_image)


def predict_dataset(model, dataset, side: int, batch_size: int = 16,
                    native_resolution: bool = False):
    """Run the model over a dataset.

    Yields (sample, confidence) pairs; predictions are made at ``side`` and,
    when ``native_resolution`` is set, upsampled back to each sample's
    original size for scoring.
    """
    batch, originals = [], []
    for i in range(len(dataset)):
        original = dataset[i]
        batch.append(resize_pair(original, side) if original.mask.shape != (side, side)
                     else original)
        originals.append(original)
        if len(batch) == batch_size or i == len(dataset) - 1:
            images = np.stack([s.image for s in batch])
            ad.pool.reset()
            with ad.pooled_buffers():
                conf = model.predict(images)
            for orig, resized, c in zip(originals, batch, conf):
                if native_resolution and orig.mask.shape != c.shape:
                    c = np.clip(bilinear_resize(c[None], *orig.mask.shape)[0], 0.0, 1.0)
                    yield orig, c
                else:
                    yield resized, c
            batch, originals = [], []


def evaluate_dataset(model, dataset, cfg: MetricConfig = MetricConfig(),
                     side: int = 128, batch_size: int = 16,
                     native_resolution: bool = False) -> MetricReport:
    """Four-metric report over a dataset; deterministic given model and data."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    counts, maes, ids = [], [], []
    for sample, conf in predict_dataset(model, dataset, side, batch_size,
                                        native_resolution):
        pred = binarize(conf, cfg.threshold)
        counts.append(confusion(pred, sample.mask))
        source = pred if cfg.mae_mode == "binary" else conf
        maes.append(mae(source, sample.mask, mode="confidence"))
        ids.append(sample.id)
    return MetricReport.from_counts_and_values(counts, maes, ids, cfg)
