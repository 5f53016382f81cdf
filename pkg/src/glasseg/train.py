"""Training loop, optimizer, checkpoints, variants, and the speed benchmark.

The protocol: decoupled-weight-decay Adam over the trainable parameters only
(frozen backbone weights are never handed to the optimizer), a linear
learning-rate ramp followed by linear decay to zero, horizontal/vertical flip
augmentation, per-epoch validation, and best-IoU checkpointing.  Runs are
bit-reproducible: all randomness derives from counter-based generators keyed
by the config seed, and BLAS threading is pinned during training.
"""

from __future__ import annotations

import csv
import ctypes
import hashlib
import json
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .backbones import FeatureMap, GeneralBackboneConfig, snapshot_params
from .data import Sample, flip_sample, resize_pair
from .decoder import LossWeights, binarize, deep_supervision_loss
from .metrics import MetricConfig, evaluate_dataset
from .model import VARIANTS, GlassSegmenter
from .rng import philox

CHECKPOINT_MAGIC = b"GSEGCKPT"


def tune_runtime(max_blas_threads: int = 1):
    """Pin BLAS threads and keep large heap chunks resident.

    Single-threaded BLAS is both faster for this model's many medium GEMMs
    and makes results independent of the host's core count.  Failures are
    ignored; these are performance knobs only.
    """
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(max_blas_threads)
    except Exception:
        pass
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)   # M_MMAP_THRESHOLD: keep big buffers on the heap
    except Exception:
        pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_steps: int = 50
    seed: int = 0
    image_side: int = 128
    loss_weights: LossWeights = field(default_factory=LossWeights)
    deep_supervision: bool = True
    cache_general_features: bool = True
    val_batch_size: int = 16

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.warmup_steps + 1) < 1:
            raise ValueError("epochs, batch_size must be positive; warmup >= 0")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ValueError("base_lr must be positive, weight_decay non-negative")
        if self.image_side % 32:
            raise ValueError("image_side must be divisible by 32")


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)    # (step, loss, lr)
    epochs: list = field(default_factory=list)   # (epoch, val_iou, val_f_beta, val_mae, val_ber)
    best_epoch: int = -1
    best_val_iou: float = -1.0

    def to_csv(self, step_path, epoch_path):
        with open(step_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr"])
            w.writerows(self.steps)
        with open(epoch_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "val_iou", "val_f_beta", "val_mae", "val_ber"])
            w.writerows(self.epochs)


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear ramp 0 -> base_lr over the warmup, then linear decay to 0.

    ``step`` counts completed optimizer steps, valid on [0, total_steps].
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be smaller than total_steps")
    # ratios computed first so the endpoints are exact (ratio 1.0 or 0.0)
    if step < warmup_steps:
        return base_lr * (step / warmup_steps)
    return base_lr * ((total_steps - step) / (total_steps - warmup_steps))


class AdamW:
    """Adam with decoupled weight decay; holds state only for what it is given."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-4):
        params = list(params)
        if not all(p.requires_grad for p in params):
            raise ValueError("optimizer received frozen parameters")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"opt.{i}.m"] = m
            out[f"opt.{i}.v"] = v
        return out

    def load_state_arrays(self, arrays, t):
        for i in range(len(self.params)):
            self.m[i] = arrays[f"opt.{i}.m"].astype(self.m[i].dtype, copy=True)
            self.v[i] = arrays[f"opt.{i}.v"].astype(self.v[i].dtype, copy=True)
        self.t = t


# ---------------------------------------------------------------------------
# checkpoints: manifest + named arrays in one flat binary file
# ---------------------------------------------------------------------------

def save_checkpoint(path, arrays: dict, manifest: dict):
    """Write a checkpoint: magic, JSON header (manifest + array index), blobs.

    Array bytes are laid out in sorted-name order; the file is byte-identical
    for identical inputs, so checkpoint hashes certify reproducibility.
    """
    names = sorted(arrays)
    index = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        index.append({"name": name, "dtype": arr.dtype.str,
                      "shape": list(arr.shape), "offset": offset,
                      "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = json.dumps({"manifest": manifest, "index": index},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name]).tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (arrays, manifest)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len))
        blob = fh.read()
    arrays = {}
    for entry in header["index"]:
        start = entry["offset"]
        raw = blob[start:start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])) \
            .reshape(entry["shape"]).copy()
    return arrays, header["manifest"]


def checkpoint_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------

def build_variant(name: str, seed: int = 0, learned_cfg=None, general_cfg=None,
                  decoder_cfg=None, fusion_cfg=None, dtype=np.float32) -> GlassSegmenter:
    """Construct one of the architecture variants under a common seed."""
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    kwargs = {}
    if learned_cfg is not None:
        kwargs["learned_cfg"] = learned_cfg
    if general_cfg is not None:
        kwargs["general_cfg"] = general_cfg
    if decoder_cfg is not None:
        kwargs["decoder_cfg"] = decoder_cfg
    if fusion_cfg is not None:
        kwargs["fusion_cfg"] = fusion_cfg
    return GlassSegmenter(variant=name, seed=seed, dtype=dtype, **kwargs)


def count_params(model: GlassSegmenter):
    """(total, trainable) parameter counts; frozen weights count only in total."""
    return model.count_params()


# ---------------------------------------------------------------------------
# frozen-feature cache
# ---------------------------------------------------------------------------

class GeneralFeatureCache:
    """Caches frozen-backbone hidden states per (sample id, flips).

    The frozen features depend only on the input pixels, so samples seen
    again (later epochs, repeated flip draws) skip the transformer forward.
    """

    def __init__(self, model: GlassSegmenter, enabled=True):
        self.model = model
        self.enabled = enabled and model.general is not None
        self.store = {}

    def batch_states(self, samples, flips):
        if self.model.general is None:
            return None
        keys = [(s.id, f) for s, f in zip(samples, flips)]
        missing = [i for i, k in enumerate(keys) if k not in self.store]
        if missing or not self.enabled:
            images = np.stack([samples[i].image for i in missing]) if self.enabled \
                else np.stack([s.image for s in samples])
            prev = ad.pool.enabled
            ad.pool.enabled = False   # cached arrays must not alias pool buffers
            try:
                with ad.no_grad():
                    taps = self.model.extract_general(images)
            finally:
                ad.pool.enabled = prev
            if not self.enabled:
                return taps
            for j, i in enumerate(missing):
                self.store[keys[i]] = [fm.data[j].copy() for fm in taps]
        patch = self.model.general_cfg.patch_size
        return [FeatureMap(np.stack([self.store[k][t] for k in keys]), patch)
                for t in range(4)]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _validate(model, val_set, cfg: TrainConfig, metric_cfg: MetricConfig):
    report = evaluate_dataset(model, val_set, metric_cfg, side=cfg.image_side,
                              batch_size=cfg.val_batch_size)
    return report


def train(model: GlassSegmenter, train_set, val_set, cfg: TrainConfig,
          metric_cfg: MetricConfig = MetricConfig(), start_step: int = 0,
          optimizer: AdamW = None, log=None):
    """Run the full optimization protocol.

    Returns (history, best_state) where ``best_state`` holds the parameter
    snapshot with the highest validation IoU plus its epoch/step/metrics.
    Raises FloatingPointError if the loss turns non-finite.
    """
    tune_runtime()
    n = len(train_set)
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be below total training steps")

    params = model.trainable_parameters()
    opt = optimizer or AdamW(params, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    shuffle_rng = philox(cfg.seed, stream=11)
    flip_rng = philox(cfg.seed, stream=12)
    cache = GeneralFeatureCache(model, enabled=cfg.cache_general_features)

    history = TrainHistory()
    best_state = None
    step = start_step
    start_epoch = start_step // steps_per_epoch

    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        flip_draws = [(bool(flip_rng.random() < 0.5), bool(flip_rng.random() < 0.5))
                      for _ in range(n)]
        if epoch < start_epoch:
            continue  # consume RNG streams identically when resuming
        for b0 in range(0, n, cfg.batch_size):
            idxs = perm[b0:b0 + cfg.batch_size]
            samples, flips = [], []
            for i in idxs:
                s = train_set[int(i)]
                if s.mask.shape != (cfg.image_side, cfg.image_side):
                    s = resize_pair(s, cfg.image_side)
                f = flip_draws[int(i)]
                samples.append(flip_sample(s, *f))
                flips.append(f)
            images = np.stack([s.image for s in samples])
            gts = np.stack([s.mask for s in samples])
            general_states = cache.batch_states(samples, flips)

            ad.pool.reset()
            with ad.pooled_buffers():
                if cfg.deep_supervision:
                    outputs = model.forward_train(images, general_states)
                else:
                    outputs = [model.forward(images, general_states)]
                result = deep_supervision_loss(outputs, gts, cfg.loss_weights)
                loss = float(result.loss.data)
                if not np.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss {loss} at step {step} (epoch {epoch})")
                ad.backward(result.loss)
                lr = lr_at(step, cfg.base_lr, cfg.warmup_steps, total_steps)
                opt.step(lr)
            opt.zero_grad()
            history.steps.append((step, loss, lr))
            step += 1

        report = _validate(model, val_set, cfg, metric_cfg)
        history.epochs.append((epoch, report.iou, report.f_beta, report.mae,
                               report.ber))
        if report.iou > history.best_val_iou:
            history.best_val_iou = report.iou
            history.best_epoch = epoch
            best_state = {"params": snapshot_params(model), "epoch": epoch,
                          "step": step, "metrics": {
                              "iou": report.iou, "f_beta": report.f_beta,
                              "mae": report.mae, "ber": report.ber}}
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs}: loss={loss:.4f} "
                f"val_iou={report.iou:.4f}")

    return history, best_state


# ---------------------------------------------------------------------------
# inference speed benchmark
# ---------------------------------------------------------------------------

@dataclass
class SpeedReport:
    n_passes: int
    warmup_passes: int
    mean_latency_s: float
    fps: float
    image_side: int
    variant: str

    def __post_init__(self):
        if abs(self.fps * self.mean_latency_s - 1.0) > 1e-9:
            raise ValueError("fps must equal 1/mean_latency")

    def to_json(self, extra=None) -> str:
        payload = {"n_passes": self.n_passes, "warmup_passes": self.warmup_passes,
                   "mean_latency_s": self.mean_latency_s, "fps": self.fps,
                   "image_side": self.image_side, "variant": self.variant}
        if extra:
            payload.update(extra)
        return json.dumps(payload, indent=2, sort_keys=True)


def benchmark_speed(model: GlassSegmenter, n_passes: int = 1000,
                    image_side: int = 128, warmup: int = 16,
                    seed: int = 0) -> SpeedReport:
    """Mean single-image forward latency over ``n_passes`` serial passes.

    Warm-up passes run first and are excluded from the timing.
    """
    if n_passes < 1:
        raise ValueError("n_passes must be positive")
    tune_runtime()
    rng = philox(seed, stream=99)
    image = rng.standard_normal((1, 3, image_side, image_side)).astype(model.dtype)
    with ad.no_grad():
        for _ in range(warmup):
            ad.pool.reset()
            with ad.pooled_buffers():
                model.predict(image)
        t0 = time.perf_counter()
        for _ in range(n_passes):
            ad.pool.reset()
            with ad.pooled_buffers():
                model.predict(image)
        elapsed = time.perf_counter() - t0
    mean = elapsed / n_passes
    return SpeedReport(n_passes=n_passes, warmup_passes=warmup,
                       mean_latency_s=mean, fps=1.0 / mean,
                       image_side=image_side, variant=model.variant)
