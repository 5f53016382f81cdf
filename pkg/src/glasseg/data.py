"""Synthetic glass scenes, dataset loading, and the train-time transforms.

The procedural generator composites translucent panels over textured
backgrounds: panels alpha-blend with the scene behind them (optionally with a
specular reflection streak and an opaque frame whose pixels are excluded from
the glass mask), which reproduces the visual ambiguity that makes glass hard
to segment.  Every sample is fully determined by a 64-bit seed through a
counter-based Philox generator, so datasets are bit-reproducible across
platforms and across serial/parallel generation.

Directory layout for real datasets: ``images/<id>.<ext>`` paired with
``masks/<id>.png`` by stem; masks are 8-bit single-channel PNGs with glass
encoded as 255 (any value >= 128 counts as glass).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .backbones import IMAGE_MEAN, IMAGE_STD
from .layers import bilinear_resize, nearest_resize
from .rng import derive_seed, philox

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
TEXTURE_FAMILIES = ("gradient", "checker", "stripes", "blotch")


@dataclass
class Sample:
    """An image/mask pair; image is normalized CHW float32, mask is HW {0,1}."""

    image: np.ndarray
    mask: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} "
                             "sizes differ")


@dataclass(frozen=True)
class SceneSpec:
    """Full recipe for one synthetic scene; ``seed`` determines everything."""

    canvas_size: int = 96
    n_panels: tuple = (1, 3)
    transparency: tuple = (0.55, 0.95)
    reflection_prob: float = 0.65
    frame_prob: float = 0.65
    background: str = "mixed"
    seed: int = 0

    def __post_init__(self):
        if self.n_panels[0] > self.n_panels[1] or self.n_panels[0] < 0:
            raise ValueError("n_panels range must be well-ordered and non-negative")
        if not (0.0 <= self.transparency[0] <= self.transparency[1] <= 1.0):
            raise ValueError("transparency range must lie in [0, 1] and be ordered")
        for name in ("reflection_prob", "frame_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.background != "mixed" and self.background not in TEXTURE_FAMILIES:
            raise ValueError(f"unknown background family {self.background!r}")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize_image(rgb: np.ndarray, mean=IMAGE_MEAN, std=IMAGE_STD) -> np.ndarray:
    """HWC float RGB in [0, 1] -> normalized CHW float32."""
    chw = rgb.astype(np.float32).transpose(2, 0, 1)
    m = np.asarray(mean, np.float32)[:, None, None]
    s = np.asarray(std, np.float32)[:, None, None]
    return (chw - m) / s


def denormalize_image(chw: np.ndarray, mean=IMAGE_MEAN, std=IMAGE_STD) -> np.ndarray:
    """Inverse of :func:`normalize_image`; returns HWC float RGB in [0, 1]."""
    m = np.asarray(mean, np.float32)[:, None, None]
    s = np.asarray(std, np.float32)[:, None, None]
    rgb = chw * s + m
    return np.clip(rgb.transpose(1, 2, 0), 0.0, 1.0)


# ---------------------------------------------------------------------------
# backgrounds
# ---------------------------------------------------------------------------

def _texture_layer(rng, size, family, ys, xs):
    c0 = rng.uniform(0.05, 0.95, 3)
    c1 = rng.uniform(0.05, 0.95, 3)
    if family == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        t = (np.cos(angle) * xs + np.sin(angle) * ys + 1) / 2
        return t[:, :, None] * c0 + (1 - t[:, :, None]) * c1
    if family == "checker":
        py = int(rng.integers(6, 28))
        px = int(rng.integers(6, 28))
        phase = rng.integers(0, max(py, px), 2)
        grid = (((np.arange(size)[:, None] + phase[0]) // py
                 + (np.arange(size)[None, :] + phase[1]) // px) % 2)
        return np.where(grid[:, :, None] == 0, c0, c1)
    if family == "stripes":
        period = rng.uniform(5.0, 22.0)
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, period)
        coord = (np.cos(angle) * xs + np.sin(angle) * ys) * size
        stripe = (((coord + phase) // period) % 2).astype(int)
        return np.where(stripe[:, :, None] == 0, c0, c1)
    if family == "blotch":
        img = np.zeros((size, size, 3))
        weight = 0.0
        for octave, amp in ((4, 1.0), (9, 0.5), (17, 0.25)):
            coarse = rng.uniform(0, 1, (octave, octave, 3))
            img += amp * bilinear_resize(coarse.transpose(2, 0, 1), size,
                                         size).transpose(1, 2, 0)
            weight += amp
        img /= weight
        return c0 * img + c1 * (1 - img)
    raise ValueError(f"unknown background family {family!r}")


def _background(rng, size, family):
    """A layered texture: primary family, optional secondary blend, optional
    illumination gradient, plus pixel noise."""
    ys, xs = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size),
                         indexing="ij")
    primary = family
    if family == "mixed":
        primary = TEXTURE_FAMILIES[rng.integers(len(TEXTURE_FAMILIES))]
    img = _texture_layer(rng, size, primary, ys, xs)
    if family == "mixed" and rng.random() < 0.5:
        secondary = TEXTURE_FAMILIES[rng.integers(len(TEXTURE_FAMILIES))]
        alpha = rng.uniform(0.15, 0.45)
        img = (1 - alpha) * img + alpha * _texture_layer(rng, size, secondary,
                                                         ys, xs)
    if rng.random() < 0.5:
        angle = rng.uniform(0, 2 * np.pi)
        t = (np.cos(angle) * xs + np.sin(angle) * ys + 1) / 2
        img *= (0.75 + 0.5 * t)[:, :, None]
    noise = rng.uniform(-0.02, 0.02, (size, size, 3))
    return np.clip(img + noise, 0.0, 1.0)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def _panel_geometry(rng, size):
    w = rng.uniform(0.32, 0.62) * size
    h = rng.uniform(0.32, 0.62) * size
    cx = rng.uniform(0.24, 0.76) * size
    cy = rng.uniform(0.24, 0.76) * size
    theta = rng.uniform(-np.pi / 12, np.pi / 12) if rng.random() < 0.4 else 0.0
    return cx, cy, w, h, theta


def _rect_coords(size, cx, cy, theta):
    ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    dx, dy = xs - cx, ys - cy
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    return u, v


def generate_scene(spec: SceneSpec, normalization=None) -> Sample:
    """Render one scene; deterministic in ``spec.seed`` at the bit level."""
    rng = philox(spec.seed)
    size = spec.canvas_size
    img = _background(rng, size, spec.background)
    mask = np.zeros((size, size), np.uint8)

    n_panels = int(rng.integers(spec.n_panels[0], spec.n_panels[1] + 1))
    for _ in range(n_panels):
        cx, cy, w, h, theta = _panel_geometry(rng, size)
        u, v = _rect_coords(size, cx, cy, theta)
        interior = (np.abs(u) <= w / 2) & (np.abs(v) <= h / 2)

        framed = rng.random() < spec.frame_prob
        if framed:
            f = rng.uniform(4.0, 7.0)
            glass = (np.abs(u) <= w / 2 - f) & (np.abs(v) <= h / 2 - f)
            frame = interior & ~glass
        else:
            glass = interior
            frame = None

        t = rng.uniform(spec.transparency[0], spec.transparency[1])
        base = rng.uniform(0.45, 0.95)
        cast = rng.uniform(0.82, 1.1, 3)
        cast[2] = rng.uniform(0.95, 1.15)           # glass leans cool
        tint = np.clip(base * cast, 0.0, 1.0)
        img = np.where(glass[:, :, None], t * img + (1.0 - t) * tint, img)
        mask[glass] = 1

        if rng.random() < spec.reflection_prob:
            direction = rng.uniform(0, 2 * np.pi)
            s = np.cos(direction) * u + np.sin(direction) * v
            offset = rng.uniform(-0.25, 0.25) * min(w, h)
            band = rng.uniform(2.0, 6.0)
            amp = rng.uniform(0.15, 0.4)
            streak = np.clip(1.0 - np.abs(s - offset) / band, 0.0, None) * amp
            img = np.clip(img + (streak * glass)[:, :, None], 0.0, 1.0)

        if frame is not None:
            shade = rng.uniform(0.05, 0.35)
            color = np.clip(shade * rng.uniform(0.8, 1.2, 3), 0.0, 1.0)
            img = np.where(frame[:, :, None], color, img)
            mask[frame] = 0

    # quantize exactly like the PNG round trip, so in-memory and on-disk
    # pipelines see identical pixels
    quantized = np.round(img * 255.0).astype(np.uint8)
    mean, std = normalization or (IMAGE_MEAN, IMAGE_STD)
    return Sample(image=normalize_image(quantized.astype(np.float32) / 255.0,
                                        mean, std),
                  mask=mask, id=f"scene-{spec.seed:016x}")


def render_rgb(sample: Sample, normalization=None) -> np.ndarray:
    """Recover the displayable [0, 1] RGB image of a sample."""
    mean, std = normalization or (IMAGE_MEAN, IMAGE_STD)
    return denormalize_image(sample.image, mean, std)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

class SyntheticGlassDataset:
    """Lazy, index-seeded synthetic dataset; parallel-generation safe."""

    def __init__(self, size: int, base_seed: int, spec: SceneSpec = SceneSpec(),
                 normalization=None):
        self.size = size
        self.base_seed = base_seed
        self.spec = spec
        self.normalization = normalization

    def __len__(self):
        return self.size

    def sample_seed(self, index: int) -> int:
        return derive_seed(self.base_seed, index)

    def __getitem__(self, index: int) -> Sample:
        if not 0 <= index < self.size:
            raise IndexError(index)
        sample = generate_scene(replace(self.spec, seed=self.sample_seed(index)),
                                self.normalization)
        sample.id = f"{index:05d}"
        return sample


def load_sample(image_path, mask_path, normalization=None) -> Sample:
    """Load an image/mask pair; mask pixels >= 128 count as glass."""
    image_path, mask_path = Path(image_path), Path(mask_path)
    for p in (image_path, mask_path):
        if not p.exists():
            raise FileNotFoundError(p)
    try:
        img = Image.open(image_path).convert("RGB")
    except Exception as exc:
        raise ValueError(f"unreadable image {image_path}: {exc}") from exc
    mask_img = Image.open(mask_path)
    if mask_img.mode == "1":
        mask_img = mask_img.convert("L")
    if mask_img.mode != "L":
        raise ValueError(f"mask {mask_path} must be single-channel 8-bit, "
                         f"got mode {mask_img.mode!r}")
    if img.size != mask_img.size:
        raise ValueError(f"size mismatch: image {img.size} vs mask {mask_img.size}")
    rgb = np.asarray(img, np.float32) / 255.0
    mask = (np.asarray(mask_img) >= 128).astype(np.uint8)
    mean, std = normalization or (IMAGE_MEAN, IMAGE_STD)
    return Sample(image=normalize_image(rgb, mean, std), mask=mask,
                  id=image_path.stem)


def save_sample_png(sample: Sample, image_path, mask_path, normalization=None):
    """Write the displayable image and the 0/255 mask as PNGs."""
    rgb = np.round(render_rgb(sample, normalization) * 255.0).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(image_path)
    Image.fromarray((sample.mask * 255).astype(np.uint8), "L").save(mask_path)


class DirectoryDataset:
    """images/ + masks/ directory pairs; multiple roots are concatenated."""

    def __init__(self, roots, normalization=None):
        if isinstance(roots, (str, os.PathLike)):
            roots = [roots]
        self.normalization = normalization
        self.entries = []
        for root in roots:
            root = Path(root)
            img_dir, mask_dir = root / "images", root / "masks"
            if not img_dir.is_dir() or not mask_dir.is_dir():
                raise FileNotFoundError(f"{root} must contain images/ and masks/")
            for img_path in sorted(img_dir.iterdir()):
                if img_path.suffix.lower() not in IMAGE_EXTENSIONS:
                    continue
                mask_path = mask_dir / f"{img_path.stem}.png"
                if not mask_path.exists():
                    raise FileNotFoundError(f"no mask for {img_path.name}")
                self.entries.append((img_path, mask_path))
        if not self.entries:
            raise ValueError(f"no samples found under {roots}")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, index: int) -> Sample:
        return load_sample(*self.entries[index], normalization=self.normalization)


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def flip_sample(sample: Sample, horizontal: bool, vertical: bool) -> Sample:
    """Mirror image and mask together; pure and involutive per axis."""
    img, mask = sample.image, sample.mask
    if horizontal:
        img, mask = img[:, :, ::-1], mask[:, ::-1]
    if vertical:
        img, mask = img[:, ::-1, :], mask[::-1, :]
    return Sample(np.ascontiguousarray(img), np.ascontiguousarray(mask), sample.id)


def augment_flip(sample: Sample, rng) -> Sample:
    """Independent 50% horizontal and vertical flips (training augmentation)."""
    return flip_sample(sample, bool(rng.random() < 0.5), bool(rng.random() < 0.5))


def resize_pair(sample: Sample, side: int) -> Sample:
    """Resize to side x side: bilinear for the image, nearest for the mask."""
    if side % 32:
        raise ValueError(f"target side {side} not divisible by 32")
    img = bilinear_resize(sample.image, side, side)
    mask = nearest_resize(sample.mask, side, side)
    return Sample(img.astype(np.float32, copy=False), mask, sample.id)
