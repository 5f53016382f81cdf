"""Synthetic scenes, loading, flips, and resizing."""

import numpy as np
import pytest

from glasseg.data import (DirectoryDataset, Sample, SceneSpec,
                          SyntheticGlassDataset, augment_flip, denormalize_image,
                          flip_sample, generate_scene, load_sample,
                          normalize_image, render_rgb, resize_pair,
                          save_sample_png)
from glasseg.rng import derive_seed, philox, splitmix64

RNG = np.random.default_rng(11)


# ---------------------------------------------------------------------------
# rng plumbing
# ---------------------------------------------------------------------------

def test_splitmix64_is_deterministic_and_mixing():
    assert splitmix64(0) == splitmix64(0)
    values = {splitmix64(i) for i in range(1000)}
    assert len(values) == 1000


def test_derive_seed_parallel_equals_serial():
    serial = [derive_seed(42, i) for i in range(20)]
    scrambled = [derive_seed(42, i) for i in reversed(range(20))]
    assert serial == list(reversed(scrambled))
    assert len(set(serial)) == 20


def test_philox_streams_independent():
    a = philox(1, 0).random(4)
    b = philox(1, 1).random(4)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(philox(1, 0).random(4), a)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def test_generate_scene_bitwise_deterministic():
    spec = SceneSpec(canvas_size=64, seed=123)
    a = generate_scene(spec)
    b = generate_scene(spec)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)


def test_generate_scene_mask_binary_and_finite():
    for seed in range(8):
        s = generate_scene(SceneSpec(canvas_size=64, seed=seed))
        assert set(np.unique(s.mask)).issubset({0, 1})
        assert np.all(np.isfinite(s.image))
        assert s.image.dtype == np.float32
        assert s.image.shape == (3, 64, 64)


def test_fully_transparent_panel_invisible_but_masked():
    spec = SceneSpec(canvas_size=64, n_panels=(1, 1), transparency=(1.0, 1.0),
                     reflection_prob=0.0, frame_prob=0.0, seed=5)
    with_panel = generate_scene(spec)
    background_only = generate_scene(
        SceneSpec(canvas_size=64, n_panels=(0, 0), transparency=(1.0, 1.0),
                  reflection_prob=0.0, frame_prob=0.0, seed=5))
    assert with_panel.mask.sum() > 0
    # pixels identical to the pure background everywhere, incl. the panel
    np.testing.assert_array_equal(with_panel.image, background_only.image)


def test_zero_panels_gives_empty_mask():
    s = generate_scene(SceneSpec(canvas_size=64, n_panels=(0, 0), seed=9))
    assert s.mask.sum() == 0


def test_frames_excluded_from_mask():
    spec = SceneSpec(canvas_size=96, n_panels=(1, 1), frame_prob=1.0,
                     reflection_prob=0.0, seed=3)
    framed = generate_scene(spec)
    unframed = generate_scene(
        SceneSpec(canvas_size=96, n_panels=(1, 1), frame_prob=0.0,
                  reflection_prob=0.0, seed=3))
    # same geometry draw order up to the frame coin; glass area must shrink
    assert 0 < framed.mask.sum() < unframed.mask.sum()


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(n_panels=(3, 1))
    with pytest.raises(ValueError):
        SceneSpec(transparency=(0.9, 0.5))
    with pytest.raises(ValueError):
        SceneSpec(reflection_prob=1.5)
    with pytest.raises(ValueError):
        SceneSpec(background="granite")


def test_normalize_denormalize_roundtrip():
    rgb = RNG.random((16, 16, 3)).astype(np.float32)
    chw = normalize_image(rgb)
    back = denormalize_image(chw)
    np.testing.assert_allclose(back, rgb, atol=1e-6)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def test_synthetic_dataset_lazy_and_reproducible():
    ds = SyntheticGlassDataset(8, base_seed=7)
    a, b = ds[3], ds[3]
    np.testing.assert_array_equal(a.image, b.image)
    assert a.id == "00003"
    with pytest.raises(IndexError):
        ds[8]


def test_synthetic_dataset_distinct_samples():
    ds = SyntheticGlassDataset(4, base_seed=7)
    imgs = [ds[i].image for i in range(4)]
    for i in range(3):
        assert not np.array_equal(imgs[i], imgs[i + 1])


def test_save_load_roundtrip(tmp_path):
    sample = generate_scene(SceneSpec(canvas_size=64, seed=21))
    img_path, mask_path = tmp_path / "img.png", tmp_path / "mask.png"
    save_sample_png(sample, img_path, mask_path)
    loaded = load_sample(img_path, mask_path)
    # the generator quantizes exactly like the PNG round trip
    np.testing.assert_allclose(loaded.image, sample.image, atol=1e-6)
    np.testing.assert_array_equal(loaded.mask, sample.mask)


def test_load_sample_mask_thresholds(tmp_path):
    from PIL import Image
    rgb = (RNG.random((10, 10, 3)) * 255).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(tmp_path / "i.png")
    Image.fromarray(np.full((10, 10), 255, np.uint8), "L").save(tmp_path / "m255.png")
    Image.fromarray(np.zeros((10, 10), np.uint8), "L").save(tmp_path / "m0.png")
    Image.fromarray(np.full((10, 10), 127, np.uint8), "L").save(tmp_path / "m127.png")
    assert load_sample(tmp_path / "i.png", tmp_path / "m255.png").mask.all()
    assert not load_sample(tmp_path / "i.png", tmp_path / "m0.png").mask.any()
    assert not load_sample(tmp_path / "i.png", tmp_path / "m127.png").mask.any()


def test_load_sample_errors(tmp_path):
    from PIL import Image
    Image.fromarray((RNG.random((10, 12, 3)) * 255).astype(np.uint8), "RGB") \
        .save(tmp_path / "img.png")
    Image.fromarray(np.zeros((10, 10), np.uint8), "L").save(tmp_path / "bad.png")
    with pytest.raises(FileNotFoundError):
        load_sample(tmp_path / "missing.png", tmp_path / "bad.png")
    with pytest.raises(ValueError):
        load_sample(tmp_path / "img.png", tmp_path / "bad.png")  # size mismatch
    rgb_mask = tmp_path / "rgbmask.png"
    Image.fromarray((RNG.random((10, 12, 3)) * 255).astype(np.uint8), "RGB") \
        .save(rgb_mask)
    with pytest.raises(ValueError):
        load_sample(tmp_path / "img.png", rgb_mask)  # not single-channel


def test_directory_dataset(tmp_path):
    root = tmp_path / "ds"
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    for i in range(3):
        s = generate_scene(SceneSpec(canvas_size=32, seed=i))
        save_sample_png(s, root / "images" / f"{i:03d}.png",
                        root / "masks" / f"{i:03d}.png")
    ds = DirectoryDataset(root)
    assert len(ds) == 3
    assert ds[0].id == "000"
    both = DirectoryDataset([root, root])
    assert len(both) == 6
    with pytest.raises(FileNotFoundError):
        DirectoryDataset(tmp_path / "nothing")


def test_directory_dataset_missing_mask(tmp_path):
    root = tmp_path / "ds"
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    s = generate_scene(SceneSpec(canvas_size=32, seed=0))
    save_sample_png(s, root / "images" / "a.png", root / "masks" / "b.png")
    with pytest.raises(FileNotFoundError):
        DirectoryDataset(root)


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def sample_fixture():
    return generate_scene(SceneSpec(canvas_size=64, seed=33))


def test_flip_involution():
    s = sample_fixture()
    double = flip_sample(flip_sample(s, True, False), True, False)
    np.testing.assert_array_equal(double.image, s.image)
    np.testing.assert_array_equal(double.mask, s.mask)


def test_flip_none_is_identity():
    s = sample_fixture()
    out = flip_sample(s, False, False)
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.mask, s.mask)


def test_double_flip_equals_rot180():
    s = sample_fixture()
    out = flip_sample(s, True, True)
    np.testing.assert_array_equal(out.image, s.image[:, ::-1, ::-1])
    np.testing.assert_array_equal(out.mask, s.mask[::-1, ::-1])


def test_flip_locked_between_image_and_mask():
    s = sample_fixture()
    out = flip_sample(s, True, False)
    # a pixel known glass stays glass after mirroring both
    ys, xs = np.nonzero(s.mask)
    y, x = ys[0], xs[0]
    assert out.mask[y, s.mask.shape[1] - 1 - x] == 1
    np.testing.assert_allclose(out.image[:, y, s.mask.shape[1] - 1 - x],
                               s.image[:, y, x])


def test_augment_flip_distribution():
    s = sample_fixture()
    rng = philox(0)
    outcomes = set()
    for _ in range(40):
        out = augment_flip(s, rng)
        outcomes.add((np.array_equal(out.mask, s.mask),
                      out.mask.tobytes() == s.mask[:, ::-1].tobytes()))
    assert len(outcomes) > 1  # both flips occur across draws


def test_resize_pair_shapes_and_binarity():
    s = sample_fixture()
    out = resize_pair(s, 32)
    assert out.image.shape == (3, 32, 32)
    assert out.mask.shape == (32, 32)
    assert set(np.unique(out.mask)).issubset({0, 1})
    assert out.image.dtype == np.float32


def test_resize_pair_identity():
    s = sample_fixture()
    out = resize_pair(s, 64)
    np.testing.assert_array_equal(out.mask, s.mask)
    np.testing.assert_allclose(out.image, s.image, atol=1e-6)


def test_resize_pair_rejects_bad_side():
    with pytest.raises(ValueError):
        resize_pair(sample_fixture(), 50)


def test_sample_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        Sample(image=np.zeros((3, 8, 8), np.float32), mask=np.zeros((4, 4), np.uint8))
