"""Training machinery: LR schedule, optimizer hygiene, checkpoints, variants,
the speed benchmark, and a short smoke training run."""

import numpy as np
import pytest

from glasseg import autodiff as ad
from glasseg.autodiff import Tensor
from glasseg.backbones import (GeneralBackboneConfig, LearnedBackboneConfig,
                               freeze_check, params_hash, snapshot_params)
from glasseg.data import SceneSpec, SyntheticGlassDataset
from glasseg.metrics import MetricConfig
from glasseg.model import DecoderConfig, GlassSegmenter
from glasseg.train import (AdamW, SpeedReport, TrainConfig, benchmark_speed,
                           build_variant, checkpoint_hash, count_params,
                           load_checkpoint, lr_at, save_checkpoint, train)

SMALL_LEARNED = LearnedBackboneConfig(stage_channels=(8, 8, 16, 16))
SMALL_GENERAL = GeneralBackboneConfig(embed_dim=16, num_blocks=4,
                                      tap_indices=(1, 2, 3, 4))
SMALL_DECODER = DecoderConfig(embed_dim=16, n_queries=4, n_layers=2, n_heads=2)


def small_model(variant="full", seed=0):
    return build_variant(variant, seed=seed, learned_cfg=SMALL_LEARNED,
                         general_cfg=SMALL_GENERAL, decoder_cfg=SMALL_DECODER)


def small_train_cfg(**kw):
    defaults = dict(epochs=1, batch_size=4, warmup_steps=1, seed=0,
                    image_side=64, val_batch_size=8)
    defaults.update(kw)
    return TrainConfig(**defaults)


def tiny_sets(n_train=8, n_val=4, side=64):
    spec = SceneSpec(canvas_size=side)
    return (SyntheticGlassDataset(n_train, base_seed=50, spec=spec),
            SyntheticGlassDataset(n_val, base_seed=60, spec=spec))


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

def test_lr_schedule_endpoints_and_peak():
    base, warmup, total = 1e-4, 500, 2000
    assert lr_at(0, base, warmup, total) == 0.0
    assert lr_at(warmup, base, warmup, total) == base
    assert lr_at(total, base, warmup, total) == 0.0
    mid = warmup + (total - warmup) // 2
    assert abs(lr_at(mid, base, warmup, total) - base / 2) < 1e-18


def test_lr_schedule_piecewise_linear_closed_form():
    base, warmup, total = 1e-4, 50, 1920
    for step in np.linspace(0, total, 100).astype(int):
        expected = (base * step / warmup if step < warmup
                    else base * (total - step) / (total - warmup))
        assert lr_at(int(step), base, warmup, total) == pytest.approx(expected,
                                                                      abs=1e-18)


def test_lr_schedule_continuous_at_warmup():
    base, warmup, total = 3e-4, 50, 1000
    below = lr_at(warmup - 1, base, warmup, total)
    at = lr_at(warmup, base, warmup, total)
    above = lr_at(warmup + 1, base, warmup, total)
    assert below < at and above < at
    assert at == base


def test_lr_schedule_domain_errors():
    with pytest.raises(ValueError):
        lr_at(-1, 1e-4, 50, 100)
    with pytest.raises(ValueError):
        lr_at(101, 1e-4, 50, 100)
    with pytest.raises(ValueError):
        lr_at(0, 1e-4, 100, 100)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_adamw_rejects_frozen_params():
    frozen = Tensor(np.zeros(3, np.float32), requires_grad=False)
    with pytest.raises(ValueError):
        AdamW([frozen])


def test_adamw_state_only_for_given_params():
    model = small_model()
    trainable = model.trainable_parameters()
    opt = AdamW(trainable)
    assert len(opt.params) == len(trainable) == len(opt.m) == len(opt.v)
    frozen_ids = {id(p) for p in model.frozen_parameters()}
    assert not frozen_ids.intersection({id(p) for p in opt.params})
    assert len(model.parameters()) > len(trainable)   # frozen subset nonempty


def test_adamw_decoupled_weight_decay_moves_params_without_gradient_loss():
    p = Tensor(np.ones(4, np.float32), requires_grad=True)
    opt = AdamW([p], weight_decay=0.1)
    p.grad = np.zeros(4, np.float32)
    opt.step(lr=0.5)
    # pure decay: p -= lr * wd * p
    np.testing.assert_allclose(p.data, 1.0 - 0.05, rtol=1e-6)


def test_adamw_step_direction():
    p = Tensor(np.zeros(3, np.float32), requires_grad=True)
    opt = AdamW([p], weight_decay=0.0)
    p.grad = np.array([1.0, -1.0, 0.0], np.float32)
    opt.step(lr=1e-2)
    assert p.data[0] < 0 < p.data[1]
    assert p.data[2] == 0.0


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_and_hash_stability(tmp_path):
    arrays = {"w": np.arange(12, dtype=np.float32).reshape(3, 4),
              "b": np.ones(3, np.float64)}
    manifest = {"config_hash": "abc", "seed": 1, "step": 10}
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(p1, arrays, manifest)
    save_checkpoint(p2, arrays, manifest)
    assert checkpoint_hash(p1) == checkpoint_hash(p2)
    loaded, loaded_manifest = load_checkpoint(p1)
    assert loaded_manifest == manifest
    for k in arrays:
        np.testing.assert_array_equal(loaded[k], arrays[k])
        assert loaded[k].dtype == arrays[k].dtype


def test_checkpoint_rejects_alien_files(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"definitely not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(p)


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------

def test_build_variant_names():
    with pytest.raises(ValueError):
        build_variant("bogus")
    for name in ("full", "learned_only", "general_only", "general_small", "no_se"):
        model = small_model(name)
        assert model.variant == name


def test_variant_parameter_relations():
    full = small_model("full")
    no_se = small_model("no_se")
    learned_only = small_model("learned_only")
    assert count_params(no_se)[0] < count_params(full)[0]
    total, trainable = count_params(full)
    assert total > trainable
    lo_total, lo_trainable = count_params(learned_only)
    assert lo_total == lo_trainable
    assert len(learned_only.frozen_parameters()) == 0


def test_general_small_is_smaller():
    general = GeneralBackboneConfig(embed_dim=32, num_blocks=8)
    full = build_variant("full", learned_cfg=SMALL_LEARNED, general_cfg=general,
                         decoder_cfg=SMALL_DECODER)
    small = build_variant("general_small", learned_cfg=SMALL_LEARNED,
                          general_cfg=general, decoder_cfg=SMALL_DECODER)
    full_frozen = sum(p.data.size for p in full.frozen_parameters())
    small_frozen = sum(p.data.size for p in small.frozen_parameters())
    assert small_frozen < full_frozen


def test_variants_produce_identical_confidence_shapes():
    imgs = np.random.default_rng(0).standard_normal((2, 3, 64, 64)).astype(np.float32)
    shapes = set()
    for name in ("full", "learned_only", "general_only", "general_small", "no_se"):
        conf = small_model(name).predict(imgs)
        shapes.add(conf.shape)
        assert conf.min() >= 0.0 and conf.max() <= 1.0
    assert shapes == {(2, 64, 64)}


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_train_one_epoch_step_count_and_history():
    model = small_model()
    train_set, val_set = tiny_sets(8, 4)
    cfg = small_train_cfg(epochs=1, batch_size=8, warmup_steps=0)
    history, best = train(model, train_set, val_set, cfg,
                          metric_cfg=MetricConfig())
    assert len(history.steps) == 1          # ceil(8/8) * 1 epoch
    assert len(history.epochs) == 1
    assert best is not None and "iou" in best["metrics"]


def test_train_frozen_backbone_untouched_and_learned_changes():
    model = small_model()
    before_frozen = model.frozen_state()
    before_learned = snapshot_params(model.learned)
    train_set, val_set = tiny_sets(8, 4)
    train(model, train_set, val_set, small_train_cfg(epochs=2, batch_size=4))
    assert freeze_check(before_frozen, model.frozen_state())
    assert not freeze_check(before_learned, snapshot_params(model.learned))


def test_train_seed_determinism():
    results = []
    for _ in range(2):
        model = small_model(seed=3)
        train_set, val_set = tiny_sets(8, 4)
        history, best = train(model, train_set, val_set,
                              small_train_cfg(seed=3, epochs=1, batch_size=4))
        results.append((history.epochs[-1][1], params_hash(snapshot_params(model))))
    assert results[0] == results[1]


def test_train_aborts_on_nonfinite_loss():
    model = small_model()
    # poison a weight so the forward pass produces NaNs
    model.pixel_decoder.output_conv.weight.data[:] = np.nan
    train_set, val_set = tiny_sets(4, 2)
    with pytest.raises(FloatingPointError):
        train(model, train_set, val_set, small_train_cfg(epochs=1, batch_size=2))


def test_train_warmup_must_fit():
    model = small_model()
    train_set, val_set = tiny_sets(4, 2)
    with pytest.raises(ValueError):
        train(model, train_set, val_set,
              small_train_cfg(epochs=1, batch_size=4, warmup_steps=10))


# ---------------------------------------------------------------------------
# speed benchmark
# ---------------------------------------------------------------------------

def test_benchmark_speed_fps_identity():
    model = small_model("learned_only")
    report = benchmark_speed(model, n_passes=5, image_side=64, warmup=1)
    assert report.n_passes == 5
    assert abs(report.fps * report.mean_latency_s - 1.0) <= 1e-9
    assert report.variant == "learned_only"


def test_benchmark_speed_rejects_zero_passes():
    with pytest.raises(ValueError):
        benchmark_speed(small_model("learned_only"), n_passes=0, image_side=64)


def test_speed_report_consistency_enforced():
    with pytest.raises(ValueError):
        SpeedReport(n_passes=10, warmup_passes=1, mean_latency_s=0.5, fps=3.0,
                    image_side=64, variant="full")
