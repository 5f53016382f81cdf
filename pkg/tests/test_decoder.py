"""Decoder contracts: pixel/query decoding shapes and invariances, mask
prediction, semantic inference, losses, and Hungarian matching vs brute force."""

import itertools

import numpy as np
import pytest

from glasseg import autodiff as ad
from glasseg.autodiff import Tensor
from glasseg.backbones import FeatureMap, MultiScaleFeatures
from glasseg.decoder import (GLASS, NO_OBJECT, LossWeights, MaskHead,
                             PixelDecoder, QueryDecoder, QuerySet, bce_with_logits,
                             binarize, deep_supervision_loss, dice_loss,
                             hungarian_match, match_and_loss,
                             predict_from_embeddings, semantic_inference)
from glasseg.gradcheck import rel_error
from glasseg.rng import philox

RNG = np.random.default_rng(5)


def make_pyramid(side=64, channels=(8, 16, 24, 32), batch=2, requires_grad=False,
                 dtype=np.float32):
    levels = []
    for c, s in zip(channels, (4, 8, 16, 32)):
        data = RNG.standard_normal((batch, c, side // s, side // s)).astype(dtype)
        levels.append(FeatureMap(Tensor(data, requires_grad=requires_grad), s))
    return MultiScaleFeatures(levels)


# ---------------------------------------------------------------------------
# pixel decoder
# ---------------------------------------------------------------------------

def test_pixel_decode_shapes():
    pd_module = PixelDecoder(philox(0), (8, 16, 24, 32), embed_dim=16)
    pd = pd_module(make_pyramid(side=128))
    assert pd.pixel_embedding.data.shape == (2, 16, 32, 32)
    assert pd.pixel_embedding.scale_denominator == 4
    assert [c.scale_denominator for c in pd.context_levels] == [8, 16, 32]
    assert all(c.channels == 16 for c in pd.context_levels)


def test_pixel_decode_zero_input_is_bias_only_and_constant():
    pd_module = PixelDecoder(philox(0), (4, 4, 4, 4), embed_dim=8)
    zero = MultiScaleFeatures([
        FeatureMap(np.zeros((1, 4, 32 // s, 32 // s), np.float32), s)
        for s in (4, 8, 16, 32)])
    pd = pd_module(zero)
    emb = pd.pixel_embedding.data
    # spatially constant: every position equals the first
    np.testing.assert_allclose(emb, np.broadcast_to(emb[:, :, :1, :1], emb.shape),
                               atol=1e-6)


def test_pixel_decode_channel_mismatch():
    pd_module = PixelDecoder(philox(0), (8, 16, 24, 32), embed_dim=16)
    bad = make_pyramid(channels=(16, 16, 24, 32))
    with pytest.raises(ValueError):
        pd_module(bad)


def test_pixel_decode_gradient_check():
    pd_module = PixelDecoder(philox(0), (3, 4, 5, 6), embed_dim=8, dtype=np.float64)
    pyramid = make_pyramid(side=32, channels=(3, 4, 5, 6), batch=1,
                           requires_grad=True, dtype=np.float64)
    proj = RNG.standard_normal((1, 8, 8, 8))

    def value():
        with ad.no_grad():
            out = pd_module(pyramid)
        return float((out.pixel_embedding.data * proj).sum())

    out = pd_module(pyramid)
    ad.backward((out.pixel_embedding.values * Tensor(proj)).sum())
    rng = np.random.default_rng(3)
    eps = 1e-5
    worst = 0.0
    params = dict(pd_module.named_parameters())
    for name in ("laterals.0.weight", "laterals.3.weight", "output_conv.weight",
                 "output_conv.bias"):
        p = params[name]
        flat = p.data.reshape(-1)
        for pos in rng.choice(flat.size, size=3, replace=False):
            orig = flat[pos]
            flat[pos] = orig + eps
            f_plus = value()
            flat[pos] = orig - eps
            f_minus = value()
            flat[pos] = orig
            num = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, rel_error(np.array(p.grad.reshape(-1)[pos]),
                                         np.array(num), floor=1e-6))
    assert worst <= 1e-3, worst


# ---------------------------------------------------------------------------
# query decoder
# ---------------------------------------------------------------------------

def test_query_decode_shapes():
    qd = QueryDecoder(philox(1), embed_dim=16, n_queries=16, n_layers=3, n_heads=4)
    pd = PixelDecoder(philox(0), (8, 16, 24, 32), embed_dim=16)(make_pyramid())
    queries = qd(pd)
    assert queries.embeddings.shape == (2, 16, 16)
    assert queries.class_logits.shape == (2, 16, 2)


def test_query_decode_rejects_zero_layers():
    with pytest.raises(ValueError):
        QueryDecoder(philox(1), n_layers=0)


def test_query_decode_deterministic():
    qd = QueryDecoder(philox(1), embed_dim=16, n_queries=4, n_layers=2, n_heads=2)
    pd = PixelDecoder(philox(0), (8, 16, 24, 32), embed_dim=16)(make_pyramid())
    with ad.no_grad():
        a = qd(pd)
        b = qd(pd)
    np.testing.assert_array_equal(a.embeddings.data, b.embeddings.data)
    np.testing.assert_array_equal(a.class_logits.data, b.class_logits.data)


def test_query_decode_token_permutation_equivariance():
    qd = QueryDecoder(philox(1), embed_dim=16, n_queries=4, n_layers=3, n_heads=2,
                      dtype=np.float64)
    pd = PixelDecoder(philox(0), (8, 16, 24, 32), embed_dim=16,
                      dtype=np.float64)(make_pyramid(dtype=np.float64))
    context = qd.build_context(pd)
    with ad.no_grad():
        base = qd.forward_tokens(context, batch_size=2)
        rng = np.random.default_rng(0)
        permuted = []
        for tokens, pos in context:
            perm = rng.permutation(tokens.shape[1])
            permuted.append((Tensor(tokens.data[:, perm]), Tensor(pos.data[perm])))
        shuffled = qd.forward_tokens(permuted, batch_size=2)
    np.testing.assert_allclose(base.embeddings.data, shuffled.embeddings.data,
                               atol=1e-10)
    np.testing.assert_allclose(base.class_logits.data, shuffled.class_logits.data,
                               atol=1e-10)


# ---------------------------------------------------------------------------
# mask prediction
# ---------------------------------------------------------------------------

def test_predict_masks_shapes():
    head = MaskHead(philox(2), embed_dim=16)
    pd = PixelDecoder(philox(0), (8, 16, 24, 32), embed_dim=16)(make_pyramid(side=128))
    queries = QueryDecoder(philox(1), embed_dim=16, n_queries=16, n_layers=1,
                           n_heads=2)(pd)
    logits = head(queries, pd)
    assert logits.shape == (2, 16, 32, 32)


def test_predict_masks_zero_embedding_zero_logits():
    head = MaskHead(philox(2), embed_dim=8)
    # zero biases so MLP(0) == 0
    for layer in head.mlp.layers:
        layer.bias.data[:] = 0
    queries = QuerySet(embeddings=Tensor(np.zeros((1, 3, 8), np.float32)),
                       class_logits=Tensor(np.zeros((1, 3, 2), np.float32)))
    pe = FeatureMap(RNG.standard_normal((1, 8, 4, 4)).astype(np.float32), 4)
    logits = head(queries, type("PD", (), {"pixel_embedding": pe})())
    np.testing.assert_array_equal(logits.data, 0)


def test_predict_masks_bilinear_in_mask_embedding():
    me = Tensor(RNG.standard_normal((1, 2, 8)).astype(np.float32))
    pe = FeatureMap(RNG.standard_normal((1, 8, 4, 4)).astype(np.float32), 4)
    once = predict_from_embeddings(me, pe).data
    twice = predict_from_embeddings(Tensor(2.0 * me.data), pe).data
    np.testing.assert_allclose(twice, 2.0 * once, rtol=1e-6)


# ---------------------------------------------------------------------------
# semantic inference + binarize
# ---------------------------------------------------------------------------

def query_set(class_logits, embeddings=None):
    class_logits = np.asarray(class_logits, np.float32)
    n, q, _ = class_logits.shape
    emb = embeddings if embeddings is not None else np.zeros((n, q, 4), np.float32)
    return QuerySet(embeddings=Tensor(emb), class_logits=Tensor(class_logits))


def test_semantic_inference_saturated_single_query():
    qs = query_set([[[30.0, -30.0]]])            # glass prob ~ 1
    logits = np.full((1, 1, 4, 4), 30.0, np.float32)
    conf = semantic_inference(qs, logits)
    assert conf.shape == (1, 4, 4)
    assert np.all(conf.astype(np.float64) > 1.0 - 1e-9)


def test_semantic_inference_no_glass_queries():
    qs = query_set([[[-40.0, 40.0]] * 3])        # all queries: no-object
    logits = RNG.standard_normal((1, 3, 4, 4)).astype(np.float32)
    conf = semantic_inference(qs, logits)
    np.testing.assert_allclose(conf, 0.0, atol=1e-12)


def test_semantic_inference_bounded_and_upsampled():
    qs = query_set(RNG.standard_normal((2, 5, 2)).astype(np.float32))
    logits = (RNG.standard_normal((2, 5, 8, 8)) * 10).astype(np.float32)
    conf = semantic_inference(qs, logits, out_hw=(32, 32))
    assert conf.shape == (2, 32, 32)
    assert conf.min() >= 0.0 and conf.max() <= 1.0


def test_semantic_inference_query_permutation_invariant():
    cls = RNG.standard_normal((1, 6, 2)).astype(np.float32)
    logits = RNG.standard_normal((1, 6, 4, 4)).astype(np.float32)
    base = semantic_inference(query_set(cls), logits)
    perm = np.random.default_rng(1).permutation(6)
    shuffled = semantic_inference(query_set(cls[:, perm]), logits[:, perm])
    np.testing.assert_allclose(base, shuffled, atol=1e-7)


def test_binarize_threshold_rules():
    conf = np.full((3, 3), 0.9)
    np.testing.assert_array_equal(binarize(conf, 0.5), 1)
    conf = np.full((3, 3), 0.5)
    np.testing.assert_array_equal(binarize(conf, 0.5), 1)  # ties count as glass
    checker = np.indices((4, 4)).sum(0) % 2 * 0.6 + 0.2    # 0.2 / 0.8
    np.testing.assert_array_equal(binarize(checker, 0.5),
                                  (np.indices((4, 4)).sum(0) % 2).astype(np.uint8))
    with pytest.raises(ValueError):
        binarize(conf, 0.0)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_dice_loss_values():
    ones = np.ones((4, 4), np.float32)
    assert abs(float(dice_loss(Tensor(ones), ones).data)) < 1e-7
    zeros = np.zeros((4, 4), np.float32)
    # all-zero prediction vs all-ones target: 1 - 1/17
    val = float(dice_loss(Tensor(zeros), ones).data)
    assert abs(val - (1.0 - 1.0 / 17.0)) < 1e-7
    # both empty: eps cancels -> 0
    assert abs(float(dice_loss(Tensor(zeros), zeros).data)) < 1e-7


def test_bce_with_logits_matches_reference():
    logits = RNG.standard_normal((5, 5)).astype(np.float64)
    targets = (RNG.random((5, 5)) > 0.5).astype(np.float64)
    got = float(bce_with_logits(Tensor(logits), targets).data)
    p = 1.0 / (1.0 + np.exp(-logits))
    ref = float(np.mean(-(targets * np.log(p) + (1 - targets) * np.log(1 - p))))
    assert abs(got - ref) < 1e-9


# ---------------------------------------------------------------------------
# Hungarian matching vs brute force
# ---------------------------------------------------------------------------

def brute_force_assignment(cost):
    """Enumerate every assignment of targets to distinct queries."""
    q, t = cost.shape
    best, best_cost = None, np.inf
    for rows in itertools.permutations(range(q), t):
        total = sum(cost[r, c] for c, r in enumerate(rows))
        if total < best_cost:
            best_cost = total
            best = rows
    return np.array(best), best_cost


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(17)
    for _ in range(200):
        q = int(rng.integers(1, 7))
        t = int(rng.integers(1, q + 1))
        cost = rng.standard_normal((q, t))
        rows, cols = hungarian_match(cost)
        expected_rows, expected_cost = brute_force_assignment(cost)
        got_cost = cost[rows, cols].sum()
        assert abs(got_cost - expected_cost) < 1e-12
        np.testing.assert_array_equal(rows, expected_rows)


def test_hungarian_rejects_bad_shapes():
    with pytest.raises(ValueError):
        hungarian_match(np.zeros((2, 3)))   # more targets than queries
    with pytest.raises(ValueError):
        hungarian_match(np.zeros(3))


# ---------------------------------------------------------------------------
# match_and_loss
# ---------------------------------------------------------------------------

def random_outputs(batch=2, q=4, hw=8, seed=0):
    rng = np.random.default_rng(seed)
    queries = QuerySet(
        embeddings=Tensor(rng.standard_normal((batch, q, 8)).astype(np.float32)),
        class_logits=Tensor(rng.standard_normal((batch, q, 2)).astype(np.float32),
                            requires_grad=True))
    logits = Tensor(rng.standard_normal((batch, q, hw, hw)).astype(np.float32),
                    requires_grad=True)
    return queries, logits


def test_match_and_loss_empty_gt_classification_only():
    queries, logits = random_outputs()
    gt = np.zeros((2, 32, 32), np.uint8)
    res = match_and_loss(queries, logits, gt)
    assert res.assignments == [None, None]
    assert "mask" not in res.parts
    assert np.isfinite(res.loss.data) and res.loss.data > 0


def test_match_and_loss_saturated_prediction_near_zero_mask_terms():
    q, hw = 1, 8
    gt_small = np.zeros((hw, hw), np.uint8)
    gt_small[2:6, 2:6] = 1
    logits_arr = np.where(gt_small, 10.0, -10.0).astype(np.float32)[None, None]
    queries = QuerySet(embeddings=Tensor(np.zeros((1, q, 4), np.float32)),
                       class_logits=Tensor(np.array([[[5.0, -5.0]]], np.float32),
                                           requires_grad=True))
    logits = Tensor(logits_arr, requires_grad=True)
    gt_full = np.kron(gt_small, np.ones((4, 4), np.uint8))[None]
    res = match_and_loss(queries, logits, gt_full)
    assert res.assignments == [0]
    assert res.parts["mask"] < 0.05
    assert float(res.loss.data) < 0.1


def test_match_and_loss_gradients_flow_and_finite():
    queries, logits = random_outputs()
    gt = np.zeros((2, 32, 32), np.uint8)
    gt[0, 4:16, 4:20] = 1     # one empty, one non-empty
    res = match_and_loss(queries, logits, gt)
    assert np.isfinite(res.loss.data)
    ad.backward(res.loss)
    assert logits.grad is not None and np.isfinite(logits.grad).all()
    assert queries.class_logits.grad is not None
    # the empty image contributes no mask gradient
    assert np.all(logits.grad[1] == 0)


def test_loss_non_negative_random():
    for seed in range(10):
        queries, logits = random_outputs(seed=seed)
        gt = (np.random.default_rng(seed).random((2, 32, 32)) > 0.5).astype(np.uint8)
        res = match_and_loss(queries, logits, gt)
        assert res.loss.data >= 0


def test_deep_supervision_sums_layers():
    queries, logits = random_outputs(seed=1)
    gt = (np.random.default_rng(2).random((2, 32, 32)) > 0.5).astype(np.uint8)
    single = match_and_loss(queries, logits, gt)
    double = deep_supervision_loss([(queries, logits), (queries, logits)], gt)
    np.testing.assert_allclose(double.loss.data, 2.0 * single.loss.data, rtol=1e-6)
