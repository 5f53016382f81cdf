"""Query-based mask decoding of the fused pyramid.

A top-down pixel decoder merges the pyramid into dense pixel embeddings at
1/4 resolution; a small transformer refines a fixed set of learned object
queries by cross-attending over the coarser merged maps; each query emits a
mask via a dot product with the pixel embeddings plus a glass/no-object
classification.  Training matches queries to the ground-truth glass mask with
a Hungarian assignment over classification + mask BCE + dice costs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .backbones import FeatureMap, MultiScaleFeatures
from .layers import (MLP, Conv2d, LayerNorm, Linear, Module,
                     MultiHeadAttention, nearest_resize, parameter,
                     sinusoidal_positions_2d)

GLASS, NO_OBJECT = 0, 1


@dataclass
class PixelDecoding:
    """Dense pixel embeddings at 1/4 scale plus the coarser merged maps."""

    pixel_embedding: FeatureMap          # scale 4, embed_dim channels
    context_levels: list                 # scales 8/16/32, embed_dim channels

    @property
    def embed_dim(self):
        return self.pixel_embedding.channels


@dataclass
class QuerySet:
    """Refined query embeddings with glass/no-object logits."""

    embeddings: Tensor                   # (N, Q, E)
    class_logits: Tensor                 # (N, Q, 2)

    @property
    def n_queries(self):
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class LossWeights:
    classification: float = 2.0
    mask_bce: float = 5.0
    dice: float = 5.0
    no_object: float = 0.1


class PixelDecoder(Module):
    """FPN-style top-down merge: 1x1 laterals, upsample-and-add, 3x3 head."""

    def __init__(self, rng, in_channels, embed_dim=64, dtype=np.float32):
        if len(in_channels) != 4:
            raise ValueError("pixel decoder expects a 4-level pyramid")
        self.laterals = [Conv2d(rng, c, embed_dim, 1, dtype=dtype) for c in in_channels]
        self.output_conv = Conv2d(rng, embed_dim, embed_dim, 3, padding=1,
                                  dtype=dtype, weight_std=0.02)
        self.embed_dim = embed_dim

    def forward(self, fused: MultiScaleFeatures) -> PixelDecoding:
        lats = [lat(level.values) for lat, level in zip(self.laterals, fused)]
        merged = [None] * 4
        merged[3] = lats[3]
        for i in (2, 1, 0):
            up = ad.upsample_bilinear(merged[i + 1], lats[i].shape[2], lats[i].shape[3])
            merged[i] = lats[i] + up
        pixel = self.output_conv(merged[0])
        context = [FeatureMap(merged[i], fused[i].scale_denominator) for i in (1, 2, 3)]
        return PixelDecoding(FeatureMap(pixel, 4), context)


class QueryDecoderLayer(Module):
    def __init__(self, rng, dim, n_heads, dtype=np.float32):
        self.norm_cross = LayerNorm(dim, dtype=dtype)
        self.cross_attn = MultiHeadAttention(rng, dim, n_heads, dtype=dtype)
        self.norm_self = LayerNorm(dim, dtype=dtype)
        self.self_attn = MultiHeadAttention(rng, dim, n_heads, dtype=dtype)
        self.norm_ffn = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(rng, dim, dim * 4, dtype=dtype, weight_std=0.02)
        self.fc2 = Linear(rng, dim * 4, dim, dtype=dtype, weight_std=0.02)

    def forward(self, queries, keys, values):
        h = self.norm_cross(queries)
        queries = queries + self.cross_attn(h, keys, values)
        h = self.norm_self(queries)
        queries = queries + self.self_attn(h, h, h)
        h = self.norm_ffn(queries)
        queries = queries + self.fc2(ad.relu(self.fc1(h)))
        return queries


class QueryDecoder(Module):
    """Refines learned query embeddings over the context maps.

    Layer ``l`` cross-attends over context level ``l % 3`` cycling from the
    coarsest (1/32) towards the finest (1/8); positional encodings are added
    to the attention keys only, so permuting tokens together with their
    encodings leaves the output unchanged.
    """

    def __init__(self, rng, embed_dim=64, n_queries=16, n_layers=3, n_heads=4,
                 dtype=np.float32):
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        # unit-scale init so the queries are distinct from the start and the
        # bipartite matching can specialize them
        self.query_embed = parameter(rng, (n_queries, embed_dim), std=1.0, dtype=dtype)
        self.layers = [QueryDecoderLayer(rng, embed_dim, n_heads, dtype=dtype)
                       for _ in range(n_layers)]
        self.final_norm = LayerNorm(embed_dim, dtype=dtype)
        self.class_head = Linear(rng, embed_dim, 2, dtype=dtype, weight_std=0.02)
        # lean towards "no object" at the start; most queries stay unmatched
        self.class_head.bias.data[NO_OBJECT] = 1.0
        self.n_queries = n_queries
        self.embed_dim = embed_dim
        self._dtype = dtype

    def build_context(self, pd: PixelDecoding):
        """Flatten context levels (coarsest first) into (tokens, positions)."""
        out = []
        for fm in reversed(pd.context_levels):          # 1/32, 1/16, 1/8
            n, e, h, w = fm.values.shape
            tokens = ad.transpose(ad.reshape(fm.values, (n, e, h * w)), (0, 2, 1))
            pos = Tensor(sinusoidal_positions_2d(h, w, e, dtype=self._dtype))
            out.append((tokens, pos))
        return out

    def forward_tokens(self, context, batch_size, return_intermediate=False):
        q = ad.reshape(self.query_embed, (1, self.n_queries, self.embed_dim))
        q = ad.concat([q] * batch_size, axis=0) if batch_size > 1 else q
        intermediate = []
        for i, layer in enumerate(self.layers):
            tokens, pos = context[i % len(context)]
            q = layer(q, tokens + pos, tokens)
            if return_intermediate and i < len(self.layers) - 1:
                h = self.final_norm(q)
                intermediate.append(QuerySet(embeddings=h,
                                             class_logits=self.class_head(h)))
        q = self.final_norm(q)
        final = QuerySet(embeddings=q, class_logits=self.class_head(q))
        if return_intermediate:
            return final, intermediate
        return final

    def forward(self, pd: PixelDecoding, return_intermediate=False):
        batch = pd.pixel_embedding.values.shape[0]
        return self.forward_tokens(self.build_context(pd), batch, return_intermediate)


class MaskHead(Module):
    """Per-query MLP mapping an embedding to mask-space, then a dot product
    with the pixel embeddings."""

    def __init__(self, rng, embed_dim=64, dtype=np.float32):
        self.mlp = MLP(rng, embed_dim, embed_dim, embed_dim, n_layers=3, dtype=dtype)
        # keep initial mask logits near zero: saturated sigmoids would stall
        # the dice term at the start of training
        self.mlp.layers[-1].weight.data *= 0.1

    def mask_embeddings(self, queries: QuerySet) -> Tensor:
        return self.mlp(queries.embeddings)             # (N, Q, E)

    def forward(self, queries: QuerySet, pd: PixelDecoding) -> Tensor:
        return predict_from_embeddings(self.mask_embeddings(queries),
                                       pd.pixel_embedding)


def predict_from_embeddings(mask_embed: Tensor, pixel_embedding: FeatureMap) -> Tensor:
    """mask_logit[n, q, y, x] = <mask_embed[n, q], pixel_embedding[n, :, y, x]>."""
    n, e, h, w = pixel_embedding.values.shape
    flat = ad.reshape(pixel_embedding.values, (n, e, h * w))
    logits = ad.matmul(mask_embed, flat)                 # (N, Q, H*W)
    return ad.reshape(logits, (mask_embed.shape[0], mask_embed.shape[1], h, w))


def semantic_inference(queries: QuerySet, mask_logits, out_hw=None) -> np.ndarray:
    """Combine per-query masks into a glass confidence map in [0, 1].

    confidence = sum_q softmax(class_logits_q)[glass] * sigmoid(mask_logit_q),
    clamped to [0, 1] and bilinearly upsampled to ``out_hw`` when given.
    Permutation-invariant over queries.
    """
    with ad.no_grad():
        probs = ad.softmax(ad.as_tensor(queries.class_logits), axis=-1)
        glass_prob = probs.data[:, :, GLASS]             # (N, Q)
        masks = ad.sigmoid(ad.as_tensor(mask_logits)).data
        conf = np.einsum("nq,nqhw->nhw", glass_prob, masks)
        conf = np.clip(conf, 0.0, 1.0)
        if out_hw is not None and out_hw != conf.shape[1:]:
            t = ad.upsample_bilinear(Tensor(conf[:, None]), out_hw[0], out_hw[1])
            conf = np.clip(t.data[:, 0], 0.0, 1.0)
    return conf


def binarize(conf: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a confidence map; confidence == threshold counts as glass."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (np.asarray(conf) >= threshold).astype(np.uint8)


# ---------------------------------------------------------------------------
# losses and matching
# ---------------------------------------------------------------------------

def dice_loss(probs, gt, eps: float = 1.0):
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps); 0 for a perfect match."""
    probs = ad.as_tensor(probs)
    gt = ad.as_tensor(gt)
    inter = (probs * gt).sum()
    denom = probs.sum() + gt.sum() + eps
    return 1.0 - (2.0 * inter + eps) / denom


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy on raw logits (numerically stable)."""
    logits = ad.as_tensor(logits)
    targets = ad.as_tensor(targets)
    return (ad.softplus(logits) - logits * targets).mean()


def hungarian_match(cost: np.ndarray):
    """Minimum-cost assignment of targets to distinct queries.

    cost: (n_queries, n_targets) with n_targets <= n_queries.  Returns
    (query_indices, target_indices) sorted by target index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if cost.shape[1] > cost.shape[0]:
        raise ValueError("more targets than queries")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols)
    return rows[order], cols[order]


@dataclass
class MatchResult:
    loss: Tensor
    assignments: list                    # per image: matched query index or None
    parts: dict = field(default_factory=dict)


def _np_sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _matching_cost(class_logits, mask_logits, gt, weights: LossWeights):
    """Per-query matching cost against the single ground-truth mask (NumPy)."""
    z = class_logits - class_logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    cls_cost = -p[:, GLASS]
    q = mask_logits.shape[0]
    flat = mask_logits.reshape(q, -1)
    g = gt.reshape(-1).astype(flat.dtype)
    bce = (np.maximum(flat, 0) - flat * g[None, :]
           + np.log1p(np.exp(-np.abs(flat)))).mean(axis=1)
    probs = _np_sigmoid(flat)
    inter = probs @ g
    dice = 1.0 - (2.0 * inter + 1.0) / (probs.sum(axis=1) + g.sum() + 1.0)
    # the classification term is amplified relative to its loss weight:
    # assignment hysteresis keeps the same query matched across steps, which
    # stabilizes the bipartite targets and speeds up query specialization
    total = (4.0 * weights.classification * cls_cost + weights.mask_bce * bce
             + weights.dice * dice)
    return total[:, None]                # (Q, 1): one target


def weighted_class_loss(class_logits: Tensor, targets: np.ndarray,
                        weights: LossWeights) -> Tensor:
    """Weighted cross-entropy over all queries; no-object is down-weighted."""
    n, q, _ = class_logits.shape
    logsm = ad.log_softmax(class_logits, axis=-1)
    onehot = np.zeros((n, q, 2), dtype=class_logits.dtype)
    w = np.where(targets == NO_OBJECT, weights.no_object, 1.0).astype(class_logits.dtype)
    onehot[np.arange(n)[:, None], np.arange(q)[None, :], targets] = w
    total = -(logsm * Tensor(onehot)).sum()
    return total / float(w.sum())


def match_and_loss(queries: QuerySet, mask_logits: Tensor, gt_masks: np.ndarray,
                   weights: LossWeights = LossWeights()) -> MatchResult:
    """Hungarian-matched training loss for a batch.

    ``gt_masks`` is (N, H, W) binary at full image resolution; mask terms are
    computed at the mask-logit resolution against a nearest-neighbor
    downsampled ground truth.  Images with no glass pixels contribute only the
    classification term (every query targets no-object).
    """
    n, q, mh, mw = mask_logits.shape
    gt_small = nearest_resize(np.asarray(gt_masks), mh, mw)

    class_targets = np.full((n, q), NO_OBJECT, dtype=np.int64)
    assignments = []
    mask_terms = []
    with ad.no_grad():
        cls_np = queries.class_logits.data
        logits_np = mask_logits.data
    if not (np.isfinite(cls_np).all() and np.isfinite(logits_np).all()):
        raise FloatingPointError("non-finite decoder outputs reached the "
                                 "matching loss")
    for i in range(n):
        g = gt_small[i]
        if g.sum() == 0:
            assignments.append(None)
            continue
        cost = _matching_cost(cls_np[i], logits_np[i], g, weights)
        rows, _ = hungarian_match(cost)
        matched = int(rows[0])
        assignments.append(matched)
        class_targets[i, matched] = GLASS
        logit = mask_logits[i, matched]
        target = g.astype(logits_np.dtype)
        bce = bce_with_logits(logit, target)
        dice = dice_loss(ad.sigmoid(logit), target)
        mask_terms.append(weights.mask_bce * bce + weights.dice * dice)

    loss = weights.classification * weighted_class_loss(
        queries.class_logits, class_targets, weights)
    parts = {"classification": float(loss.data)}
    if mask_terms:
        mask_loss = mask_terms[0]
        for term in mask_terms[1:]:
            mask_loss = mask_loss + term
        mask_loss = mask_loss / float(n)
        parts["mask"] = float(mask_loss.data)
        loss = loss + mask_loss
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite matching loss")
    return MatchResult(loss=loss, assignments=assignments, parts=parts)


def deep_supervision_loss(layer_outputs, gt_masks, weights: LossWeights = LossWeights()):
    """Matched loss summed over decoder layers (final layer last).

    Each (QuerySet, mask_logits) pair is matched and scored independently,
    exactly like the final output; the per-layer losses are summed.  Returns
    the MatchResult of the final layer with the combined loss substituted.
    """
    results = [match_and_loss(q, m, gt_masks, weights) for q, m in layer_outputs]
    total = results[-1].loss
    for r in results[:-1]:
        total = total + r.loss
    return MatchResult(loss=total, assignments=results[-1].assignments,
                       parts={"final": float(results[-1].loss.data),
                              **results[-1].parts})
