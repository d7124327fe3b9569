"""Evaluation: top-1 accuracy, attention box mIoU, CMC and mAP.

Evaluation only runs the factual forward pass. Nothing here depends on the
counterfactual module; tests enforce that.
"""

from __future__ import annotations

from collections.abc import Sequence
from typing import NamedTuple

import numpy as np

from .model import AttentionModel, forward
from .synthdata import SyntheticSample
from .tensor import Tensor, no_grad


class Predictions(NamedTuple):
    logits: np.ndarray
    attention: np.ndarray
    representation: np.ndarray


def predict(model: AttentionModel, samples: Sequence[SyntheticSample], batch_size: int = 256) -> Predictions:
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty sample set")
    logits, att, rep = [], [], []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            out = forward(model, Tensor._wrap(np.stack([s.image for s in chunk])))
            logits.append(out.logits.data)
            att.append(out.attention.data)
            rep.append(out.representation.data)
    return Predictions(np.concatenate(logits), np.concatenate(att), np.concatenate(rep))


def evaluate_classification(model: AttentionModel, samples: Sequence[SyntheticSample]) -> float:
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    pred = predict(model, samples).logits.argmax(axis=1)
    labels = np.array([s.class_label for s in samples])
    return float((pred == labels).mean())


def box_iou(a: Sequence[int], b: Sequence[int]) -> float:
    """IoU of half-open pixel boxes (x0, y0, x1, y1)."""
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def upsample_nearest(maps: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour upsampling of (..., H, W) maps to (..., size, size)."""
    h, w = maps.shape[-2:]
    if size % h or size % w:
        raise ValueError(f"image size {size} is not a multiple of the attention grid {h}x{w}")
    return np.repeat(np.repeat(maps, size // h, axis=-2), size // w, axis=-1)


def attention_box(attention: np.ndarray, image_size: int, threshold_fraction: float = 0.5):
    """Tight box around upsampled cells >= threshold * max, or None for all-zero maps.

    ``attention`` is one sample's (M, H, W) stack; heads are merged by max.
    """
    merged = attention.max(axis=0) if attention.ndim == 3 else attention
    peak = merged.max()
    if not peak > 0:
        return None
    up = upsample_nearest(merged, image_size)
    ys, xs = np.nonzero(up >= threshold_fraction * peak)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def attention_miou(attention, bboxes, threshold_fraction: float = 0.5, image_size: int = 32) -> float:
    """Mean IoU between the high-attention rectangle and the ground-truth box."""
    if not 0.0 < threshold_fraction < 1.0:
        raise ValueError(f"threshold_fraction must be in (0, 1), got {threshold_fraction}")
    att = attention.data if isinstance(attention, Tensor) else np.asarray(attention, dtype=np.float64)
    if att.ndim != 4:
        raise ValueError(f"attention must be (N,M,H,W), got {att.shape}")
    if len(bboxes) != att.shape[0]:
        raise ValueError(f"{att.shape[0]} attention stacks but {len(bboxes)} boxes")
    ious = []
    for maps, gt in zip(att, bboxes):
        box = attention_box(maps, image_size, threshold_fraction)
        ious.append(0.0 if box is None else box_iou(box, gt))
    return float(np.mean(ious)) if ious else 0.0


def evaluate_attention(
    model: AttentionModel, samples: Sequence[SyntheticSample], threshold_fraction: float = 0.5
) -> float:
    att = predict(model, samples).attention
    return attention_miou(att, [s.object_bbox for s in samples], threshold_fraction, samples[0].image.shape[-1])


def average_precision(matches: np.ndarray) -> float:
    """AP of a ranked 0/1 relevance vector."""
    hits = np.flatnonzero(matches)
    if hits.size == 0:
        return 0.0
    # plain sequential sums so results agree bit-for-bit with a hand computation
    return sum((np.arange(1, hits.size + 1) / (hits + 1)).tolist()) / hits.size


def retrieval_metrics(q_emb: np.ndarray, q_ids, g_emb: np.ndarray, g_ids) -> tuple[list[float], float]:
    """Single-query CMC (ranks 1..|gallery|) and mAP under Euclidean ranking."""
    q_ids = np.asarray(q_ids)
    g_ids = np.asarray(g_ids)
    present = set(g_ids.tolist())
    for ident in q_ids.tolist():
        if ident not in present:
            raise ValueError(f"query identity {ident} has no match in the gallery")
    # direct differences, not the |q|^2+|g|^2-2qg expansion, so exact ties stay ties
    diff = np.asarray(q_emb, dtype=np.float64)[:, None, :] - np.asarray(g_emb, dtype=np.float64)[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    order = np.argsort(dist, axis=1, kind="stable")
    matches = g_ids[order] == q_ids[:, None]
    first_hit = matches.argmax(axis=1)
    ng = len(g_ids)
    cmc = [(first_hit < k).mean() for k in range(1, ng + 1)]
    m_ap = sum(average_precision(row) for row in matches) / len(matches)
    return [float(c) for c in cmc], m_ap


def evaluate_retrieval(
    model: AttentionModel, query: Sequence[SyntheticSample], gallery: Sequence[SyntheticSample]
) -> tuple[list[float], float]:
    for s in list(query) + list(gallery):
        if s.identity_label is None:
            raise ValueError("retrieval evaluation needs identity labels on every sample")
    q = predict(model, query).representation
    g = predict(model, gallery).representation
    return retrieval_metrics(q, [s.identity_label for s in query], g, [s.identity_label for s in gallery])
