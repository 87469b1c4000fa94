"""Turn a (fused) sample into per-pixel distributions and label maps."""

from __future__ import annotations

from typing import Collection, Tuple

import numpy as np

from .types import (
    VOID,
    PixelClassDistribution,
    SampleTensor,
    encode_panoptic,
    sigmoid,
    softmax,
)

SCORE_THRESH = 0.8
OVERLAP_THRESH = 0.8


def class_distribution_from(logits: np.ndarray, mask_probs: np.ndarray) -> Tuple[np.ndarray, int]:
    """Mask-weighted class softmax, renormalised per pixel.

    Returns the ``(h, w, c)`` distribution and the number of pixels where the
    weights vanished and the uniform fallback was used.
    """
    cls = softmax(logits)[:, :-1]
    weighted = np.einsum("pc,phw->hwc", cls, mask_probs)
    total = weighted.sum(axis=-1, keepdims=True)
    dead = ~(total > 0)
    n_dead = int(dead.sum())
    if n_dead:
        c = cls.shape[1]
        weighted = np.where(dead, 1.0 / c, weighted)
        total = np.where(dead, 1.0, total)
    return weighted / total, n_dead


def pixel_class_distribution(s: SampleTensor) -> PixelClassDistribution:
    probs, n_dead = class_distribution_from(s.logits, sigmoid(s.masks))
    return PixelClassDistribution(probs, n_dead)


def normalize_mask_probs(mask_probs: np.ndarray) -> np.ndarray:
    """Normalise ``(P, h, w)`` sigmoid masks over queries into ``(h, w, P)``."""
    m = np.moveaxis(np.asarray(mask_probs, dtype=np.float64), 0, -1)
    total = m.sum(axis=-1, keepdims=True)
    dead = ~(total > 0)
    if dead.any():
        m = np.where(dead, 1.0 / m.shape[-1], m)
        total = np.where(dead, 1.0, total)
    return m / total


def mask_assignment_distribution(s: SampleTensor) -> np.ndarray:
    """Per-pixel distribution over queries using only the mask head."""
    return normalize_mask_probs(sigmoid(s.masks))


def semantic_inference(d: PixelClassDistribution) -> np.ndarray:
    """Arg-max class id per pixel; ties go to the lowest id, VOID never emitted."""
    probs = d.probs if isinstance(d, PixelClassDistribution) else np.asarray(d)
    return (np.argmax(probs, axis=-1) + 1).astype(np.uint16)


def panoptic_inference(s: SampleTensor, score_thresh: float = SCORE_THRESH,
                       overlap_thresh: float = OVERLAP_THRESH,
                       things: Collection[int] = ()) -> np.ndarray:
    """Query-based panoptic inference.

    Queries whose top class is a real class with probability at least
    ``score_thresh`` compete per pixel on ``class prob * mask prob``.  A query
    keeps the pixels it wins where its own mask is on (sigmoid >= 0.5); the
    segment is dropped if that is less than ``overlap_thresh`` of its binary
    mask area.  Stuff segments of one class merge (instance 0); thing
    segments are numbered per class in query order.  Everything else is VOID.
    """
    if not (0 < score_thresh <= 1 and 0 < overlap_thresh <= 1):
        raise ValueError("thresholds must lie in (0, 1]")
    h, w = s.shape
    out = np.zeros((h, w), dtype=np.uint32)
    probs = softmax(s.logits)
    labels = probs.argmax(axis=1)
    scores = probs[np.arange(len(labels)), labels]
    keep = np.flatnonzero((labels != s.c_total - 1) & (scores >= score_thresh))
    if keep.size == 0:
        return out

    masks = sigmoid(s.masks[keep])
    winner = np.argmax(scores[keep][:, None, None] * masks, axis=0)
    things = set(int(t) for t in things)
    next_instance = {}
    for k, q in enumerate(keep):
        class_id = int(labels[q]) + 1
        won = winner == k
        binary = masks[k] >= 0.5
        area = int(won.sum())
        original = int(binary.sum())
        seg = won & binary
        if area == 0 or original == 0 or not seg.any():
            continue
        if area / original < overlap_thresh:
            continue
        if class_id in things:
            inst = next_instance.get(class_id, 1)
            next_instance[class_id] = inst + 1
        else:
            inst = 0
        out[seg] = encode_panoptic(class_id, inst)
    return out


def semantic_from_panoptic(pan: np.ndarray) -> np.ndarray:
    return (np.asarray(pan, dtype=np.uint32) // 65536).astype(np.uint16)


__all__ = [
    "VOID",
    "class_distribution_from",
    "mask_assignment_distribution",
    "normalize_mask_probs",
    "panoptic_inference",
    "pixel_class_distribution",
    "semantic_from_panoptic",
    "semantic_inference",
]
