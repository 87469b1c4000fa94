"""Segmentation metrics and downstream-task metrics.

Segmentation: confusion-matrix IoU and panoptic quality, both dataset-level
and per image.  Downstream: AURC for failure detection, argmax ECE for
calibration and AUROC for OOD detection.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateLabels, EmptyInput, NoValidClasses, ShapeMismatch
from .types import INSTANCE_OFFSET, VOID, PixelClassDistribution

ECE_BINS = 15


@dataclass(frozen=True)
class ScoreRecord:
    image_id: str
    confidence: float
    risk: float
    is_ood: Optional[bool] = None


def _same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeMismatch(f"prediction {a.shape} and ground truth {b.shape} differ")


# -- semantic ---------------------------------------------------------------

def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Pixel counts indexed ``[gt id, pred id]`` over ids ``0..num_classes``.

    Pixels with VOID ground truth are skipped, so row 0 is always zero; a
    VOID prediction lands in column 0 and counts against the gt class.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _same_shape(pred, gt)
    keep = gt != VOID
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    n = num_classes + 1
    if g.size and (g.max() >= n or p.max() >= n):
        raise ValueError(f"class id exceeds num_classes={num_classes}")
    return np.bincount(g * n + p, minlength=n * n).reshape(n, n)


def class_iou(cm: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """IoU for classes ``1..c`` and the ``TP + FP + FN`` denominators."""
    tp = np.diag(cm)[1:].astype(np.float64)
    fn = cm[1:, :].sum(axis=1) - tp
    fp = cm[:, 1:].sum(axis=0) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    return iou, denom


def miou(cm: np.ndarray) -> float:
    """Mean IoU over classes present in the ground truth."""
    iou, _ = class_iou(cm)
    present = cm[1:, :].sum(axis=1) > 0
    if not present.any():
        raise NoValidClasses("no ground-truth classes")
    return float(iou[present].mean())


def per_image_iou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Mean IoU over classes appearing in gt or prediction (non-VOID pixels)."""
    cm = confusion_matrix(pred, gt, num_classes)
    if cm.sum() == 0:
        raise NoValidClasses("image has only VOID ground truth")
    iou, denom = class_iou(cm)
    return float(iou[denom > 0].mean())


# -- panoptic ---------------------------------------------------------------

@dataclass(frozen=True)
class PQResult:
    pq: float
    sq: float
    rq: float
    per_class: Dict[int, Tuple[float, float, float]]


@dataclass
class PQStat:
    """Per-class TP/FP/FN counts and summed TP IoU; additive across images."""

    tp: Dict[int, int] = field(default_factory=lambda: defaultdict(int))
    fp: Dict[int, int] = field(default_factory=lambda: defaultdict(int))
    fn: Dict[int, int] = field(default_factory=lambda: defaultdict(int))
    iou: Dict[int, float] = field(default_factory=lambda: defaultdict(float))
    gt_classes: Set[int] = field(default_factory=set)

    def __iadd__(self, other: "PQStat") -> "PQStat":
        for mine, theirs in ((self.tp, other.tp), (self.fp, other.fp), (self.fn, other.fn), (self.iou, other.iou)):
            for k, v in theirs.items():
                mine[k] += v
        self.gt_classes |= other.gt_classes
        return self

    def classes(self) -> Sequence[int]:
        keys = set(self.tp) | set(self.fp) | set(self.fn)
        return sorted(k for k in keys if self.tp[k] + self.fp[k] + self.fn[k] > 0)

    def result(self, gt_only: bool = False) -> PQResult:
        """Average per-class PQ/SQ/RQ over classes with any TP, FP or FN.

        ``gt_only`` restricts the average to classes seen in ground truth.
        """
        per_class = {}
        for k in self.classes():
            if gt_only and k not in self.gt_classes:
                continue
            tp, fp, fn = self.tp[k], self.fp[k], self.fn[k]
            sq = self.iou[k] / tp if tp else 0.0
            rq = tp / (tp + 0.5 * fp + 0.5 * fn)
            per_class[k] = (sq * rq, sq, rq)
        if not per_class:
            raise NoValidClasses("no classes to evaluate")
        vals = np.array(list(per_class.values()))
        pq, sq, rq = vals.mean(axis=0)
        return PQResult(float(pq), float(sq), float(rq), per_class)


def pq_image(pred: np.ndarray, gt: np.ndarray) -> Tuple[PQStat, Set[Tuple[int, int]]]:
    """Match segments of one image; return the stats and matched (pred, gt) ids.

    Segments match within a class at IoU > 0.5, where the union excludes
    predicted pixels over VOID ground truth.  Unmatched predictions lying more
    than half over VOID are not counted as false positives.
    """
    pred = np.asarray(pred, dtype=np.uint64)
    gt = np.asarray(gt, dtype=np.uint64)
    _same_shape(pred, gt)
    stat = PQStat()
    pair, inter = np.unique(gt.ravel() * np.uint64(1 << 32) + pred.ravel(), return_counts=True)
    pair_gt = pair >> np.uint64(32)
    pair_pred = pair & np.uint64(0xFFFFFFFF)
    gt_ids, gt_area = np.unique(gt, return_counts=True)
    pred_ids, pred_area = np.unique(pred, return_counts=True)
    gt_area = dict(zip(gt_ids.tolist(), gt_area.tolist()))
    pred_area = dict(zip(pred_ids.tolist(), pred_area.tolist()))
    void_in_pred = {int(p): int(n) for g, p, n in zip(pair_gt, pair_pred, inter) if g == VOID}

    matched: Set[Tuple[int, int]] = set()
    matched_gt, matched_pred = set(), set()
    for g, p, n in zip(pair_gt.tolist(), pair_pred.tolist(), inter.tolist()):
        if g == VOID or p == VOID or g // INSTANCE_OFFSET != p // INSTANCE_OFFSET:
            continue
        union = pred_area[p] + gt_area[g] - n - void_in_pred.get(p, 0)
        iou = n / union
        if iou > 0.5:
            k = g // INSTANCE_OFFSET
            stat.tp[k] += 1
            stat.iou[k] += iou
            matched.add((p, g))
            matched_gt.add(g)
            matched_pred.add(p)

    for g in gt_area:
        if g == VOID:
            continue
        stat.gt_classes.add(g // INSTANCE_OFFSET)
        if g not in matched_gt:
            stat.fn[g // INSTANCE_OFFSET] += 1
    for p, area in pred_area.items():
        if p == VOID or p in matched_pred:
            continue
        if void_in_pred.get(p, 0) / area > 0.5:
            continue
        stat.fp[p // INSTANCE_OFFSET] += 1
    return stat, matched


def pq(pred: np.ndarray, gt: np.ndarray) -> PQResult:
    return pq_image(pred, gt)[0].result()


def per_image_pq(pred: np.ndarray, gt: np.ndarray) -> float:
    return pq(pred, gt).pq


# -- calibration ------------------------------------------------------------

def _bin_index(conf: np.ndarray, bins: int) -> np.ndarray:
    edges = np.linspace(0.0, 1.0, bins + 1)
    # right-closed bins; confidence 0 joins the first bin
    return np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)


class ECEAccumulator:
    """Streaming equal-width argmax ECE."""

    def __init__(self, bins: int = ECE_BINS):
        if bins < 1:
            raise ValueError("bins must be >= 1")
        self.bins = bins
        self.count = np.zeros(bins, dtype=np.int64)
        self.correct = np.zeros(bins, dtype=np.int64)
        # per-bin exact partial sums, so bin means do not drift with order
        self._conf_parts = [[] for _ in range(bins)]

    def add(self, confidence, correct) -> "ECEAccumulator":
        conf = np.asarray(confidence, dtype=np.float64).ravel()
        ok = np.asarray(correct, dtype=bool).ravel()
        if conf.shape != ok.shape:
            raise ShapeMismatch("confidence and correctness lengths differ")
        if conf.size and (conf.min() < 0 or conf.max() > 1 or not np.isfinite(conf).all()):
            raise ValueError("confidence must lie in [0, 1]")
        idx = _bin_index(conf, self.bins)
        self.count += np.bincount(idx, minlength=self.bins)
        self.correct += np.bincount(idx, weights=ok, minlength=self.bins).astype(np.int64)
        order = np.argsort(idx, kind="stable")
        cuts = np.cumsum(np.bincount(idx, minlength=self.bins))[:-1]
        for b, chunk in enumerate(np.split(conf[order], cuts)):
            if chunk.size:
                self._conf_parts[b].append(math.fsum(chunk))
        return self

    def __iadd__(self, other: "ECEAccumulator") -> "ECEAccumulator":
        if other.bins != self.bins:
            raise ValueError("cannot merge accumulators with different bin counts")
        self.count += other.count
        self.correct += other.correct
        for mine, theirs in zip(self._conf_parts, other._conf_parts):
            mine.extend(theirs)
        return self

    @property
    def conf_sum(self) -> np.ndarray:
        return np.array([math.fsum(parts) for parts in self._conf_parts])

    def value(self) -> float:
        n = self.count.sum()
        if n == 0:
            raise EmptyInput("no calibration samples")
        used = self.count > 0
        acc = self.correct[used] / self.count[used]
        conf = self.conf_sum[used] / self.count[used]
        return float(np.sum(self.count[used] / n * np.abs(acc - conf)))


def ece(confidence, correct, bins: int = ECE_BINS) -> float:
    return ECEAccumulator(bins).add(confidence, correct).value()


def calib_samples_semantic(d: PixelClassDistribution, confidence: np.ndarray, gt: np.ndarray):
    """(confidence, correct) per non-VOID pixel; correct means the arg-max
    class of ``d`` equals the ground-truth class."""
    probs = d.probs if isinstance(d, PixelClassDistribution) else np.asarray(d)
    conf = np.asarray(confidence)
    gt = np.asarray(gt)
    _same_shape(conf, gt)
    if probs.shape[:2] != gt.shape:
        raise ShapeMismatch(f"distribution {probs.shape[:2]} and ground truth {gt.shape} differ")
    keep = gt != VOID
    pred = np.argmax(probs, axis=-1) + 1
    return conf[keep], (pred == gt)[keep]


def calib_samples_panoptic(confidence: np.ndarray, pred: np.ndarray, gt: np.ndarray,
                           matches: Iterable[Tuple[int, int]]):
    """(confidence, correct) per non-VOID gt pixel; correct means the predicted
    segment there is PQ-matched to the gt segment there."""
    conf = np.asarray(confidence)
    pred = np.asarray(pred, dtype=np.uint64)
    gt = np.asarray(gt, dtype=np.uint64)
    _same_shape(pred, gt)
    _same_shape(conf, gt)
    keep = gt != VOID
    key = gt[keep] * np.uint64(1 << 32) + pred[keep]
    ok_keys = np.array(sorted(int(g) * (1 << 32) + int(p) for p, g in matches if p != VOID), dtype=np.uint64)
    return conf[keep], np.isin(key, ok_keys)


# -- selective prediction / OOD ---------------------------------------------

def aurc(confidence, risk, ids=None) -> float:
    """Area under the risk-coverage curve as the mean selective risk over
    all ``n`` coverage levels.  Ties in confidence are broken by id."""
    conf = np.asarray(confidence, dtype=np.float64)
    r = np.asarray(risk, dtype=np.float64)
    if conf.size == 0:
        raise EmptyInput("no score records")
    if conf.shape != r.shape:
        raise ShapeMismatch("confidence and risk lengths differ")
    if not (np.isfinite(conf).all() and np.isfinite(r).all()):
        raise ValueError("non-finite score record")
    keys = np.arange(conf.size) if ids is None else np.asarray(ids)
    order = np.lexsort((keys, -conf))
    selective = np.cumsum(r[order]) / np.arange(1, conf.size + 1)
    return float(selective.mean())


def aurc_records(records: Sequence[ScoreRecord]) -> float:
    return aurc([r.confidence for r in records], [r.risk for r in records], [r.image_id for r in records])


def auroc(scores, labels) -> float:
    """Mann-Whitney form: P(pos > neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"need both classes, got {n_pos} positive / {n_neg} negative")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
