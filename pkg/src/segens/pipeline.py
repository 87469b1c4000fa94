"""Per-image evaluation and dataset-level reduction.

Each manifest record is processed independently (optionally in a thread
pool); reduction happens afterwards in manifest order so results do not
depend on scheduling.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import io as sio
from .aggregate import aggregate_stream
from .align import NEUTRAL_LOGIT, EnsembleConfig, build_aligned_ensemble
from .errors import EmptyEnsemble, MissingFlow, SegensError
from .fuse import OVERLAP_THRESH, SCORE_THRESH, panoptic_inference, pixel_class_distribution, semantic_inference
from .metrics import (
    ECE_BINS,
    ECEAccumulator,
    PQStat,
    aurc,
    auroc,
    calib_samples_panoptic,
    calib_samples_semantic,
    class_iou,
    confusion_matrix,
    miou,
    pq_image,
)
from .pixagg import PixelAgg, confidence_score, ood_score
from .remap import ClassMapping, remap_panoptic, remap_semantic
from .uncertainty import MEASURES, compute_measures, default_accumulators

log = logging.getLogger(__name__)

DOMAINS = ("semantic", "panoptic", "both")
TASKS = ("failure", "calib", "ood", "seg")


@dataclass
class EvalOptions:
    configs: Sequence[Optional[EnsembleConfig]] = (None,)
    measures: Sequence[str] = MEASURES
    pixel_aggs: Sequence[PixelAgg] = (PixelAgg("image-mean"),)
    domain: str = "both"
    tasks: Sequence[str] = TASKS
    score_thresh: float = SCORE_THRESH
    overlap_thresh: float = OVERLAP_THRESH
    bins: int = ECE_BINS
    things: Sequence[int] = ()
    remap: Optional[ClassMapping] = None
    neutral: float = NEUTRAL_LOGIT

    @property
    def semantic(self) -> bool:
        return self.domain in ("semantic", "both")

    @property
    def panoptic(self) -> bool:
        return self.domain in ("panoptic", "both")


def config_label(cfg: Optional[EnsembleConfig]) -> str:
    return "all" if cfg is None else cfg.label


@dataclass
class ConfigResult:
    """Everything one image contributes for one prediction-model configuration."""

    n_samples: int
    num_classes: int
    scores: Dict[Tuple[str, str], Tuple[float, float]] = field(default_factory=dict)
    iou: Optional[float] = None
    pq: Optional[float] = None
    cm: Optional[np.ndarray] = None
    pq_stat: Optional[PQStat] = None
    ece_sem: Optional[ECEAccumulator] = None
    ece_pan: Optional[ECEAccumulator] = None
    fallback_pixels: int = 0
    error: Optional[str] = None


def _image_mean(cm: np.ndarray) -> Optional[float]:
    if cm.sum() == 0:
        return None
    iou, denom = class_iou(cm)
    return float(iou[denom > 0].mean())


def evaluate_config(reader: sio.SampleReader, flows, gt_sem, gt_pan, cfg: Optional[EnsembleConfig],
                    opts: EvalOptions) -> ConfigResult:
    ens = build_aligned_ensemble(reader, flows, cfg, neutral=opts.neutral)
    c = reader.header.n_classes
    if ens.size == 0:
        return ConfigResult(0, c, error=f"container holds no samples for configuration {config_label(cfg)}")
    if cfg is not None and ens.size != cfg.size:
        return ConfigResult(0, c, error=f"IncompleteEnsemble: configuration {cfg.label} needs {cfg.size} "
                                        f"samples, container provides {ens.size}")
    fused, accs = aggregate_stream(ens, default_accumulators())
    d = pixel_class_distribution(fused)
    res = ConfigResult(ens.size, c, fallback_pixels=d.fallback_pixels)
    sem = semantic_inference(d)
    pan = panoptic_inference(fused, opts.score_thresh, opts.overlap_thresh, opts.things)
    maps = compute_measures(fused, accs, pan, opts.things, opts.measures, d)
    for name, u in maps.items():
        for agg in opts.pixel_aggs:
            res.scores[(name, agg.label)] = (confidence_score(u, agg), ood_score(u, agg))

    if opts.semantic:
        res.cm = confusion_matrix(sem, gt_sem, c)
        res.iou = _image_mean(res.cm)
        if "calib" in opts.tasks:
            conf = d.probs.max(axis=-1)
            res.ece_sem = ECEAccumulator(opts.bins).add(*calib_samples_semantic(d, conf, gt_sem))
    if opts.panoptic:
        res.pq_stat, matches = pq_image(pan, gt_pan)
        try:
            res.pq = res.pq_stat.result().pq
        except SegensError:
            res.pq = None
        if "calib" in opts.tasks:
            conf = d.probs.max(axis=-1)
            res.ece_pan = ECEAccumulator(opts.bins).add(*calib_samples_panoptic(conf, pan, gt_pan, matches))
    return res


def evaluate_record(record: sio.Record, opts: EvalOptions) -> Dict[str, ConfigResult]:
    with sio.SampleReader(record.samples) as reader:
        frame = reader.frame
        gt_sem = sio.read_semantic(record.gt_semantic, frame)
        gt_pan = sio.read_panoptic(record.gt_panoptic, frame)
        if opts.remap is not None:
            gt_sem = remap_semantic(gt_sem, opts.remap)
            gt_pan = remap_panoptic(gt_pan, opts.remap)
        flows = {k: sio.read_flow(p, frame) for k, p in enumerate(record.flows, start=1)}
        out = {}
        for cfg in opts.configs:
            try:
                out[config_label(cfg)] = evaluate_config(reader, flows, gt_sem, gt_pan, cfg, opts)
            except (MissingFlow, EmptyEnsemble) as exc:
                out[config_label(cfg)] = ConfigResult(0, reader.header.n_classes, error=f"{type(exc).__name__}: {exc}")
        return out


def worker_count() -> int:
    env = os.environ.get("SEGENS_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer SEGENS_THREADS=%r", env)
    return min(8, os.cpu_count() or 1)


def _try(fn, *args):
    try:
        return fn(*args), None
    except (SegensError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def evaluate_manifest(manifest: sio.Manifest, opts: EvalOptions, workers: Optional[int] = None):
    """Run every record and reduce to per-image rows and dataset summaries.

    Returns ``(image_rows, summaries)``.  In-distribution images drive the
    segmentation, failure and calibration tasks; every image takes part in
    OOD detection.
    """
    workers = workers or worker_count()
    records = list(manifest)
    if workers > 1 and len(records) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda r: evaluate_record(r, opts), records))
    else:
        results = [evaluate_record(r, opts) for r in records]

    image_rows = []
    summaries = []
    for cfg in opts.configs:
        label = config_label(cfg)
        per_image = [(rec, res[label]) for rec, res in zip(records, results)]
        summaries.append(_reduce(label, per_image, opts))
        for rec, r in per_image:
            for (measure, agg), (conf, ood) in sorted(r.scores.items()):
                image_rows.append([label, rec.id, int(rec.is_ood), measure, agg, conf, ood,
                                   None if r.iou is None else 1.0 - r.iou,
                                   None if r.pq is None else 1.0 - r.pq])
    return image_rows, summaries


IMAGE_HEADER = ["config", "image_id", "is_ood", "measure", "pixel_agg", "confidence", "ood_score",
                "risk_iou", "risk_pq"]


def _reduce(label: str, per_image, opts: EvalOptions) -> dict:
    errors: Dict[str, str] = {}
    usable = [(rec, r) for rec, r in per_image if r.error is None]
    for rec, r in per_image:
        if r.error:
            errors[f"image:{rec.id}"] = r.error
    out = {"config": label, "errors": errors, "scores": [], "images": len(per_image)}
    if not usable:
        return out
    out["samples"] = usable[0][1].n_samples
    out["fallback_pixels"] = int(sum(r.fallback_pixels for _, r in usable))
    ind = [(rec, r) for rec, r in usable if not rec.is_ood]

    if "seg" in opts.tasks:
        seg = {}
        if opts.semantic and ind:
            cm = sum(r.cm for _, r in ind)
            seg["miou"], err = _try(miou, cm)
            if err:
                errors["miou"] = err
        if opts.panoptic and ind:
            stat = PQStat()
            for _, r in ind:
                stat += r.pq_stat
            res, err = _try(lambda: stat.result(gt_only=opts.remap is not None))
            if err:
                errors["pq"] = err
            else:
                seg.update(pq=res.pq, sq=res.sq, rq=res.rq)
        out["seg"] = seg

    if "calib" in opts.tasks and ind:
        calib = {}
        for attr, wanted in (("ece_sem", opts.semantic), ("ece_pan", opts.panoptic)):
            if not wanted:
                continue
            acc = ECEAccumulator(opts.bins)
            for _, r in ind:
                acc += getattr(r, attr)
            calib[attr], err = _try(acc.value)
            if err:
                errors[attr] = err
        out["calib"] = calib

    keys = sorted(usable[0][1].scores)
    excluded = {"iou": 0, "pq": 0}
    for measure, agg in keys:
        row = {"measure": measure, "pixel_agg": agg}
        if "failure" in opts.tasks:
            for metric, want in (("iou", opts.semantic), ("pq", opts.panoptic)):
                if not want:
                    continue
                pts = [(rec.id, r.scores[(measure, agg)][0], getattr(r, metric)) for rec, r in ind]
                pts = [p for p in pts if p[2] is not None]
                excluded[metric] = len(ind) - len(pts)
                val, err = _try(aurc, [p[1] for p in pts], [1.0 - p[2] for p in pts], [p[0] for p in pts])
                row[f"aurc_{metric}"] = val
                if err:
                    errors[f"aurc_{metric}"] = err
        if "ood" in opts.tasks:
            val, err = _try(auroc, [r.scores[(measure, agg)][1] for _, r in usable],
                            [rec.is_ood for rec, _ in usable])
            row["auroc_ood"] = val
            if err:
                errors["auroc_ood"] = err
        out["scores"].append(row)
    out["excluded_images"] = excluded
    return out


def summary_rows(summaries: List[dict]) -> List[list]:
    """Flatten summaries into ``config, measure, pixel_agg, metric, value`` rows."""
    rows = []
    for s in summaries:
        for metric, value in sorted(s.get("seg", {}).items()):
            rows.append([s["config"], "", "", metric, value])
        for metric, value in sorted(s.get("calib", {}).items()):
            rows.append([s["config"], "max_softmax_cm", "", metric, value])
        for row in s.get("scores", []):
            for metric in ("aurc_iou", "aurc_pq", "auroc_ood"):
                if metric in row:
                    rows.append([s["config"], row["measure"], row["pixel_agg"], metric, row[metric]])
    return rows

