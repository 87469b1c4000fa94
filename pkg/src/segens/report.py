"""Baseline-normalised reports across evaluation runs.

For every (dataset, backbone) pair the baseline of a metric is the best value
any measure / pixel aggregation reaches under the baseline configuration
(the deterministic single-sample model).  Every other row is expressed as a
relative improvement over that baseline:

* lower is better (AURC, ECE): ``(base - x) / base``
* higher is better (AUROC, mIoU, PQ, SQ, RQ): ``(x - base) / base``

so positive numbers always mean "better than the baseline".
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from . import io as sio
from .errors import MissingBaseline, MissingFile, ParseError

BASELINE_CONFIG = "0:0:none"

LOWER_IS_BETTER = ("aurc_iou", "aurc_pq", "ece_sem", "ece_pan")
HIGHER_IS_BETTER = ("auroc_ood", "miou", "pq", "sq", "rq")

TASK_METRICS = {
    "failure": ("aurc_iou", "aurc_pq"),
    "calib": ("ece_sem", "ece_pan"),
    "ood": ("auroc_ood",),
    "seg": ("miou", "pq", "sq", "rq"),
}

DATASET_HEADER = ["dataset", "backbone", "config", "measure", "pixel_agg", "metric", "value"]
REPORT_HEADER = ["dataset", "backbone", "task", "config", "measure", "pixel_agg", "metric", "value",
                 "baseline", "improvement"]

SIGN_CONVENTION = {
    "lower_is_better": {"metrics": list(LOWER_IS_BETTER), "improvement": "(base - x) / base"},
    "higher_is_better": {"metrics": list(HIGHER_IS_BETTER), "improvement": "(x - base) / base"},
}


@dataclass(frozen=True)
class Row:
    dataset: str
    backbone: str
    config: str
    measure: str
    pixel_agg: str
    metric: str
    value: float


def task_of(metric: str) -> str:
    for task, metrics in TASK_METRICS.items():
        if metric in metrics:
            return task
    raise ValueError(f"unknown metric {metric!r}")


def improvement(metric: str, value: float, base: float) -> Optional[float]:
    if base == 0:
        return None
    if metric in LOWER_IS_BETTER:
        return (base - value) / base
    if metric in HIGHER_IS_BETTER:
        return (value - base) / base
    raise ValueError(f"unknown metric {metric!r}")


def _better(metric: str, a: float, b: float) -> bool:
    return a < b if metric in LOWER_IS_BETTER else a > b


def read_rows(paths: Iterable) -> List[Row]:
    """Read ``dataset.csv`` files (or directories containing one)."""
    rows = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            p = p / "dataset.csv"
        if not p.is_file():
            raise MissingFile(f"no dataset report at {p}")
        with open(p, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            missing = set(DATASET_HEADER) - set(reader.fieldnames or ())
            if missing:
                raise ParseError(p, 1, f"missing columns {sorted(missing)}")
            for lineno, rec in enumerate(reader, start=2):
                if rec["value"] == "":
                    continue
                try:
                    value = float(rec["value"])
                except ValueError:
                    raise ParseError(p, lineno, f"bad value {rec['value']!r}") from None
                rows.append(Row(rec["dataset"], rec["backbone"], rec["config"], rec["measure"],
                                rec["pixel_agg"], rec["metric"], value))
    return rows


def baselines(rows: Sequence[Row], baseline_config: str = BASELINE_CONFIG) -> Dict[Tuple[str, str, str], Row]:
    """Best baseline-configuration row per (dataset, backbone, metric)."""
    best: Dict[Tuple[str, str, str], Row] = {}
    for r in rows:
        if r.config != baseline_config:
            continue
        key = (r.dataset, r.backbone, r.metric)
        cur = best.get(key)
        if cur is None or _better(r.metric, r.value, cur.value):
            best[key] = r
    return best


def build_report(rows: Sequence[Row], baseline_config: str = BASELINE_CONFIG) -> Tuple[List[list], dict]:
    """Return report rows (sorted) and a JSON-able summary."""
    if not rows:
        raise MissingBaseline("no evaluation rows given")
    base = baselines(rows, baseline_config)
    pairs = sorted({(r.dataset, r.backbone) for r in rows})
    for ds, bb in pairs:
        if not any(k[:2] == (ds, bb) for k in base):
            raise MissingBaseline(f"no {baseline_config} rows for dataset {ds!r}, backbone {bb!r}")
    out = []
    skipped = 0
    for r in rows:
        b = base.get((r.dataset, r.backbone, r.metric))
        if b is None:
            skipped += 1
            continue
        out.append([r.dataset, r.backbone, task_of(r.metric), r.config, r.measure, r.pixel_agg, r.metric,
                    r.value, b.value, improvement(r.metric, r.value, b.value)])
    out.sort(key=lambda x: tuple("" if v is None else str(v) for v in x[:7]))
    summary = {
        "baseline_config": baseline_config,
        "sign_convention": SIGN_CONVENTION,
        "baselines": [{"dataset": k[0], "backbone": k[1], "metric": k[2], "value": v.value,
                       "measure": v.measure, "pixel_agg": v.pixel_agg} for k, v in sorted(base.items())],
        "rows": len(out),
        "rows_without_baseline": skipped,
    }
    return out, summary


def best_per_config(report: Sequence[list], task: str) -> Dict[Tuple[str, str, str], Dict[str, float]]:
    """For plotting: best improvement per (dataset, backbone, config) and metric."""
    best: Dict[Tuple[str, str, str], Dict[str, float]] = {}
    for ds, bb, t, cfg, _, _, metric, _, _, imp in report:
        if t != task or imp is None:
            continue
        slot = best.setdefault((ds, bb, cfg), {})
        if metric not in slot or imp > slot[metric]:
            slot[metric] = imp
    return best


def write_report(out_dir, report: Sequence[list], summary: dict) -> List[Path]:
    from .plotting import plot_task

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sio.write_csv(out_dir / "report.csv", REPORT_HEADER, report)
    sio.write_json(out_dir / "report.json", summary)
    written = [out_dir / "report.csv", out_dir / "report.json"]
    for task in TASK_METRICS:
        best = best_per_config(report, task)
        if best:
            path = out_dir / f"{task}.svg"
            plot_task(path, task, best, summary["baseline_config"])
            written.append(path)
    return written
