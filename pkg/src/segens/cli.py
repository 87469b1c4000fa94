"""Command-line front end: synth, evaluate, report, remap, inspect.

Exit codes: 0 success, 1 input/output failure, 2 bad flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import io as sio
from . import report as rep
from .align import TTA_MODES, EnsembleConfig
from .errors import SegensError
from .fuse import OVERLAP_THRESH, SCORE_THRESH
from .metrics import ECE_BINS
from .pipeline import DOMAINS, IMAGE_HEADER, TASKS, EvalOptions, evaluate_manifest, summary_rows
from .pixagg import PixelAgg
from .remap import BUNDLED, ClassMapping, remap_panoptic, remap_semantic
from .synth import SceneConfig, SynthConfig, synthesize_dataset
from .uncertainty import MEASURES

log = logging.getLogger("segens")


class UsageError(Exception):
    pass


def _split(values: Optional[Sequence[str]]) -> List[str]:
    out = []
    for v in values or ():
        out.extend(p.strip() for p in v.split(",") if p.strip())
    return out


def _ints(text: str):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _non_negative(kind):
    def parse(text):
        v = kind(text)
        if v < 0:
            raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
        return v
    return parse


def _unit(text):
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {text}")
    return v


# -- synth ------------------------------------------------------------------

def cmd_synth(args) -> int:
    scene = SceneConfig(height=args.height, width=args.width, n_objects=args.objects, n_classes=args.classes,
                        n_queries=args.queries, things=args.things, min_size=args.min_size, max_size=args.max_size)
    cfg = SynthConfig(seed=args.seed, scenes=args.scenes, frames=args.frames, ood_fraction=args.ood_fraction,
                      mc=args.mc, tta=args.tta, view_noise=args.view_noise, mc_noise=args.mc_noise,
                      frame_noise=args.frame_noise, mask_slope=args.mask_slope, mask_sigma=args.mask_sigma,
                      jitter=args.jitter, ood_noise=args.ood_noise, flow_error=args.flow_error,
                      velocity=tuple(args.velocity), scene=scene)
    try:
        manifest = synthesize_dataset(args.out, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(manifest)
    return 0


# -- evaluate ---------------------------------------------------------------

def _dataset_info(args, manifest_path: Path) -> dict:
    path = Path(args.dataset_info) if args.dataset_info else manifest_path.parent / "dataset.json"
    if path.is_file():
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    if args.dataset_info:
        raise sio.MissingFile(f"dataset info {path} not found")
    return {}


def build_options(args, info: dict) -> EvalOptions:
    measures = _split(args.measures) or ["all"]
    if measures == ["all"]:
        measures = list(MEASURES)
    unknown = [m for m in measures if m not in MEASURES]
    if unknown:
        raise UsageError(f"unknown measure(s) {unknown}; choose from {list(MEASURES)}")
    tasks = _split(args.task) or ["all"]
    tasks = list(TASKS) if "all" in tasks else tasks
    bad = [t for t in tasks if t not in TASKS]
    if bad:
        raise UsageError(f"unknown task(s) {bad}")
    try:
        aggs = [PixelAgg.parse(a) for a in (_split(args.pixel_agg) or ["image-mean"])]
        configs = [EnsembleConfig.parse(c) for c in _split(args.config)] or [None]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if len({(c.label if c else "all") for c in configs}) != len(configs):
        raise UsageError("duplicate --config")
    things = args.things if args.things is not None else tuple(info.get("things", ()))
    mapping = ClassMapping.load(args.remap) if args.remap else None
    return EvalOptions(configs=configs, measures=measures, pixel_aggs=aggs, domain=args.domain, tasks=tasks,
                       score_thresh=args.score_thresh, overlap_thresh=args.overlap_thresh, bins=args.bins,
                       things=tuple(things), remap=mapping)


def cmd_evaluate(args) -> int:
    manifest_path = Path(args.manifest)
    info = _dataset_info(args, manifest_path)
    opts = build_options(args, info)
    manifest = sio.read_manifest(manifest_path)
    image_rows, summaries = evaluate_manifest(manifest, opts)
    dataset = args.dataset_tag or info.get("name", "dataset")
    backbone = args.backbone_tag

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sio.write_csv(out / "images.csv", IMAGE_HEADER, image_rows)
    sio.write_csv(out / "dataset.csv", rep.DATASET_HEADER,
                  ([dataset, backbone] + r for r in summary_rows(summaries)))
    sio.write_json(out / "summary.json", {
        "dataset": dataset,
        "backbone": backbone,
        "manifest": str(args.manifest),
        "images": len(manifest),
        "manifest_warnings": manifest.warnings,
        "options": {
            "domain": opts.domain,
            "tasks": list(opts.tasks),
            "measures": list(opts.measures),
            "pixel_agg": [a.label for a in opts.pixel_aggs],
            "score_thresh": opts.score_thresh,
            "overlap_thresh": opts.overlap_thresh,
            "bins": opts.bins,
            "things": list(opts.things),
            "remap": args.remap,
        },
        "configs": summaries,
    })
    for s in summaries:
        for task, err in sorted(s["errors"].items()):
            log.warning("%s: %s: %s", s["config"], task, err)
    return 0


# -- report -----------------------------------------------------------------

def cmd_report(args) -> int:
    rows = rep.read_rows(args.inputs)
    table, summary = rep.build_report(rows, args.baseline)
    for path in rep.write_report(args.out, table, summary):
        print(path)
    return 0


# -- remap ------------------------------------------------------------------

def _magic(path) -> bytes:
    with open(path, "rb") as f:
        return f.read(4)


def cmd_remap(args) -> int:
    mapping = ClassMapping.load(args.mapping)
    magic = _magic(args.input)
    if magic == sio.SEMANTIC_MAGIC:
        sio.write_semantic(args.out, remap_semantic(sio.read_semantic(args.input), mapping))
    elif magic == sio.PANOPTIC_MAGIC:
        sio.write_panoptic(args.out, remap_panoptic(sio.read_panoptic(args.input), mapping))
    else:
        raise sio.BadMagic(f"{args.input}: not a semantic or panoptic label map")
    return 0


# -- inspect ----------------------------------------------------------------

def cmd_inspect(args) -> int:
    for path in args.paths:
        magic = _magic(path)
        if magic == sio.SAMPLE_MAGIC:
            with sio.SampleReader(path) as r:
                h = r.header
                print(f"{path}: SEGU v{sio.VERSION} samples={h.count} queries={h.n_queries} "
                      f"classes={h.n_classes} c_total={h.c_total} frame={h.height}x{h.width}")
                for i, (t, member) in enumerate(r.entries()):
                    hh, ww = h.mask_shape(t)
                    print(f"  [{i}] kind={t.kind} hflip={int(t.hflip)} scale={t.scale:g} frame={t.frame} "
                          f"member={member} mask={hh}x{ww}")
        elif magic == sio.SEMANTIC_MAGIC:
            m = sio.read_semantic(path)
            print(f"{path}: SEGL {m.shape[0]}x{m.shape[1]} ids={sorted(set(m.ravel().tolist()))}")
        elif magic == sio.PANOPTIC_MAGIC:
            m = sio.read_panoptic(path)
            print(f"{path}: SEGP {m.shape[0]}x{m.shape[1]} segments={len(set(m.ravel().tolist()) - {0})}")
        elif magic == sio.FLOW_MAGIC:
            f = sio.read_flow(path)
            print(f"{path}: SEGF {f.shape[0]}x{f.shape[1]} valid={int(f.valid.sum())}")
        else:
            raise sio.BadMagic(f"{path}: unknown magic {magic!r}")
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segens", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset and manifest")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=_non_negative(int), default=8)
    s.add_argument("--frames", type=_non_negative(int), default=0, help="prior frames per record")
    s.add_argument("--ood-fraction", type=float, default=0.0)
    s.add_argument("--mc", type=_non_negative(int), default=3, help="dropout members per view")
    s.add_argument("--tta", choices=TTA_MODES, default="none")
    s.add_argument("--view-noise", type=_non_negative(float), default=20.0)
    s.add_argument("--mc-noise", type=_non_negative(float), default=10.0)
    s.add_argument("--frame-noise", type=_non_negative(float), default=2.0)
    s.add_argument("--mask-slope", type=_non_negative(float), default=0.0)
    s.add_argument("--mask-sigma", type=_non_negative(float), default=0.0)
    s.add_argument("--jitter", type=_non_negative(int), default=1)
    s.add_argument("--ood-noise", type=_non_negative(float), default=4.0)
    s.add_argument("--flow-error", type=_non_negative(float), default=0.0)
    s.add_argument("--velocity", type=int, nargs=2, default=(1, 0), metavar=("DX", "DY"))
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--objects", type=_non_negative(int), default=3)
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--queries", type=int, default=8)
    s.add_argument("--things", type=_ints, default=(2, 3, 4, 5))
    s.add_argument("--min-size", type=int, default=8)
    s.add_argument("--max-size", type=int, default=20)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("evaluate", help="run the pipeline over a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--domain", choices=DOMAINS, default="both")
    e.add_argument("--measures", action="append", help="comma-separated measure names or 'all'")
    e.add_argument("--pixel-agg", action="append", help="image-mean, image-sum or patch:<N>")
    e.add_argument("--task", action="append", help="failure, calib, ood, seg or all")
    e.add_argument("--config", action="append", help="MC:FRAMES:TTA; repeatable; default uses every sample")
    e.add_argument("--score-thresh", type=_unit, default=SCORE_THRESH)
    e.add_argument("--overlap-thresh", type=_unit, default=OVERLAP_THRESH)
    e.add_argument("--bins", type=int, default=ECE_BINS)
    e.add_argument("--remap", help=f"mapping file or bundled name ({', '.join(BUNDLED)})")
    e.add_argument("--things", type=_ints, help="thing class ids; default from dataset info")
    e.add_argument("--dataset-info", help="JSON with name and things; default dataset.json beside the manifest")
    e.add_argument("--dataset-tag")
    e.add_argument("--backbone-tag", default="synthetic")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="baseline-normalised report with SVG plots")
    r.add_argument("--in", dest="inputs", action="append", required=True,
                   help="evaluate output directory or dataset.csv; repeatable")
    r.add_argument("--baseline", default=rep.BASELINE_CONFIG)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    m = sub.add_parser("remap", help="remap the classes of a label map")
    m.add_argument("--mapping", required=True, help=f"mapping file or bundled name ({', '.join(BUNDLED)})")
    m.add_argument("--in", dest="input", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_remap)

    i = sub.add_parser("inspect", help="print container headers")
    i.add_argument("paths", nargs="+")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "bins", 1) < 1:
        parser.error("--bins must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (SegensError, OSError, json.JSONDecodeError) as exc:
        print(f"segens: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
