"""Deterministic synthetic scenes, ensembles and video sequences.

Scenes are axis-aligned rectangles with distinct classes on a stuff
background.  The "ideal" sample reproduces the ground truth exactly; noisy
ensemble members are derived from it by seeded perturbation.  All randomness
comes from numpy's Philox counter-based generator keyed through a
``SeedSequence`` of integers, so a seed tuple fully determines the output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import io as sio
from .align import EnsembleConfig, apply_hflip, apply_scale
from .errors import Unplaceable
from .types import FlowField, SampleTensor, Transform, encode_panoptic

SATURATION = 40.0
MAX_TRIES = 200


def rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    n_objects: int = 3
    n_classes: int = 8
    n_queries: int = 8
    things: Tuple[int, ...] = (2, 3, 4, 5)
    background: int = 1
    min_size: int = 8
    max_size: int = 20
    gap: int = 2

    @property
    def c_total(self) -> int:
        return self.n_classes + 1


@dataclass(frozen=True)
class Rect:
    y0: int
    x0: int
    y1: int
    x1: int
    class_id: int = 0
    instance: int = 0

    def shifted(self, dy: int, dx: int) -> "Rect":
        return Rect(self.y0 + dy, self.x0 + dx, self.y1 + dy, self.x1 + dx, self.class_id, self.instance)

    def inside(self, h: int, w: int) -> bool:
        return self.y0 >= 0 and self.x0 >= 0 and self.y1 <= h and self.x1 <= w

    def overlaps(self, other: "Rect", gap: int = 0) -> bool:
        return not (self.y1 + gap <= other.y0 or other.y1 + gap <= self.y0
                    or self.x1 + gap <= other.x0 or other.x1 + gap <= self.x0)

    def mask(self, h: int, w: int) -> np.ndarray:
        m = np.zeros((h, w), dtype=bool)
        m[max(self.y0, 0):max(self.y1, 0), max(self.x0, 0):max(self.x1, 0)] = True
        return m


@dataclass
class Scene:
    """Ground truth plus the ideal sample that reproduces it.

    Unpacks as ``semantic, panoptic, sample``.
    """

    semantic: np.ndarray
    panoptic: np.ndarray
    sample: SampleTensor
    objects: List[Rect]
    ood: Optional[Rect] = None
    ood_query: Optional[int] = None
    things: Tuple[int, ...] = ()

    def __iter__(self):
        return iter((self.semantic, self.panoptic, self.sample))


@dataclass(frozen=True)
class Noise:
    """Perturbation of a sample.

    ``logit_sigma``: std of additive Gaussian class-logit noise.
    ``jitter``: max integer translation (px) applied to each query's mask.
    ``shuffle``: randomly permute queries.
    ``ood_sigma``: class-logit noise std for queries the model cannot
    recognise (passed as ``uncertain`` queries).
    ``mask_slope``: if set, binary masks become soft, with logit
    ``slope * signed distance`` to the boundary (clipped at saturation).
    ``mask_sigma``: std of additive per-pixel mask-logit noise.
    """

    logit_sigma: float = 0.0
    jitter: int = 0
    shuffle: bool = False
    ood_sigma: float = 0.0
    mask_slope: float = 0.0
    mask_sigma: float = 0.0


def _place(gen: np.random.Generator, cfg: SceneConfig, n: int, velocity=(0, 0), frames: int = 0,
           taken: Sequence[Rect] = ()) -> List[Rect]:
    vx, vy = velocity
    rects = list(taken)
    out = []
    for _ in range(n):
        for _ in range(MAX_TRIES):
            hh = int(gen.integers(cfg.min_size, cfg.max_size + 1))
            ww = int(gen.integers(cfg.min_size, cfg.max_size + 1))
            if hh > cfg.height or ww > cfg.width:
                continue
            y0 = int(gen.integers(0, cfg.height - hh + 1))
            x0 = int(gen.integers(0, cfg.width - ww + 1))
            r = Rect(y0, x0, y0 + hh, x0 + ww)
            if not all(r.shifted(-vy * t, -vx * t).inside(cfg.height, cfg.width) for t in range(frames + 1)):
                continue
            if any(r.overlaps(o, cfg.gap) for o in rects):
                continue
            rects.append(r)
            out.append(r)
            break
        else:
            raise Unplaceable(f"could not place {n} rectangles in {cfg.height}x{cfg.width}")
    return out


def _layout(seed: int, cfg: SceneConfig, ood: bool, velocity=(0, 0), frames: int = 0):
    if cfg.n_objects + 1 + int(ood) > cfg.n_queries:
        raise ValueError("not enough queries for the requested objects")
    if cfg.n_objects > cfg.n_classes - 1:
        raise ValueError("objects need distinct non-background classes")
    gen = rng(seed, 0)
    boxes = _place(gen, cfg, cfg.n_objects, velocity, frames)
    pool = [k for k in range(1, cfg.n_classes + 1) if k != cfg.background]
    classes = gen.choice(pool, size=cfg.n_objects, replace=False) if cfg.n_objects else []
    objects = [Rect(b.y0, b.x0, b.y1, b.x1, int(k), 1 if int(k) in cfg.things else 0)
               for b, k in zip(boxes, classes)]
    # the OOD object depends only on the base layout, so clean/OOD twins share it
    ood_rect = _place(rng(seed, 1), cfg, 1, (0, 0), 0, taken=boxes)[0] if ood else None
    return objects, ood_rect


def _render(cfg: SceneConfig, objects: Sequence[Rect], ood: Optional[Rect]) -> Scene:
    h, w = cfg.height, cfg.width
    semantic = np.full((h, w), cfg.background, dtype=np.uint16)
    panoptic = np.full((h, w), encode_panoptic(cfg.background, 0), dtype=np.uint32)
    logits = np.full((cfg.n_queries, cfg.c_total), -SATURATION, dtype=np.float32)
    masks = np.full((cfg.n_queries, h, w), -SATURATION, dtype=np.float32)
    logits[:, -1] = SATURATION  # unused queries say "no object"

    background = np.ones((h, w), dtype=bool)
    for q, r in enumerate(objects, start=1):
        m = r.mask(h, w)
        background &= ~m
        semantic[m] = r.class_id
        panoptic[m] = encode_panoptic(r.class_id, r.instance)
        logits[q] = -SATURATION
        logits[q, r.class_id - 1] = SATURATION
        masks[q][m] = SATURATION
    ood_query = None
    if ood is not None:
        ood_query = len(objects) + 1
        m = ood.mask(h, w)
        background &= ~m
        semantic[m] = 0
        panoptic[m] = 0
        # an object of unknown class: not background, class uninformative
        logits[ood_query] = 0.0
        logits[ood_query, cfg.background - 1] = -SATURATION
        masks[ood_query][m] = SATURATION
    logits[0] = -SATURATION
    logits[0, cfg.background - 1] = SATURATION
    masks[0][background] = SATURATION
    sample = SampleTensor(logits, masks)
    return Scene(semantic, panoptic, sample, list(objects), ood, ood_query, tuple(cfg.things))


def gen_scene(seed: int, config: SceneConfig = SceneConfig(), ood: bool = False) -> Scene:
    """Random non-overlapping rectangles on a stuff background.

    With ``ood=True`` one more rectangle of an unseen class is added; it is
    VOID in the ground truth and its query has uninformative class logits.
    """
    objects, ood_rect = _layout(seed, config, ood)
    return _render(config, objects, ood_rect)


def _shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    if not dy and not dx:
        return mask
    h, w = mask.shape
    p = max(abs(dy), abs(dx))
    padded = np.pad(mask, p, mode="edge")
    return padded[p - dy:p - dy + h, p - dx:p - dx + w]


def soften_mask(mask: np.ndarray, slope: float) -> np.ndarray:
    """Turn a saturated mask into a signed-distance ramp of the given slope.

    Pixel centres next to the boundary sit half a pixel from it.
    """
    on = mask > 0
    if on.all() or not on.any():
        return mask
    sd = np.where(on, distance_transform_edt(on) - 0.5, 0.5 - distance_transform_edt(~on))
    return np.clip(slope * sd, -SATURATION, SATURATION).astype(mask.dtype)


def perturb_with_permutation(ideal: SampleTensor, seed, noise: Noise = Noise(),
                             uncertain: Sequence[int] = ()) -> Tuple[SampleTensor, np.ndarray]:
    """Perturb ``ideal``; also return ``src`` with output query ``j`` taken
    from ideal query ``src[j]``."""
    key = seed if isinstance(seed, (tuple, list)) else (seed,)
    gen = rng(*key, 7)
    p = ideal.n_queries
    logits = ideal.logits.astype(np.float64)
    masks = ideal.masks.copy()
    noise_l = gen.standard_normal(logits.shape)
    noise_o = gen.standard_normal(logits.shape)
    shifts = gen.integers(-noise.jitter, noise.jitter + 1, size=(p, 2)) if noise.jitter else np.zeros((p, 2), int)
    src = gen.permutation(p) if noise.shuffle else np.arange(p)
    logits += noise.logit_sigma * noise_l
    for q in uncertain:
        logits[q] += noise.ood_sigma * noise_o[q]
    for q in range(p):
        masks[q] = _shift(masks[q], int(shifts[q, 0]), int(shifts[q, 1]))
        if noise.mask_slope:
            masks[q] = soften_mask(masks[q], noise.mask_slope)
    if noise.mask_sigma:
        masks += (noise.mask_sigma * gen.standard_normal(masks.shape)).astype(masks.dtype)
    out = SampleTensor(logits[src].astype(np.float32), np.ascontiguousarray(masks[src]), ideal.transform)
    return out, src


def perturb_sample(ideal: SampleTensor, seed, noise: Noise = Noise(), uncertain: Sequence[int] = ()) -> SampleTensor:
    return perturb_with_permutation(ideal, seed, noise, uncertain)[0]


@dataclass
class VideoSequence:
    """Per-frame scenes (index 0 is the current frame, ``k`` is ``t - k``)
    and exact backward flows from the current frame to each prior frame."""

    frames: List[Scene]
    flows: List[FlowField]

    @property
    def current(self) -> Scene:
        return self.frames[0]


def gen_sequence(seed: int, config: SceneConfig = SceneConfig(), frames: int = 1, velocity=(1, 0),
                 ood: bool = False, invalid: Optional[Rect] = None) -> VideoSequence:
    """Rectangles translating at ``velocity`` (dx, dy) px per frame.

    The OOD object, if any, exists only in the current frame.  Background
    pixels that an object covered in the prior frame are marked invalid, as
    is the optional ``invalid`` region.
    """
    vx, vy = velocity
    objects, ood_rect = _layout(seed, config, ood, velocity, frames)
    h, w = config.height, config.width
    scenes = [_render(config, objects, ood_rect)]
    flows = []
    on_object = np.zeros((h, w), dtype=bool)
    for r in objects:
        on_object |= r.mask(h, w)
    for k in range(1, frames + 1):
        moved = [r.shifted(-vy * k, -vx * k) for r in objects]
        scenes.append(_render(config, moved, None))
        vec = np.zeros((h, w, 2), dtype=np.float32)
        vec[on_object] = (-vx * k, -vy * k)
        covered = np.zeros((h, w), dtype=bool)
        for r in moved:
            covered |= r.mask(h, w)
        valid = on_object | ~covered
        if invalid is not None:
            valid &= ~invalid.mask(h, w)
        flows.append(FlowField(vec, valid))
    return VideoSequence(scenes, flows)


# -- dataset writer ---------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    scenes: int = 8
    frames: int = 0
    ood_fraction: float = 0.0
    mc: int = 3
    tta: str = "none"
    view_noise: float = 20.0
    mc_noise: float = 10.0
    frame_noise: float = 2.0
    mask_slope: float = 0.0
    mask_sigma: float = 0.0
    jitter: int = 1
    ood_noise: float = 4.0
    flow_error: float = 0.0
    velocity: Tuple[int, int] = (1, 0)
    scene: SceneConfig = field(default_factory=SceneConfig)


def difficulty(seed: int) -> float:
    """Per-scene noise multiplier in [0, 1]."""
    return float(rng(seed, 2).uniform())


def render_views(current: Scene, priors: Sequence[Scene], cfg: SynthConfig, seed: int) -> List[SampleTensor]:
    """Simulate network outputs for every view and member of a scene.

    Member 0 of each view is the deterministic pass; members ``1..mc`` add
    dropout-like noise.  Views are returned in container order.
    """
    top = EnsembleConfig(cfg.mc, len(priors), cfg.tta)
    scale = difficulty(seed)
    view_noise = Noise(cfg.view_noise * scale, cfg.jitter, True, cfg.ood_noise, cfg.mask_slope,
                       cfg.mask_sigma)
    mc_noise = Noise(cfg.mc_noise * scale, 0, True, cfg.ood_noise)
    frame_noise = Noise(cfg.frame_noise * scale, mask_sigma=cfg.mask_sigma)
    frames = [current] + list(priors)
    out = []
    for view in top.views():
        scene = frames[view.frame]
        uncertain = [scene.ood_query] if scene.ood_query is not None else []
        # consecutive frames are near-identical inputs, so the view error is
        # shared across frames and only a small frame-specific part is added
        key = (seed, 3, int(view.hflip), int(round(view.scale * 100)))
        base, src = perturb_with_permutation(scene.sample, key, view_noise, uncertain)
        uncertain_after = [int(np.flatnonzero(src == q)[0]) for q in uncertain]
        if view.frame:
            key = key + (100 + view.frame,)
            base = perturb_sample(base, key, frame_noise)
        members = [base] + [perturb_sample(base, key + (m,), mc_noise, uncertain_after)
                            for m in range(1, cfg.mc + 1)]
        for s in members:
            if view.scale != 1.0:
                s = apply_scale(s, view.scale)
            if view.hflip:
                s = apply_hflip(s)
            out.append(s.replace(transform=Transform(view.hflip, view.scale, view.frame)))
    return out


def _flow_error(flow: FlowField, err: float, gen: np.random.Generator) -> FlowField:
    if not err:
        return flow
    axis = int(gen.integers(0, 2))
    sign = 1.0 if gen.integers(0, 2) else -1.0
    vec = flow.flow.copy()
    vec[..., axis] += np.float32(sign * err)
    return FlowField(vec, flow.valid)


def synthesize_dataset(out, cfg: SynthConfig) -> Path:
    """Write samples, label maps, flows, ``manifest.jsonl`` and ``dataset.json``.

    ``cfg.scenes`` records are written.  ``round(scenes * ood_fraction)`` of
    them are OOD twins of clean scenes, linked by ``pair_id``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    n_ood = int(round(cfg.scenes * cfg.ood_fraction))
    n_clean = cfg.scenes - n_ood
    if n_ood > n_clean:
        raise ValueError("ood_fraction above 0.5 leaves OOD scenes without clean twins")
    jobs = [(i, False) for i in range(n_clean)] + [(i, True) for i in range(n_ood)]
    records = []
    for base, ood in jobs:
        seed = int(rng(cfg.seed, base).integers(0, 2**31 - 1))
        rid = f"{base:05d}{'_ood' if ood else ''}"
        seq = gen_sequence(seed, cfg.scene, cfg.frames, cfg.velocity if cfg.frames else (0, 0), ood)
        samples = render_views(seq.current, seq.frames[1:], cfg, seed)
        sio.write_samples(out / f"{rid}.segu", samples)
        sio.write_semantic(out / f"{rid}.segl", seq.current.semantic)
        sio.write_panoptic(out / f"{rid}.segp", seq.current.panoptic)
        flow_paths = []
        gen = rng(seed, 4)
        for k, flow in enumerate(seq.flows, start=1):
            path = out / f"{rid}_flow{k}.segf"
            sio.write_flow(path, _flow_error(flow, cfg.flow_error, gen))
            flow_paths.append(path)
        pair = f"{base:05d}" if (ood or base < n_ood) else None
        records.append(sio.Record(rid, out / f"{rid}.segu", out / f"{rid}.segl", out / f"{rid}.segp",
                                  tuple(flow_paths), ood, pair))
    sio.write_manifest(out / "manifest.jsonl", records)
    info = {"name": "synthetic", "num_classes": cfg.scene.n_classes, "things": list(cfg.scene.things),
            "synth": _jsonable(asdict(cfg))}
    sio.write_json(out / "dataset.json", info)
    return out / "manifest.jsonl"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj
