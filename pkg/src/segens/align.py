"""Bring TTA and prior-frame samples back into the reference geometry.

Only mask logits are moved; class logits never change under geometry.  All
interpolation happens in logit space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateTarget, MissingFlow, MixedClassCount, ShapeMismatch, WrongTransform
from .types import DEFAULT_SCALES, AlignedEnsemble, FlowField, SampleTensor, Transform

NEUTRAL_LOGIT = -10.0

TTA_MODES = ("none", "hflip", "scale", "scale+hflip")


def scaled_shape(shape: Tuple[int, int], factor: float) -> Tuple[int, int]:
    """Mask dimensions a network produces for an input rescaled by ``factor``."""
    return tuple(max(1, int(math.floor(n * factor + 0.5))) for n in shape)


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, edge clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(masks: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """Bilinearly resize a ``(P, h, w)`` stack to ``(P, *target)``."""
    th, tw = target
    if th <= 0 or tw <= 0:
        raise DegenerateTarget(f"cannot resize to {target}")
    x = np.asarray(masks, dtype=np.float64)
    lo, hi, t = _axis_weights(x.shape[1], th)
    x = x[:, lo, :] * (1 - t)[None, :, None] + x[:, hi, :] * t[None, :, None]
    lo, hi, t = _axis_weights(x.shape[2], tw)
    x = x[:, :, lo] * (1 - t) + x[:, :, hi] * t
    return x


def apply_hflip(s: SampleTensor) -> SampleTensor:
    """Forward flip, as a network run on a mirrored image would report it."""
    return s.replace(masks=np.ascontiguousarray(s.masks[:, :, ::-1]),
                     transform=Transform(not s.transform.hflip, s.transform.scale, s.transform.frame))


def apply_scale(s: SampleTensor, factor: float) -> SampleTensor:
    out = resize_bilinear(s.masks, scaled_shape(s.shape, factor)).astype(np.float32)
    return s.replace(masks=out, transform=Transform(s.transform.hflip, factor, s.transform.frame))


def invert_hflip(s: SampleTensor) -> SampleTensor:
    if not s.transform.hflip:
        raise WrongTransform(f"sample is {s.transform.kind}, not hflip")
    t = s.transform
    return s.replace(masks=np.ascontiguousarray(s.masks[:, :, ::-1]),
                     transform=Transform(False, t.scale, t.frame))


def invert_scale(s: SampleTensor, target: Tuple[int, int]) -> SampleTensor:
    if s.transform.scale == 1.0:
        raise WrongTransform(f"sample is {s.transform.kind}, not scale")
    out = resize_bilinear(s.masks, target).astype(np.float32)
    t = s.transform
    return s.replace(masks=out, transform=Transform(t.hflip, 1.0, t.frame))


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray, fill: float) -> np.ndarray:
    """Sample ``img[..., h, w]`` at float coordinates; outside points get ``fill``."""
    h, w = img.shape[-2:]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = xc - x0
    ty = yc - y0
    img = np.asarray(img, dtype=np.float64)
    top = img[..., y0, x0] * (1 - tx) + img[..., y0, x1] * tx
    bottom = img[..., y1, x0] * (1 - tx) + img[..., y1, x1] * tx
    out = top * (1 - ty) + bottom * ty
    return np.where(inside, out, fill)


def warp_prior_frame(s: SampleTensor, flow: FlowField, neutral: float = NEUTRAL_LOGIT) -> SampleTensor:
    """Backward-warp a prior-frame sample into the reference frame.

    Output pixel ``p`` takes the prior mask at ``p + flow(p)``.  Invalid flow
    and out-of-bounds lookups receive the ``neutral`` logit.
    """
    if not s.transform.frame:
        raise WrongTransform(f"sample is {s.transform.kind}, not prior_frame")
    if flow.shape != s.shape:
        raise ShapeMismatch(f"flow {flow.shape} does not match sample {s.shape}")
    h, w = flow.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    x = xx + flow.flow[..., 0]
    y = yy + flow.flow[..., 1]
    out = bilinear_sample(s.masks, x, y, neutral)
    out = np.where(flow.valid, out, neutral).astype(np.float32)
    t = s.transform
    return s.replace(masks=out, transform=Transform(t.hflip, t.scale, 0))


def align_sample(s: SampleTensor, frame: Tuple[int, int], flows: Mapping[int, FlowField],
                 neutral: float = NEUTRAL_LOGIT) -> SampleTensor:
    """Undo scale, then flip, then warp; identity samples pass through."""
    if s.transform.scale != 1.0:
        s = invert_scale(s, frame)
    elif s.shape != tuple(frame):
        raise ShapeMismatch(f"unscaled sample {s.shape} does not match frame {frame}")
    if s.transform.hflip:
        s = invert_hflip(s)
    if s.transform.frame:
        try:
            flow = flows[s.transform.frame]
        except KeyError:
            raise MissingFlow(f"no flow for prior frame {s.transform.frame}") from None
        s = warp_prior_frame(s, flow, neutral)
    return s


@dataclass(frozen=True)
class EnsembleConfig:
    """A prediction-model configuration: MC members, prior frames, TTA mode.

    ``mc == 0`` selects the deterministic pass (member 0); ``mc == n`` selects
    dropout members ``1..n``.
    """

    mc: int = 0
    frames: int = 0
    tta: str = "none"
    scales: Tuple[float, ...] = DEFAULT_SCALES

    def __post_init__(self):
        if self.tta not in TTA_MODES:
            raise ValueError(f"unknown TTA mode {self.tta!r}; expected one of {TTA_MODES}")
        if self.mc < 0 or self.frames < 0:
            raise ValueError("mc and frames must be non-negative")

    @classmethod
    def parse(cls, text: str) -> "EnsembleConfig":
        try:
            mc, frames, tta = text.split(":")
            return cls(int(mc), int(frames), tta)
        except ValueError as exc:
            raise ValueError(f"bad configuration {text!r}; expected MC:FRAMES:TTA") from exc

    @property
    def label(self) -> str:
        return f"{self.mc}:{self.frames}:{self.tta}"

    @property
    def is_baseline(self) -> bool:
        return self.mc == 0 and self.frames == 0 and self.tta == "none"

    def views(self) -> List[Transform]:
        flips = (False, True) if "hflip" in self.tta else (False,)
        factors = (1.0,) + tuple(self.scales) if "scale" in self.tta else (1.0,)
        return sorted((Transform(f, s, k) for k in range(self.frames + 1) for f in flips for s in factors),
                      key=Transform.sort_key)

    def members(self) -> range:
        return range(1, self.mc + 1) if self.mc else range(0, 1)

    @property
    def size(self) -> int:
        return len(self.views()) * len(self.members())

    def selects(self, transform: Transform, member: int) -> bool:
        return member in self.members() and any(_same_view(transform, v) for v in self.views())


def _same_view(a: Transform, b: Transform) -> bool:
    return a.hflip == b.hflip and a.frame == b.frame and abs(a.scale - b.scale) < 1e-6


class ListSource:
    """Adapter exposing an in-memory sample list through the source protocol.

    Samples sharing a transform are numbered as members in order of appearance.
    """

    def __init__(self, samples: Sequence[SampleTensor]):
        self.samples = list(samples)
        seen: Dict[Transform, int] = {}
        self._entries = []
        for s in self.samples:
            m = seen.get(s.transform, 0)
            seen[s.transform] = m + 1
            self._entries.append((s.transform, m))

    def entries(self):
        return list(self._entries)

    def load(self, index: int) -> SampleTensor:
        return self.samples[index]

    @property
    def frame(self) -> Optional[Tuple[int, int]]:
        for s in self.samples:
            if s.transform.scale == 1.0:
                return s.shape
        return None


def build_aligned_ensemble(source, flows: Optional[Mapping[int, FlowField]] = None,
                           config: Optional[EnsembleConfig] = None,
                           frame: Optional[Tuple[int, int]] = None,
                           neutral: float = NEUTRAL_LOGIT) -> AlignedEnsemble:
    """Select, order and align raw samples into an :class:`AlignedEnsemble`.

    ``source`` is a sequence of samples or any object with ``entries()``,
    ``load(i)`` and ``frame`` (e.g. :class:`segens.io.SampleReader`).  With a
    ``config`` only the matching samples are kept.  Samples are yielded in
    ``(frame, hflip, scale, member)`` order, loaded and aligned one at a time.
    """
    if not hasattr(source, "entries"):
        source = ListSource(source)
    flows = dict(flows or {})
    frame = tuple(frame or source.frame or ())
    if len(frame) != 2:
        raise ShapeMismatch("cannot infer the reference frame; pass frame=(h, w)")

    picked = [(t, m, i) for i, (t, m) in enumerate(source.entries())
              if config is None or config.selects(t, m)]
    picked.sort(key=lambda e: (e[0].sort_key(), e[1]))
    for t, _, _ in picked:
        if t.frame and t.frame not in flows:
            raise MissingFlow(f"no flow for prior frame {t.frame}")
    for k, f in flows.items():
        if f.shape != frame:
            raise ShapeMismatch(f"flow for frame {k} has shape {f.shape}, expected {frame}")

    order = [i for _, _, i in picked]
    c_total = getattr(source, "c_total", None)

    def produce() -> Iterator[SampleTensor]:
        ref_c = c_total
        for i in order:
            raw = source.load(i)
            if ref_c is None:
                ref_c = raw.c_total
            elif raw.c_total != ref_c:
                raise MixedClassCount(f"sample {i} has c_total={raw.c_total}, expected {ref_c}")
            aligned = align_sample(raw, frame, flows, neutral)
            del raw
            yield aligned
            del aligned

    if c_total is None and hasattr(source, "samples"):
        counts = {s.c_total for s in source.samples}
        if len(counts) > 1:
            raise MixedClassCount(f"ensemble mixes c_total values {sorted(counts)}")

    return AlignedEnsemble(len(order), produce, frame, tuple(t for t, _, _ in picked))
