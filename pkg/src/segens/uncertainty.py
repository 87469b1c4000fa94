"""Pixel-level uncertainty measures computed from streaming accumulators.

Accumulators receive each matched sample exactly once during aggregation and
keep state whose size does not depend on the number of samples.  Entropies
are in nats.
"""

from __future__ import annotations

from typing import Collection, Dict, Iterable, Optional, Sequence

import numpy as np
from scipy.special import entr

from .errors import NoSamples, ShapeMismatch
from .fuse import mask_assignment_distribution, pixel_class_distribution
from .types import PixelClassDistribution, SampleTensor, UncertaintyMap, decode_panoptic, sigmoid

MEASURES = (
    "predictive_entropy_cm",
    "predictive_entropy_m",
    "expected_entropy_m",
    "expected_entropy_cm",
    "mutual_information_m",
    "mutual_information_cm",
    "expected_mask_variance",
    "predictive_mask_variance",
    "max_softmax_cm",
    "max_norm_sigmoid_mask",
    "combined_softmax_sigmoid",
)

# measures that need more than one sample to carry information
SPREAD_MEASURES = frozenset({
    "expected_entropy_m", "expected_entropy_cm",
    "mutual_information_m", "mutual_information_cm",
    "expected_mask_variance",
})

MI_SLACK = 1e-9


def entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shannon entropy in nats with ``0 * log 0 = 0``."""
    return entr(np.asarray(p, dtype=np.float64)).sum(axis=axis)


class DistributionAccumulator:
    """Running mean of per-sample distributions and of their entropies.

    ``variant`` is ``"cm"`` (class & mask: mask-weighted class softmax) or
    ``"m"`` (mask only: query-normalised sigmoid masks).
    """

    def __init__(self, variant: str):
        if variant not in ("cm", "m"):
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.count = 0
        self.mean_dist: Optional[np.ndarray] = None
        self.mean_entropy: Optional[np.ndarray] = None

    def update(self, view) -> None:
        d = view.class_distribution if self.variant == "cm" else view.mask_distribution
        h = entropy(d)
        self.count += 1
        if self.count == 1:
            self.mean_dist = np.array(d, dtype=np.float64)
            self.mean_entropy = h
        else:
            inv = 1.0 / self.count
            self.mean_dist += (d - self.mean_dist) * inv
            self.mean_entropy += (h - self.mean_entropy) * inv

    def _check(self):
        if not self.count:
            raise NoSamples(f"{self.variant} accumulator has seen no samples")

    def predictive(self) -> np.ndarray:
        self._check()
        return entropy(self.mean_dist)

    def expected(self) -> np.ndarray:
        self._check()
        return self.mean_entropy.copy()


class MaskVarianceAccumulator:
    """Welford mean/variance of sigmoid masks per query and pixel."""

    def __init__(self):
        self.count = 0
        self.mean: Optional[np.ndarray] = None
        self.m2: Optional[np.ndarray] = None

    def update(self, view) -> None:
        x = view.mask_probs
        self.count += 1
        if self.count == 1:
            self.mean = np.array(x, dtype=np.float64)
            self.m2 = np.zeros_like(self.mean)
            return
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def variance(self) -> np.ndarray:
        """Population variance across samples, ``(P, h, w)``."""
        if not self.count:
            raise NoSamples("mask variance accumulator has seen no samples")
        return self.m2 / self.count


def default_accumulators():
    return [DistributionAccumulator("cm"), DistributionAccumulator("m"), MaskVarianceAccumulator()]


def _find(accs: Iterable, cls, variant=None):
    for a in accs:
        if isinstance(a, cls) and (variant is None or a.variant == variant):
            return a
    raise NoSamples(f"no {cls.__name__}{'(' + variant + ')' if variant else ''} attached")


def predictive_entropy(acc: DistributionAccumulator) -> UncertaintyMap:
    return UncertaintyMap(f"predictive_entropy_{acc.variant}", acc.predictive())


def expected_entropy(acc: DistributionAccumulator) -> UncertaintyMap:
    return UncertaintyMap(f"expected_entropy_{acc.variant}", acc.expected(), degenerate=acc.count == 1)


def mutual_information(acc: DistributionAccumulator) -> UncertaintyMap:
    mi = acc.predictive() - acc.expected()
    worst = float(mi.min()) if mi.size else 0.0
    if worst < -MI_SLACK:
        raise ArithmeticError(f"mutual information {worst:.3e} below tolerance")
    return UncertaintyMap(f"mutual_information_{acc.variant}", np.maximum(mi, 0.0), degenerate=acc.count == 1)


def mask_variance(source, mode: str = "expected") -> UncertaintyMap:
    """Mask variance per pixel.

    ``expected``: mean over queries of the across-sample variance of each
    query's sigmoid mask (``source`` is a :class:`MaskVarianceAccumulator`).
    ``predictive``: variance across queries of the fused sample's sigmoid
    masks (``source`` is the fused :class:`SampleTensor`).
    """
    if mode == "expected":
        var = source.variance()
        return UncertaintyMap("expected_mask_variance", var.mean(axis=0), degenerate=source.count == 1)
    if mode == "predictive":
        return UncertaintyMap("predictive_mask_variance", sigmoid(source.masks).var(axis=0))
    raise ValueError(f"unknown mask variance mode {mode!r}")


def max_softmax_score(d: PixelClassDistribution) -> UncertaintyMap:
    return UncertaintyMap("max_softmax_cm", d.probs.max(axis=-1), confident=True)


def max_normalized_sigmoid_mask(s: SampleTensor) -> UncertaintyMap:
    return UncertaintyMap("max_norm_sigmoid_mask", mask_assignment_distribution(s).max(axis=-1), confident=True)


def combined_softmax_sigmoid(d: PixelClassDistribution, s: SampleTensor, panoptic: np.ndarray,
                             things: Collection[int]) -> UncertaintyMap:
    """Max softmax, averaged with the max normalised mask score on thing pixels."""
    soft = d.probs.max(axis=-1)
    mask = mask_assignment_distribution(s).max(axis=-1)
    if panoptic.shape != soft.shape or s.shape != soft.shape:
        raise ShapeMismatch(f"panoptic {panoptic.shape}, distribution {soft.shape}, sample {s.shape}")
    cls, _ = decode_panoptic(panoptic)
    thing = np.isin(cls, np.fromiter((int(t) for t in things), dtype=np.uint32))
    return UncertaintyMap("combined_softmax_sigmoid", np.where(thing, 0.5 * (soft + mask), soft), confident=True)


def compute_measures(fused: SampleTensor, accumulators: Sequence, panoptic: Optional[np.ndarray] = None,
                     things: Collection[int] = (), names: Sequence[str] = MEASURES,
                     d: Optional[PixelClassDistribution] = None) -> Dict[str, UncertaintyMap]:
    """Finalise the requested measures for one aggregated image."""
    unknown = set(names) - set(MEASURES)
    if unknown:
        raise ValueError(f"unknown measures {sorted(unknown)}")
    if d is None:
        d = pixel_class_distribution(fused)
    out: Dict[str, UncertaintyMap] = {}
    for name in names:
        if name.startswith(("predictive_entropy", "expected_entropy", "mutual_information")):
            acc = _find(accumulators, DistributionAccumulator, name.rsplit("_", 1)[1])
            fn = {"predictive": predictive_entropy, "expected": expected_entropy,
                  "mutual": mutual_information}[name.split("_", 1)[0]]
            out[name] = fn(acc)
        elif name == "expected_mask_variance":
            out[name] = mask_variance(_find(accumulators, MaskVarianceAccumulator), "expected")
        elif name == "predictive_mask_variance":
            out[name] = mask_variance(fused, "predictive")
        elif name == "max_softmax_cm":
            out[name] = max_softmax_score(d)
        elif name == "max_norm_sigmoid_mask":
            out[name] = max_normalized_sigmoid_mask(fused)
        else:
            if panoptic is None:
                raise ValueError("combined_softmax_sigmoid needs a panoptic map")
            out[name] = combined_softmax_sigmoid(d, fused, panoptic, things)
    return out
