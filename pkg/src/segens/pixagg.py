"""Reduce a pixel-level uncertainty map to one image-level score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import UncertaintyMap

DEFAULT_PATCH = 128


def image_aggregate(u: UncertaintyMap, mode: str = "mean") -> float:
    v = np.asarray(u.values, dtype=np.float64)
    if mode == "mean":
        return float(v.mean())
    if mode == "sum":
        return float(v.sum())
    raise ValueError(f"unknown image aggregation {mode!r}")


def patch_means(values: np.ndarray, patch: int) -> np.ndarray:
    """Mean of each non-overlapping ``patch x patch`` tile, ragged edges kept."""
    if patch < 1:
        raise ValueError("patch must be >= 1")
    v = np.asarray(values, dtype=np.float64)
    rows = np.arange(0, v.shape[0], patch)
    cols = np.arange(0, v.shape[1], patch)
    sums = np.add.reduceat(np.add.reduceat(v, rows, axis=0), cols, axis=1)
    heights = np.minimum(rows + patch, v.shape[0]) - rows
    widths = np.minimum(cols + patch, v.shape[1]) - cols
    return sums / np.outer(heights, widths)


def patch_aggregate(u: UncertaintyMap, patch: int = DEFAULT_PATCH) -> float:
    """Most uncertain tile mean: max for uncertainty maps, min for confidence maps."""
    means = patch_means(u.values, patch)
    return float(means.min() if u.confident else means.max())


@dataclass(frozen=True)
class PixelAgg:
    """Parsed ``--pixel-agg`` value: ``image-mean``, ``image-sum`` or ``patch:<N>``."""

    mode: str
    patch: int = 0

    @classmethod
    def parse(cls, text: str) -> "PixelAgg":
        if text in ("image-mean", "image-sum"):
            return cls(text)
        if text.startswith("patch:"):
            try:
                n = int(text.split(":", 1)[1])
            except ValueError:
                n = 0
            if n >= 1:
                return cls("patch", n)
        raise ValueError(f"bad pixel aggregation {text!r}; use image-mean, image-sum or patch:<N>")

    @property
    def label(self) -> str:
        return f"patch:{self.patch}" if self.mode == "patch" else self.mode

    def __call__(self, u: UncertaintyMap) -> float:
        if self.mode == "patch":
            return patch_aggregate(u, self.patch)
        return image_aggregate(u, self.mode.split("-", 1)[1])


def confidence_score(u: UncertaintyMap, agg: PixelAgg) -> float:
    """Image confidence for selective prediction: the score itself for
    confidence-oriented measures, its negation otherwise."""
    s = agg(u)
    return s if u.confident else -s


def ood_score(u: UncertaintyMap, agg: PixelAgg) -> float:
    """Image-level uncertainty, higher meaning more likely out-of-distribution."""
    s = agg(u)
    return -s if u.confident else s
