"""Domain types shared by all segens modules.

Class ids follow the label-map convention: ``0`` is VOID and dataset classes
are ``1..c``.  Column ``j`` of a sample's class logits therefore scores class
id ``j + 1``; the trailing column ``c`` is the "no object" score.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional, Tuple

import numpy as np
from scipy.special import expit

from .errors import EmptyTensor, NonFiniteLogit, ShapeMismatch

VOID = 0
INSTANCE_OFFSET = 65536

DEFAULT_SCALES = (0.8, 1.25)
MAX_PRIOR_FRAMES = 5


@dataclass(frozen=True)
class Transform:
    """Geometric provenance of a sample.

    Flags compose: a sample can be both flipped and rescaled, and can come
    from a prior frame.  ``Transform()`` is the identity.
    """

    hflip: bool = False
    scale: float = 1.0
    frame: int = 0

    @property
    def is_identity(self) -> bool:
        return not self.hflip and self.scale == 1.0 and self.frame == 0

    @property
    def kind(self) -> str:
        parts = []
        if self.frame:
            parts.append("prior_frame")
        if self.scale != 1.0:
            parts.append("scale")
        if self.hflip:
            parts.append("hflip")
        return "+".join(parts) or "identity"

    def sort_key(self) -> Tuple[int, bool, bool, float]:
        return (self.frame, self.hflip, self.scale != 1.0, self.scale)

    def check(self, scales=DEFAULT_SCALES, max_frame=MAX_PRIOR_FRAMES) -> "Transform":
        if self.scale != 1.0 and not any(abs(self.scale - s) < 1e-6 for s in scales):
            raise ValueError(f"scale factor {self.scale} not in {scales}")
        if not 0 <= self.frame <= max_frame:
            raise ValueError(f"prior frame offset {self.frame} outside [0, {max_frame}]")
        return self


IDENTITY = Transform()


@dataclass(frozen=True, eq=False)
class SampleTensor:
    """One ensemble member: per-query class logits and mask logits.

    ``logits`` has shape ``(P, c_total)`` and ``masks`` ``(P, h, w)``; both are
    float32.  Instances are treated as immutable once validated.
    """

    logits: np.ndarray
    masks: np.ndarray
    transform: Transform = IDENTITY

    @property
    def n_queries(self) -> int:
        return self.logits.shape[0]

    @property
    def c_total(self) -> int:
        return self.logits.shape[1]

    @property
    def n_classes(self) -> int:
        return self.logits.shape[1] - 1

    @property
    def shape(self) -> Tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]

    def replace(self, **changes) -> "SampleTensor":
        return replace(self, **changes)


def make_sample(logits, masks, transform: Transform = IDENTITY, c_total: Optional[int] = None) -> SampleTensor:
    """Build a validated sample, casting inputs to float32."""
    return validate_sample(
        SampleTensor(
            np.ascontiguousarray(logits, dtype=np.float32),
            np.ascontiguousarray(masks, dtype=np.float32),
            transform,
        ),
        c_total=c_total,
    )


def validate_sample(raw: SampleTensor, c_total: Optional[int] = None) -> SampleTensor:
    """Return ``raw`` if every structural invariant holds, otherwise raise.

    ``c_total`` is the class-column count declared for the ensemble the sample
    belongs to, if known.
    """
    logits, masks = raw.logits, raw.masks
    if logits.ndim != 2 or masks.ndim != 3:
        raise ShapeMismatch(f"expected logits (P, c_total) and masks (P, h, w), got {logits.shape} and {masks.shape}")
    if logits.size == 0 or masks.size == 0:
        raise EmptyTensor(f"empty sample: logits {logits.shape}, masks {masks.shape}")
    if logits.shape[0] != masks.shape[0]:
        raise ShapeMismatch(f"query count differs: {logits.shape[0]} logits vs {masks.shape[0]} masks")
    if logits.shape[1] < 2:
        raise ShapeMismatch("need at least one class column plus the no-object column")
    if c_total is not None and logits.shape[1] != c_total:
        raise ShapeMismatch(f"sample has c_total={logits.shape[1]}, ensemble declares {c_total}")
    for name, arr in (("logits", logits), ("masks", masks)):
        bad = ~np.isfinite(arr)
        if bad.any():
            raise NonFiniteLogit(name, np.argwhere(bad)[0])
    return raw


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax computed in float64."""
    x = np.asarray(logits, dtype=np.float64)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # expit saturates to exactly 1.0 above ~37 in float64
    return expit(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class PixelClassDistribution:
    """Per-pixel distribution over the ``c`` dataset classes, shape (h, w, c)."""

    probs: np.ndarray
    fallback_pixels: int = 0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.probs.shape[0], self.probs.shape[1]


@dataclass(frozen=True)
class FlowField:
    """Backward flow (target -> source) in pixels with a validity mask."""

    flow: np.ndarray  # (h, w, 2): dx, dy
    valid: np.ndarray  # (h, w) bool

    def __post_init__(self):
        flow = np.asarray(self.flow, dtype=np.float32)
        valid = np.asarray(self.valid, dtype=bool)
        if flow.ndim != 3 or flow.shape[2] != 2 or valid.shape != flow.shape[:2]:
            raise ShapeMismatch(f"flow {flow.shape} / validity {valid.shape} disagree")
        flow = np.where(valid[..., None], flow, np.float32(0))
        object.__setattr__(self, "flow", flow)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.valid.shape


CONFIDENCE_MEASURES = frozenset({"max_softmax_cm", "max_norm_sigmoid_mask", "combined_softmax_sigmoid"})


@dataclass(frozen=True)
class UncertaintyMap:
    """Per-pixel score for one named measure.

    ``confident`` is the orientation bit: True means higher values are more
    confident, False means higher values are more uncertain.  ``degenerate``
    marks spread measures computed from a single sample.
    """

    name: str
    values: np.ndarray
    confident: bool = False
    degenerate: bool = False

    def __post_init__(self):
        if self.confident != (self.name in CONFIDENCE_MEASURES):
            raise ValueError(f"orientation flag inconsistent with measure {self.name!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite values in {self.name}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


def encode_panoptic(class_ids, instance_ids) -> np.ndarray:
    c = np.asarray(class_ids, dtype=np.uint32)
    i = np.asarray(instance_ids, dtype=np.uint32)
    return c * np.uint32(INSTANCE_OFFSET) + i


def decode_panoptic(encoded) -> Tuple[np.ndarray, np.ndarray]:
    e = np.asarray(encoded, dtype=np.uint32)
    return e // np.uint32(INSTANCE_OFFSET), e % np.uint32(INSTANCE_OFFSET)


@dataclass
class AlignedEnsemble:
    """Re-iterable stream of ``size`` identity-aligned samples.

    ``producer`` is called afresh on each iteration and must yield the same
    samples in the same order every time.
    """

    size: int
    producer: Callable[[], Iterator[SampleTensor]]
    frame: Tuple[int, int]
    transforms: Tuple[Transform, ...] = field(default=())

    def __len__(self) -> int:
        return self.size

    def __iter__(self) -> Iterator[SampleTensor]:
        return iter(self.producer())
