"""Mask Distance sample aggregation as a constant-memory streaming fold.

Each incoming sample is matched query-by-query against the running mean of
everything folded so far, using the Euclidean distance between sigmoid masks,
and then folded into that mean in logit space.  Only the running mean and the
current sample are ever resident.
"""

from __future__ import annotations

import weakref
from functools import cached_property
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EmptyEnsemble, ShapeMismatch
from .types import SampleTensor, sigmoid

CHUNK_PIXELS = 1 << 14


def _masks_of(x) -> np.ndarray:
    return x.masks if isinstance(x, (SampleTensor, RunningAggregate)) else np.asarray(x)


def mask_distance_matrix(ref, nxt, chunk: int = CHUNK_PIXELS) -> np.ndarray:
    """Pairwise distances ``D[a, b] = ||sigmoid(next[a]) - sigmoid(ref[b])||_2``.

    ``ref`` and ``nxt`` are samples, running aggregates or raw ``(P, h, w)``
    logit stacks.  Pixels are streamed in chunks so no ``P x P x h x w``
    intermediate is formed.
    """
    r = _masks_of(ref)
    n = _masks_of(nxt)
    if r.shape != n.shape:
        raise ShapeMismatch(f"mask stacks differ: {r.shape} vs {n.shape}")
    p = r.shape[0]
    r = r.reshape(p, -1)
    n = n.reshape(p, -1)
    gram = np.zeros((p, p))
    nn = np.zeros(p)
    rr = np.zeros(p)
    for start in range(0, r.shape[1], chunk):
        a = sigmoid(n[:, start:start + chunk])
        b = sigmoid(r[:, start:start + chunk])
        gram += a @ b.T
        nn += np.einsum("ij,ij->i", a, a)
        rr += np.einsum("ij,ij->i", b, b)
    sq = nn[:, None] + rr[None, :] - 2.0 * gram
    return np.sqrt(np.maximum(sq, 0.0))


def greedy_match(dist: np.ndarray) -> np.ndarray:
    """Globally greedy assignment without replacement.

    Pairs are taken cheapest first, ties broken by incoming index then
    reference index.  Returns ``perm`` with ``perm[a]`` the reference slot
    assigned to incoming query ``a``.
    """
    d = np.asarray(dist, dtype=np.float64)
    p = d.shape[0]
    rows, cols = np.indices(d.shape)
    order = np.lexsort((cols.ravel(), rows.ravel(), d.ravel()))
    perm = np.full(p, -1, dtype=np.intp)
    taken = np.zeros(p, dtype=bool)
    left = p
    for flat in order:
        a, b = divmod(int(flat), p)
        if perm[a] < 0 and not taken[b]:
            perm[a] = b
            taken[b] = True
            left -= 1
            if not left:
                break
    return perm


def hungarian_match(dist: np.ndarray) -> np.ndarray:
    """Minimum total cost bijection, same convention as :func:`greedy_match`."""
    rows, cols = linear_sum_assignment(np.asarray(dist, dtype=np.float64))
    perm = np.empty(len(rows), dtype=np.intp)
    perm[rows] = cols
    return perm


def assignment_cost(dist: np.ndarray, perm: np.ndarray) -> float:
    return float(np.asarray(dist)[np.arange(len(perm)), perm].sum())


class ResidencyProbe:
    """Counts full-resolution samples alive during a fold.

    Every sample handed to :meth:`track` is counted until it is garbage
    collected; the running mean counts as one more resident while a fold is
    in progress.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.mean_resident = 0

    def _bump(self):
        self.peak = max(self.peak, self.live + self.mean_resident)

    def track(self, sample: SampleTensor) -> SampleTensor:
        self.live += 1
        weakref.finalize(sample, self._release)
        self._bump()
        return sample

    def hold_mean(self):
        self.mean_resident = 1
        self._bump()

    def _release(self):
        self.live -= 1


class MatchedSample:
    """An incoming sample viewed in the reference query order.

    Slot ``b`` of the view is incoming query ``order[b]``.  Derived per-pixel
    quantities are computed lazily and shared by all accumulators.
    """

    def __init__(self, sample: SampleTensor, order: np.ndarray):
        self.sample = sample
        self.order = order

    @cached_property
    def logits(self) -> np.ndarray:
        return self.sample.logits[self.order]

    @cached_property
    def mask_probs(self) -> np.ndarray:
        """Sigmoid masks, ``(P, h, w)`` float64, reference order."""
        return sigmoid(self.sample.masks)[self.order]

    @cached_property
    def class_distribution(self) -> np.ndarray:
        from .fuse import class_distribution_from
        return class_distribution_from(self.sample.logits, sigmoid(self.sample.masks))[0]

    @cached_property
    def mask_distribution(self) -> np.ndarray:
        from .fuse import normalize_mask_probs
        return normalize_mask_probs(self.mask_probs)


class RunningAggregate:
    """Running logit-space mean of matched samples.

    The mean is kept in float64; :meth:`to_sample` emits float32.
    """

    def __init__(self, first: SampleTensor, accumulators: Sequence = (),
                 matcher: Callable[[np.ndarray], np.ndarray] = greedy_match):
        self.count = 1
        self.mean_logits = first.logits.astype(np.float64)
        self.mean_masks = first.masks.astype(np.float64)
        self.accumulators = list(accumulators)
        self.matcher = matcher
        view = MatchedSample(first, np.arange(first.n_queries))
        for acc in self.accumulators:
            acc.update(view)

    @property
    def masks(self) -> np.ndarray:
        return self.mean_masks

    @property
    def shape(self) -> Tuple[int, int]:
        return self.mean_masks.shape[1:]

    def fold(self, nxt: SampleTensor) -> "RunningAggregate":
        if nxt.masks.shape != self.mean_masks.shape or nxt.logits.shape != self.mean_logits.shape:
            raise ShapeMismatch(
                f"sample {nxt.logits.shape}/{nxt.masks.shape} does not match "
                f"aggregate {self.mean_logits.shape}/{self.mean_masks.shape}")
        perm = self.matcher(mask_distance_matrix(self.mean_masks, nxt.masks))
        order = np.argsort(perm)
        self.count += 1
        inv = 1.0 / self.count
        self.mean_logits += (nxt.logits[order] - self.mean_logits) * inv
        # row-wise so no second full-size copy of the sample exists
        for b, a in enumerate(order):
            self.mean_masks[b] += (nxt.masks[a] - self.mean_masks[b]) * inv
        view = MatchedSample(nxt, order)
        for acc in self.accumulators:
            acc.update(view)
        return self

    def to_sample(self) -> SampleTensor:
        return SampleTensor(self.mean_logits.astype(np.float32), self.mean_masks.astype(np.float32))


def fold_sample(agg: RunningAggregate, nxt: SampleTensor) -> RunningAggregate:
    return agg.fold(nxt)


def aggregate_stream(ensemble: Iterable[SampleTensor], accumulators: Sequence = (),
                     probe: Optional[ResidencyProbe] = None,
                     matcher: Callable[[np.ndarray], np.ndarray] = greedy_match
                     ) -> Tuple[SampleTensor, List]:
    """Fold an aligned ensemble into one fused sample.

    A single-sample ensemble is returned unchanged (the deterministic
    baseline).  Returns the fused sample and the updated accumulators.
    """
    agg = None
    for sample in ensemble:
        if probe is not None:
            probe.track(sample)
        if agg is None:
            agg = RunningAggregate(sample, accumulators, matcher)
            if probe is not None:
                probe.hold_mean()
        else:
            agg.fold(sample)
        del sample
    if agg is None:
        raise EmptyEnsemble("ensemble yielded no samples")
    # float32 -> float64 -> float32 is exact, so Q=1 returns the input bit-for-bit
    return agg.to_sample(), agg.accumulators
