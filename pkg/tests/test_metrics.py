import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

from segens.errors import DegenerateLabels, EmptyInput, NoValidClasses, ShapeMismatch
from segens.metrics import (
    ECEAccumulator,
    PQStat,
    ScoreRecord,
    aurc,
    aurc_records,
    auroc,
    calib_samples_panoptic,
    calib_samples_semantic,
    confusion_matrix,
    ece,
    miou,
    per_image_iou,
    pq,
    pq_image,
)
from segens.types import PixelClassDistribution, encode_panoptic


def seg(shape, *regions):
    """Panoptic map from (class, instance, y0, x0, y1, x1) rectangles."""
    m = np.zeros(shape, np.uint32)
    for c, i, y0, x0, y1, x1 in regions:
        m[y0:y1, x0:x1] = encode_panoptic(c, i)
    return m


# -- semantic ---------------------------------------------------------------

def test_confusion_matrix_cases():
    gt = np.array([[1, 1], [2, 0]])
    pred = np.array([[1, 2], [2, 1]])
    cm = confusion_matrix(pred, gt, 2)
    assert cm.tolist() == [[0, 0, 0], [0, 1, 1], [0, 0, 1]]
    assert cm.sum() == 3
    assert confusion_matrix(np.zeros((2, 2), int), np.ones((2, 2), int), 1).tolist() == [[0, 0], [4, 0]]
    with pytest.raises(ShapeMismatch):
        confusion_matrix(pred, gt[:1], 2)
    with pytest.raises(ValueError):
        confusion_matrix(pred + 5, gt, 2)


def test_miou_examples():
    gt = np.ones((4, 4), int)
    assert miou(confusion_matrix(gt, gt, 3)) == 1.0
    # half the pixels predicted as class 2: IoU(1) = 0.5, IoU(2) = 0
    pred = gt.copy()
    pred[:, 2:] = 2
    assert miou(confusion_matrix(pred, gt, 3)) == 0.5
    assert per_image_iou(pred, gt, 3) == 0.25
    with pytest.raises(NoValidClasses):
        miou(confusion_matrix(gt, np.zeros_like(gt), 3))


# -- panoptic ---------------------------------------------------------------

def test_pq_perfect_and_partial():
    gt = seg((10, 10), (2, 1, 0, 0, 10, 10))
    assert pq(gt, gt).pq == 1.0
    # prediction covers 6 of 10 rows: IoU 0.6
    pred = seg((10, 10), (2, 1, 0, 0, 6, 10))
    res = pq(pred, gt)
    assert res.pq == pytest.approx(0.6)
    assert res.sq == pytest.approx(0.6) and res.rq == 1.0


def test_pq_below_half_iou_is_fp_and_fn():
    gt = seg((10, 10), (2, 1, 0, 0, 10, 10))
    pred = seg((10, 10), (2, 1, 0, 0, 5, 10))
    stat, matched = pq_image(pred, gt)
    assert not matched
    assert (stat.tp[2], stat.fp[2], stat.fn[2]) == (0, 1, 1)
    assert pq(pred, gt).pq == 0.0


def test_pq_void_region_rule():
    gt = seg((10, 10), (2, 1, 0, 0, 10, 5))
    # unmatched prediction lying mostly over VOID is not a false positive
    pred = seg((10, 10), (2, 1, 0, 0, 10, 5), (3, 1, 0, 5, 10, 10))
    stat, _ = pq_image(pred, gt)
    assert stat.fp[3] == 0
    assert pq(pred, gt).pq == 1.0
    # void pixels inside a matched prediction leave the union
    pred = seg((10, 10), (2, 1, 0, 0, 10, 8))
    assert pq(pred, gt).pq == 1.0


def test_pq_class_mismatch_never_matches():
    gt = seg((4, 4), (2, 1, 0, 0, 4, 4))
    pred = seg((4, 4), (3, 1, 0, 0, 4, 4))
    stat, matched = pq_image(pred, gt)
    assert not matched and stat.fp[3] == 1 and stat.fn[2] == 1
    assert pq(pred, gt).pq == 0.0
    assert stat.result(gt_only=True).per_class.keys() == {2}


@given(st.integers(0, 10_000))
def test_pq_factorises(seed):
    g = np.random.default_rng(seed)
    gt = seg((12, 12), *[(int(g.integers(1, 4)), i + 1, *sorted(g.integers(0, 12, 2)), 0, 12) for i in range(3)])
    pred = seg((12, 12), *[(int(g.integers(1, 4)), i + 1, 0, *sorted(g.integers(0, 12, 2)), 12) for i in range(3)])
    if (gt == 0).all():
        return
    res = pq(pred, gt)
    for pq_c, sq_c, rq_c in res.per_class.values():
        assert pq_c == pytest.approx(sq_c * rq_c)
    assert 0 <= res.pq <= 1


def test_pq_stats_add():
    gt = seg((4, 4), (2, 1, 0, 0, 4, 4))
    a, _ = pq_image(gt, gt)
    b, _ = pq_image(seg((4, 4), (2, 1, 0, 0, 1, 4)), gt)
    a += b
    assert (a.tp[2], a.fp[2], a.fn[2]) == (1, 1, 1)
    with pytest.raises(NoValidClasses):
        PQStat().result()


# -- calibration ------------------------------------------------------------

def loop_ece(conf, ok, bins):
    total = 0.0
    for b in range(bins):
        lo, hi = b / bins, (b + 1) / bins
        idx = [i for i, c in enumerate(conf) if (lo < c <= hi) or (b == 0 and c == 0)]
        if idx:
            acc = sum(ok[i] for i in idx) / len(idx)
            avg = sum(conf[i] for i in idx) / len(idx)
            total += len(idx) / len(conf) * abs(acc - avg)
    return total


def test_ece_examples():
    assert ece(np.ones(10), np.ones(10, bool)) == 0.0
    ok = np.arange(10) % 2 == 0
    assert ece(np.full(10, 0.8), ok) == abs(0.5 - 0.8)
    with pytest.raises(EmptyInput):
        ece([], [])
    with pytest.raises(ValueError):
        ece([1.5], [True])


def test_ece_matches_loop(gen):
    for bins in (1, 10, 15):
        conf = gen.uniform(size=300)
        conf[:5] = [0.0, 1.0, 0.2, 0.4, 1 / 3]
        ok = gen.uniform(size=300) < conf
        assert ece(conf, ok, bins) == pytest.approx(loop_ece(conf, ok, bins), abs=1e-12)


def test_ece_streaming_merge(gen):
    conf = gen.uniform(size=100)
    ok = gen.uniform(size=100) < 0.7
    a = ECEAccumulator().add(conf[:40], ok[:40])
    a += ECEAccumulator().add(conf[40:], ok[40:])
    assert a.value() == pytest.approx(ece(conf, ok), abs=1e-12)
    with pytest.raises(ValueError):
        a += ECEAccumulator(5)


def test_calib_samples():
    probs = np.zeros((2, 2, 3))
    probs[..., 0] = 1
    gt = np.array([[1, 2], [0, 1]])
    conf, ok = calib_samples_semantic(PixelClassDistribution(probs), np.full((2, 2), 0.9), gt)
    assert ok.tolist() == [True, False, True] and conf.size == 3
    pan_gt = seg((2, 2), (2, 1, 0, 0, 2, 1))
    pan_pred = seg((2, 2), (2, 5, 0, 0, 2, 2))
    conf, ok = calib_samples_panoptic(np.ones((2, 2)), pan_pred, pan_gt, pq_image(pan_pred, pan_gt)[1])
    assert ok.tolist() == [True, True]


# -- selective prediction / OOD ---------------------------------------------

def oracle_aurc(conf, risk):
    order = sorted(range(len(conf)), key=lambda i: (-conf[i], i))
    return float(np.mean([np.mean([risk[j] for j in order[:k]]) for k in range(1, len(conf) + 1)]))


def test_aurc_examples():
    # correct ranking: the failing image is least confident
    assert aurc([0.9, 0.1], [0.0, 1.0]) == pytest.approx(0.25)
    assert aurc([0.1, 0.9], [0.0, 1.0]) == pytest.approx(0.75)
    assert aurc([0.5] * 4, [0.3] * 4) == pytest.approx(0.3)
    with pytest.raises(EmptyInput):
        aurc([], [])


def test_aurc_ties_by_id():
    assert aurc([0.5, 0.5], [1.0, 0.0], ids=["b", "a"]) == pytest.approx(0.25)
    recs = [ScoreRecord("b", 0.5, 1.0), ScoreRecord("a", 0.5, 0.0)]
    assert aurc_records(recs) == pytest.approx(0.25)


@given(st.integers(0, 10_000))
def test_aurc_oracle_and_monotone_invariance(seed):
    g = np.random.default_rng(seed)
    n = int(g.integers(1, 40))
    conf = g.normal(size=n)
    risk = g.uniform(size=n)
    a = aurc(conf, risk)
    assert a == pytest.approx(oracle_aurc(conf, risk), abs=1e-12)
    assert aurc(np.exp(conf), risk) == pytest.approx(a, abs=1e-12)


def test_auroc_examples():
    assert auroc([0.1, 0.9], [False, True]) == 1.0
    assert auroc([0.9, 0.1], [False, True]) == 0.0
    assert auroc([0.5, 0.5], [False, True]) == 0.5
    with pytest.raises(DegenerateLabels):
        auroc([0.1, 0.2], [True, True])


def test_auroc_pairwise_and_sklearn(gen):
    s = np.round(gen.normal(size=60), 1)
    y = gen.uniform(size=60) < 0.4
    pairs = [(1.0 if a > b else 0.5 if a == b else 0.0)
             for (a, la), (b, lb) in itertools.product(zip(s, y), repeat=2) if la and not lb]
    a = auroc(s, y)
    assert a == pytest.approx(np.mean(pairs), abs=1e-12)
    assert a == pytest.approx(roc_auc_score(y, s), abs=1e-12)
    assert auroc(-s, y) == pytest.approx(1 - a, abs=1e-12)
