import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from segens.fuse import (
    class_distribution_from,
    mask_assignment_distribution,
    panoptic_inference,
    pixel_class_distribution,
    semantic_from_panoptic,
    semantic_inference,
)
from segens.types import PixelClassDistribution, SampleTensor, decode_panoptic, encode_panoptic, sigmoid

from conftest import SAT, random_sample, rect_sample


def test_single_saturated_query_is_one_hot():
    logits = np.full((1, 4), -SAT, np.float32)
    logits[0, 2] = SAT
    s = SampleTensor(logits, np.full((1, 3, 3), SAT, np.float32))
    d = pixel_class_distribution(s).probs
    np.testing.assert_allclose(d, np.broadcast_to([0, 0, 1], (3, 3, 3)), atol=1e-12)


def test_disjoint_regions_take_their_class():
    s = rect_sample([(0, 0, 4, 2), (0, 2, 4, 4)], 4, 4, 4, classes=[0, 2])
    d = pixel_class_distribution(s).probs
    assert np.all(d[:, :2, 0] > 1 - 1e-9)
    assert np.all(d[:, 2:, 2] > 1 - 1e-9)


def test_uniform_class_logits_give_uniform_distribution(gen):
    s = SampleTensor(np.zeros((3, 5), np.float32), gen.normal(0, 5, (3, 4, 4)).astype(np.float32))
    np.testing.assert_allclose(pixel_class_distribution(s).probs, 0.25, atol=1e-12)


def test_underflow_uses_uniform_fallback():
    logits = np.array([[0.0, 0.0, 800.0]], np.float32)
    s = SampleTensor(logits, np.full((1, 2, 2), -800.0, np.float32))
    d = pixel_class_distribution(s)
    assert d.fallback_pixels == 4
    np.testing.assert_allclose(d.probs, 0.5)


def test_distribution_oracle(gen):
    s = random_sample(gen, 4, 5, 3, 3)
    d = pixel_class_distribution(s).probs
    for y in range(3):
        for x in range(3):
            w = np.zeros(4)
            for p in range(4):
                row = np.exp(s.logits[p].astype(np.float64))
                w += row[:-1] / row.sum() * (1 / (1 + math.exp(-float(s.masks[p, y, x]))))
            np.testing.assert_allclose(d[y, x], w / w.sum(), atol=1e-12)


def test_distribution_invariant_to_query_permutation(gen):
    s = random_sample(gen, 5, 4, 6, 6)
    perm = gen.permutation(5)
    t = SampleTensor(s.logits[perm], s.masks[perm])
    np.testing.assert_allclose(pixel_class_distribution(s).probs, pixel_class_distribution(t).probs, atol=1e-12)


def test_mask_assignment_examples():
    s = SampleTensor(np.zeros((4, 2), np.float32), np.full((4, 2, 2), 1.5, np.float32))
    np.testing.assert_allclose(mask_assignment_distribution(s), 0.25)
    masks = np.full((3, 1, 1), -SAT, np.float32)
    masks[1] = SAT
    d = mask_assignment_distribution(SampleTensor(np.zeros((3, 2), np.float32), masks))
    np.testing.assert_allclose(d[0, 0], [0, 1, 0], atol=1e-12)
    # sigmoid(ln 3) = 3/4, sigmoid(0) = 1/2 -> (3/5, 2/5)
    masks = np.array([[[math.log(3)]], [[0.0]]], np.float32)
    d = mask_assignment_distribution(SampleTensor(np.zeros((2, 2), np.float32), masks))
    np.testing.assert_allclose(d[0, 0], [0.6, 0.4], atol=1e-7)


def test_semantic_examples(gen):
    probs = np.zeros((2, 2, 3))
    probs[..., 1] = 1
    assert np.all(semantic_inference(PixelClassDistribution(probs)) == 2)
    tie = np.full((1, 1, 3), 0.0)
    tie[0, 0, 1:] = 0.5
    assert semantic_inference(PixelClassDistribution(tie))[0, 0] == 2
    rnd = gen.dirichlet(np.ones(5), size=(6, 7))
    out = semantic_inference(PixelClassDistribution(rnd))
    for y in range(6):
        for x in range(7):
            best, arg = -1.0, -1
            for k in range(5):
                if rnd[y, x, k] > best:
                    best, arg = rnd[y, x, k], k
            assert out[y, x] == arg + 1
    assert out.min() >= 1


def test_panoptic_single_thing_covers_everything():
    s = rect_sample([(0, 0, 5, 5)], 5, 5, 4, classes=[1])
    pan = panoptic_inference(s, things=[2])
    assert np.all(pan == encode_panoptic(2, 1))


def test_panoptic_stuff_merges():
    s = rect_sample([(0, 0, 2, 5), (3, 0, 5, 5)], 5, 5, 4, classes=[0, 0])
    pan = panoptic_inference(s, things=[2])
    assert set(np.unique(pan).tolist()) == {0, int(encode_panoptic(1, 0))}
    assert np.all(pan[2] == 0)


def test_panoptic_things_numbered_in_query_order():
    s = rect_sample([(0, 0, 2, 5), (3, 0, 5, 5)], 5, 5, 4, classes=[1, 1])
    pan = panoptic_inference(s, things=[2])
    assert pan[0, 0] == encode_panoptic(2, 1)
    assert pan[4, 4] == encode_panoptic(2, 2)


def test_low_confidence_query_dropped():
    # softmax 0.7 on class 0: logits (ln 0.7, ln 0.2, ln 0.1)
    logits = np.log(np.array([[0.7, 0.2, 0.1]], np.float64)).astype(np.float32)
    s = SampleTensor(logits, np.full((1, 4, 4), SAT, np.float32))
    assert np.all(panoptic_inference(s) == 0)
    assert np.all(panoptic_inference(s, score_thresh=0.6) == encode_panoptic(1, 0))


def test_no_object_query_ignored():
    s = rect_sample([(0, 0, 4, 4)], 4, 4, 3, classes=[2])
    assert np.all(panoptic_inference(s) == 0)


def test_overlap_threshold_drops_occluded_segment():
    # query 1 (higher score) steals 9 of query 0's 16 pixels
    logits = np.full((2, 3), -SAT, np.float32)
    logits[0] = (2.5, 0.0, 0.0)  # class prob ~0.86
    logits[1, 1] = SAT
    masks = np.full((2, 4, 4), -SAT, np.float32)
    masks[0] = SAT
    masks[1, :3, :3] = SAT
    pan = panoptic_inference(SampleTensor(logits, masks), things=[1, 2])
    assert set(np.unique(pan).tolist()) == {0, int(encode_panoptic(2, 1))}
    pan = panoptic_inference(SampleTensor(logits, masks), overlap_thresh=0.4, things=[1, 2])
    assert pan[3, 3] == encode_panoptic(1, 1)


def test_threshold_validation(gen):
    with pytest.raises(ValueError):
        panoptic_inference(random_sample(gen, 1, 2, 2, 2), score_thresh=0.0)


@given(st.integers(0, 10_000), st.floats(0.05, 0.95), st.floats(0.0, 0.05))
def test_raising_score_threshold_never_adds_segments(seed, lo, step):
    # disjoint query masks: with overlapping masks a dropped query can hand
    # its pixels to others and let new segments through the overlap test
    g = np.random.default_rng(seed)
    p = 6
    edges = np.sort(g.choice(np.arange(1, 24), p - 1, replace=False))
    bounds = np.concatenate([[0], edges, [24]])
    masks = np.full((p, 4, 24), -SAT, np.float32)
    for q in range(p):
        masks[q, :, bounds[q]:bounds[q + 1]] = g.uniform(0.5, 6.0, (4, bounds[q + 1] - bounds[q]))
    s = SampleTensor((4.0 * g.standard_normal((p, 4))).astype(np.float32), masks)
    a = len(set(np.unique(panoptic_inference(s, lo, 0.5, [1, 2]))) - {0})
    b = len(set(np.unique(panoptic_inference(s, lo + step, 0.5, [1, 2]))) - {0})
    assert b <= a


def test_semantic_agrees_with_dominant_panoptic_winner(gen):
    s = rect_sample([(0, 0, 3, 6), (3, 0, 6, 3), (3, 3, 6, 6)], 6, 6, 5, classes=[0, 1, 3])
    pan = panoptic_inference(s, things=[2, 4])
    sem = semantic_inference(pixel_class_distribution(s))
    cls, _ = decode_panoptic(pan)
    keep = pan != 0
    assert keep.all()
    assert np.array_equal(sem[keep], cls[keep])
    assert np.array_equal(semantic_from_panoptic(pan), sem)


def test_class_distribution_shapes(gen):
    s = random_sample(gen, 3, 6, 4, 5)
    d, dead = class_distribution_from(s.logits, sigmoid(s.masks))
    assert d.shape == (4, 5, 5) and dead == 0
    np.testing.assert_allclose(d.sum(axis=-1), 1.0, atol=1e-12)
