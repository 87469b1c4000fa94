import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segens.pixagg import PixelAgg, confidence_score, image_aggregate, ood_score, patch_aggregate, patch_means
from segens.types import UncertaintyMap


def umap(values, confident=False):
    name = "max_softmax_cm" if confident else "predictive_entropy_cm"
    return UncertaintyMap(name, np.asarray(values, dtype=np.float64), confident=confident)


def test_image_examples():
    assert image_aggregate(umap(np.full((5, 7), 0.3))) == pytest.approx(0.3)
    assert image_aggregate(umap([[1.0, 2.0], [3.0, 4.0]]), "sum") == 10.0
    with pytest.raises(ValueError):
        image_aggregate(umap([[1.0]]), "median")


def test_hotspot_patch():
    v = np.zeros((8, 8))
    v[:4, :4] = 1.0
    assert patch_aggregate(umap(v), 4) == 1.0
    assert image_aggregate(umap(v)) == 0.25
    assert patch_aggregate(umap(1 - v, confident=True), 4) == 0.0


def test_patch_means_oracle(gen):
    v = gen.uniform(size=(8, 8))
    got = patch_means(v, 4)
    ref = np.array([[v[i:i + 4, j:j + 4].mean() for j in (0, 4)] for i in (0, 4)])
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_ragged_tiles(gen):
    v = gen.uniform(size=(5, 7))
    got = patch_means(v, 3)
    assert got.shape == (2, 3)
    assert got[1, 2] == pytest.approx(v[3:, 6:].mean())
    with pytest.raises(ValueError):
        patch_means(v, 0)


@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.floats(0, 5)),
       st.integers(0, 4))
def test_large_patch_equals_mean(v, extra):
    patch = max(v.shape) + extra
    assert patch_aggregate(umap(v), patch) == pytest.approx(v.mean(), abs=1e-12)


@given(arrays(np.float64, (6, 6), elements=st.floats(0, 5)), st.integers(0, 35), st.floats(0, 3))
def test_raising_a_pixel_never_lowers_score(v, k, bump):
    w = v.copy()
    w.flat[k] += bump
    for agg in ("image-mean", "image-sum", "patch:2", "patch:4"):
        a = PixelAgg.parse(agg)
        assert a(umap(w)) >= a(umap(v)) - 1e-12


def test_parse():
    assert PixelAgg.parse("patch:16") == PixelAgg("patch", 16)
    assert PixelAgg.parse("patch:16").label == "patch:16"
    assert PixelAgg.parse("image-sum").label == "image-sum"
    for bad in ("patch:0", "patch:x", "patch", "mean", ""):
        with pytest.raises(ValueError):
            PixelAgg.parse(bad)


def test_score_orientation():
    agg = PixelAgg.parse("image-mean")
    unc = umap(np.full((2, 2), 0.4))
    conf = umap(np.full((2, 2), 0.4), confident=True)
    assert confidence_score(unc, agg) == pytest.approx(-0.4)
    assert ood_score(unc, agg) == pytest.approx(0.4)
    assert confidence_score(conf, agg) == pytest.approx(0.4)
    assert ood_score(conf, agg) == pytest.approx(-0.4)
