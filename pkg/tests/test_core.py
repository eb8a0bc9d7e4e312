import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scaleda.core import (IGNORE, Dataset, DomainLabel, Location, SegMask, Tile, argmax_labels, one_hot,
                          validate_tile)


def make_tile(h=64, w=64, gsd=0.09, value=0.5, tid="t0"):
    return Tile(np.full((h, w, 3), value), gsd, Location.SOURCE, tid)


def test_valid_tile_has_no_violations():
    assert validate_tile(make_tile()) == []


def test_zero_gsd_is_reported():
    assert validate_tile(make_tile(gsd=0.0)) == ["gsd_m must be > 0"]


def test_nan_pixel_is_reported():
    t = make_tile()
    t.pixels[3, 4, 1] = np.nan
    assert validate_tile(t) == ["pixels must be finite"]


@pytest.mark.parametrize("h,w", [(7, 64), (64, 7)])
def test_too_small_tile(h, w):
    assert any("at least 8x8" in p for p in validate_tile(make_tile(h, w)))


def test_out_of_range_pixel():
    assert validate_tile(make_tile(value=1.5)) == ["pixels must lie in [0, 1]"]


def test_validate_tile_is_pure():
    t = make_tile(gsd=-1.0)
    t.pixels[0, 0, 0] = np.inf
    assert validate_tile(t) == validate_tile(t)


def test_one_hot_examples():
    np.testing.assert_array_equal(one_hot(SegMask(np.array([[0]]), 2))[:, 0, 0], [1, 0])
    oh = one_hot(SegMask(np.array([[0], [1]]), 2))
    np.testing.assert_array_equal(oh[:, 0, 0], [1, 0])
    np.testing.assert_array_equal(oh[:, 1, 0], [0, 1])
    np.testing.assert_array_equal(one_hot(SegMask(np.array([[IGNORE]]), 3))[:, 0, 0], [0, 0, 0])


def test_one_hot_rejects_out_of_range():
    with pytest.raises(ValueError):
        one_hot(SegMask(np.array([[2]]), 2))


@settings(max_examples=60, deadline=None)
@given(k=st.integers(2, 10), h=st.integers(1, 12), w=st.integers(1, 12), seed=st.integers(0, 2**31 - 1))
def test_one_hot_argmax_round_trip(k, h, w, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k, (h, w))
    labels[rng.random((h, w)) < 0.2] = IGNORE
    back = argmax_labels(one_hot(SegMask(labels, k)))
    keep = labels != IGNORE
    np.testing.assert_array_equal(back[keep], labels[keep])


def test_domain_label_rejects_other_values():
    assert DomainLabel(1).z == 1
    with pytest.raises(ValueError):
        DomainLabel(2)


def test_dataset_requires_uniform_gsd():
    with pytest.raises(ValueError, match="share gsd_m"):
        Dataset((make_tile(gsd=0.09), make_tile(gsd=0.05, tid="t1")))


def test_dataset_mask_shape_must_match():
    with pytest.raises(ValueError, match="does not match"):
        Dataset((make_tile(),), (SegMask(np.zeros((8, 8), int), 5),))
