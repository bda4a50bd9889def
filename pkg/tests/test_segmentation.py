import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from msgcn.raster_io import Raster, stack_pair
from msgcn.segmentation import (HeterogeneityWeights, SegmentationError, build_hierarchy, fnea_segment,
                                hierarchy_from_label_images, level_from_labels, merge_cost, neighbors)


def _pair(plane):
    plane = np.asarray(plane, dtype=np.float64)
    r = Raster(plane[None])
    return stack_pair(r, r)


def _single(plane):
    """A pair whose stacked raster has the plane in band 0 and zeros in band 1."""
    plane = np.asarray(plane, dtype=np.float64)
    return stack_pair(Raster(plane[None]), Raster(np.zeros_like(plane)[None]))


def _oracle_cost(values, mask_a, mask_b, color=0.9, compactness=0.5, vr=255.0):
    """Straight-line heterogeneity increase from pixel masks."""

    def stats(mask):
        n = int(mask.sum())
        sig = sum(np.std(values[b][mask] * vr) for b in range(values.shape[0]))
        padded = np.pad(mask, 1)
        perim = sum(int(np.count_nonzero(padded & ~np.roll(padded, s, axis=ax)))
                    for ax in (0, 1) for s in (1, -1))
        rows, cols = np.nonzero(mask)
        bbox_perim = 2 * (np.ptp(rows) + 1 + np.ptp(cols) + 1)
        return n, sig, perim, bbox_perim

    na, sa, pa, ba = stats(mask_a)
    nb, sb, pb, bb = stats(mask_b)
    nm, sm, pm, bm = stats(mask_a | mask_b)
    d_color = nm * sm - na * sa - nb * sb
    d_compact = math.sqrt(nm) * pm - math.sqrt(na) * pa - math.sqrt(nb) * pb
    d_smooth = nm * pm / bm - na * pa / ba - nb * pb / bb
    f = color * d_color + (1 - color) * (compactness * d_compact + (1 - compactness) * d_smooth)
    return max(f, 0.0)


def test_merge_cost_hand_example():
    # 1x3 strip: a 2-pixel parcel at value 0 next to one pixel 10 grey levels up
    lvl = level_from_labels(_single([[0.0, 0.0, 10 / 255]]), np.array([[0, 0, 1]]))
    a, b = lvl.parcels
    expected = 0.9 * math.sqrt(2) * 10 + 0.1 * 0.5 * (math.sqrt(3) * 8 - math.sqrt(2) * 6 - 4)
    assert merge_cost(a, b) == pytest.approx(expected, rel=1e-12)
    assert merge_cost(a, b) == pytest.approx(12.796478, abs=1e-6)


def test_merge_cost_matches_mask_oracle():
    rng = np.random.default_rng(5)
    plane = rng.random((5, 6))
    labels = np.zeros((5, 6), int)
    labels[:, 3:] = 1
    labels[3:, :2] = 2
    pair = _single(plane)
    lvl = level_from_labels(pair, labels)
    for i, j in lvl.edges():
        got = merge_cost(lvl.parcels[i], lvl.parcels[j])
        want = _oracle_cost(pair.stacked.data, lvl.label_image == i, lvl.label_image == j)
        assert got == pytest.approx(want, rel=1e-10, abs=1e-9)


def test_merge_cost_is_symmetric_and_rejects_non_adjacent():
    lvl = level_from_labels(_single(np.random.default_rng(0).random((1, 3))), np.array([[0, 1, 2]]))
    p0, p1, p2 = lvl.parcels
    assert merge_cost(p0, p1) == merge_cost(p1, p0)
    with pytest.raises(SegmentationError, match="not adjacent"):
        merge_cost(p0, p2)


def test_identical_pixels_merge_at_zero_colour_cost():
    lvl = level_from_labels(_single([[0.4, 0.4]]), np.array([[0, 1]]))
    # colour term 0; shape: 2 * 6 / 6 - 2 * 4 / 4 = 0 smooth, sqrt(2) * 6 - 8 compact
    assert merge_cost(*lvl.parcels) == pytest.approx(0.05 * (math.sqrt(2) * 6 - 8))


def test_single_pixel_image():
    lvl = fnea_segment(_pair([[0.7]]), 8)
    assert lvl.n_parcels == 1
    assert lvl.parcels[0].area == 1
    assert neighbors(lvl, 0) == set()


def test_constant_image_is_one_parcel():
    lvl = fnea_segment(_pair(np.full((8, 8), 0.3)), 8)
    assert lvl.n_parcels == 1


def test_two_halves_stay_apart():
    plane = np.zeros((8, 8))
    plane[:, 4:] = 1.0
    lvl = fnea_segment(_pair(plane), 8)
    assert lvl.n_parcels == 2
    np.testing.assert_array_equal(lvl.label_image, (plane > 0).astype(int))
    # merging the halves would cost far more than the threshold
    a, b = lvl.parcels
    assert merge_cost(a, b) > 8 ** 2
    assert merge_cost(a, b) == pytest.approx(_oracle_cost(_pair(plane).stacked.data, plane == 0, plane == 1))


def test_neighbors_on_hand_grid():
    labels = np.array([[0, 0, 1],
                       [2, 3, 1],
                       [2, 3, 3]])
    lvl = level_from_labels(_single(np.zeros((3, 3))), labels)
    assert neighbors(lvl, 0) == {1, 2, 3}
    assert neighbors(lvl, 1) == {0, 3}
    assert neighbors(lvl, 2) == {0, 3}
    assert neighbors(lvl, 3) == {0, 1, 2}
    with pytest.raises(SegmentationError, match="invalid parcel id"):
        neighbors(lvl, 4)
    with pytest.raises(SegmentationError):
        neighbors(lvl, -1)


def test_labels_renumbered_in_raster_order():
    lvl = level_from_labels(_single(np.zeros((2, 2))), np.array([[7, 3], [7, 3]]))
    np.testing.assert_array_equal(lvl.label_image, [[0, 1], [0, 1]])
    assert lvl.parcels[1].centroid == (0.5, 1.0)
    assert lvl.parcels[0].perimeter == 6


def _textured(seed, size=32, block=4):
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.25, 0.45, size=(size // block, size // block))
    plane = np.kron(means, np.ones((block, block))) + rng.normal(0, 0.02, (size, size))
    return _pair(plane)


def test_hierarchy_counts_decrease_and_nest():
    h = build_hierarchy(_textured(1), (8, 15, 20), seed=3)
    n1, n2, n3 = h.counts()
    assert n1 > n2 > n3 >= 1
    for k in (1, 2):
        fathers = h.father_maps[k]
        assert fathers.shape == (n1,)
        np.testing.assert_array_equal(fathers[h.finest.label_image], h.levels[k].label_image)


def test_single_scale_hierarchy():
    h = build_hierarchy(_textured(2), (8,))
    assert len(h) == 1 and h.father_maps == {}


def test_hierarchy_rejects_bad_scales():
    with pytest.raises(SegmentationError, match="ascending"):
        build_hierarchy(_textured(0), (15, 8))
    with pytest.raises(SegmentationError, match="positive"):
        build_hierarchy(_textured(0), (0, 8))
    with pytest.raises(SegmentationError):
        fnea_segment(_textured(0), -1)


def test_label_images_must_nest():
    pair = _single(np.zeros((2, 2)))
    fine = np.array([[0, 1], [2, 3]])
    crossing = np.array([[0, 0], [0, 1]])
    assert len(hierarchy_from_label_images(pair, [fine, crossing], (1, 2))) == 2
    with pytest.raises(SegmentationError, match="not nested"):
        hierarchy_from_label_images(pair, [np.array([[0, 0], [1, 1]]), np.array([[0, 1], [0, 1]])], (1, 2))


def test_band_weights_length_checked():
    with pytest.raises(SegmentationError):
        HeterogeneityWeights(band_weights=(1.0,)).bands(2)


small_planes = arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)),
                      elements=st.floats(0, 1, allow_nan=False, width=32))


@settings(max_examples=40, deadline=None)
@given(small_planes, st.floats(1, 40), st.integers(0, 1000))
def test_segmentation_partition_connectivity_and_termination(plane, scale, seed):
    pair = _pair(plane)
    lvl = fnea_segment(pair, scale, seed=seed)
    lab = lvl.label_image
    assert set(np.unique(lab)) == set(range(lvl.n_parcels))
    assert sum(p.area for p in lvl.parcels) == plane.size
    for i in range(lvl.n_parcels):
        _, ncomp = ndimage.label(lab == i)
        assert ncomp == 1
    # merging stops only when every adjacent pair costs at least scale^2
    for i, j in lvl.edges():
        assert merge_cost(lvl.parcels[i], lvl.parcels[j]) >= scale ** 2 * (1 - 1e-9) - 1e-9
    again = fnea_segment(pair, scale, seed=seed)
    np.testing.assert_array_equal(again.label_image, lab)


@settings(max_examples=25, deadline=None)
@given(small_planes, st.lists(st.floats(1, 30), min_size=2, max_size=3, unique=True), st.integers(0, 100))
def test_hierarchy_nesting_property(plane, scales, seed):
    scales = sorted(scales)
    if any(b - a < 1e-6 for a, b in zip(scales, scales[1:])):
        return
    h = build_hierarchy(_pair(plane), scales, seed=seed)
    counts = h.counts()
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    for k, lvl in enumerate(h.levels[1:], start=1):
        np.testing.assert_array_equal(h.father_maps[k][h.finest.label_image], lvl.label_image)
