"""Multiscale region-merging segmentation (FNEA style).

Regions start as single pixels and are merged pairwise while the increase in
heterogeneity of the merged object stays below ``scale ** 2``. Heterogeneity
mixes a spectral term (area-weighted standard deviation per band) with a
shape term (compactness and smoothness of the outline), following the
Baatz-Schaepe multiresolution criterion.

Coarser levels of a hierarchy are produced by continuing the merge process
from the previous level's parcels with a larger threshold, so every coarse
parcel is a union of finest parcels.

Level indices are 0-based: level 0 is the finest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .raster_io import RasterPair


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class HeterogeneityWeights:
    """Weights of the merge criterion.

    ``value_range`` rescales the [0, 1] spectral values before the colour
    term is computed, so scale parameters keep the meaning they have on
    8-bit imagery.
    """

    color: float = 0.9
    compactness: float = 0.5
    band_weights: Optional[Tuple[float, ...]] = None
    value_range: float = 255.0

    def bands(self, n_bands: int) -> Tuple[float, ...]:
        if self.band_weights is None:
            return (1.0,) * n_bands
        if len(self.band_weights) != n_bands:
            raise SegmentationError(
                f"{len(self.band_weights)} band weights given for {n_bands} bands")
        return tuple(float(w) for w in self.band_weights)


@dataclass(frozen=True, eq=False)
class Parcel:
    """A connected segment. Pixel coordinates are (row, col)."""

    id: int
    pixels: np.ndarray
    centroid: Tuple[float, float]
    mean_spectrum: np.ndarray
    std_spectrum: np.ndarray
    perimeter: int
    bbox: Tuple[int, int, int, int]

    @property
    def area(self) -> int:
        return len(self.pixels)


@dataclass(eq=False)
class SegmentationLevel:
    scale: float
    label_image: np.ndarray
    parcels: List[Parcel]
    _adjacency: Optional[List[Set[int]]] = field(default=None, repr=False)

    @property
    def n_parcels(self) -> int:
        return len(self.parcels)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.label_image.shape

    @property
    def areas(self) -> np.ndarray:
        return np.array([p.area for p in self.parcels], dtype=np.int64)

    @property
    def centroids(self) -> np.ndarray:
        return np.array([p.centroid for p in self.parcels], dtype=np.float64).reshape(-1, 2)

    @property
    def mean_spectra(self) -> np.ndarray:
        return np.array([p.mean_spectrum for p in self.parcels], dtype=np.float64)

    def adjacency(self) -> List[Set[int]]:
        if self._adjacency is None:
            adj: List[Set[int]] = [set() for _ in self.parcels]
            for i, j in _adjacent_label_pairs(self.label_image):
                adj[i].add(j)
                adj[j].add(i)
            self._adjacency = adj
        return self._adjacency

    def edges(self) -> np.ndarray:
        """Adjacent parcel pairs (i, j) with i < j, sorted."""
        pairs = sorted((i, j) for i, nb in enumerate(self.adjacency()) for j in nb if i < j)
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)


@dataclass(eq=False)
class SegmentationHierarchy:
    """Nested levels, finest first.

    ``father_maps[k][i]`` is the id of the level-``k`` parcel that contains
    finest parcel ``i``; keys run over 1..L-1.
    """

    levels: List[SegmentationLevel]
    father_maps: Dict[int, np.ndarray]

    def __len__(self):
        return len(self.levels)

    @property
    def finest(self) -> SegmentationLevel:
        return self.levels[0]

    def counts(self) -> List[int]:
        return [lvl.n_parcels for lvl in self.levels]


def _adjacent_label_pairs(labels: np.ndarray) -> Set[Tuple[int, int]]:
    pairs = set()
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = a != b
        if diff.any():
            lo = np.minimum(a[diff], b[diff])
            hi = np.maximum(a[diff], b[diff])
            pairs.update(zip(lo.tolist(), hi.tolist()))
    return pairs


def neighbors(level: SegmentationLevel, id: int) -> Set[int]:
    """Ids of the parcels sharing a 4-connected boundary with parcel ``id``."""
    if not 0 <= id < level.n_parcels:
        raise SegmentationError(f"invalid parcel id {id} (level has {level.n_parcels})")
    return set(level.adjacency()[id])


# -- merge criterion -------------------------------------------------------


def _hetero_delta(weights: HeterogeneityWeights, band_w, na, ma, m2a, pa, ba, nb, mb, m2b, pb, bb, shared):
    """Heterogeneity increase of merging regions a and b.

    ``m*`` are per-band means and ``m2*`` per-band sums of squared deviations,
    both already in ``value_range`` units; ``b*`` are (rmin, rmax, cmin, cmax).
    """
    nm = na + nb
    color = 0.0
    for w, xa, xb, qa, qb in zip(band_w, ma, mb, m2a, m2b):
        d = xb - xa
        m2m = qa + qb + d * d * na * nb / nm
        # n * sigma == sqrt(n * M2)
        color += w * (math.sqrt(nm * m2m) - math.sqrt(na * qa) - math.sqrt(nb * qb))
    pm = pa + pb - 2 * shared
    bm = 2 * (max(ba[1], bb[1]) - min(ba[0], bb[0]) + max(ba[3], bb[3]) - min(ba[2], bb[2]) + 2)
    bpa = 2 * (ba[1] - ba[0] + ba[3] - ba[2] + 2)
    bpb = 2 * (bb[1] - bb[0] + bb[3] - bb[2] + 2)
    compact = math.sqrt(nm) * pm - math.sqrt(na) * pa - math.sqrt(nb) * pb
    smooth = nm * pm / bm - na * pa / bpa - nb * pb / bpb
    shape = weights.compactness * compact + (1.0 - weights.compactness) * smooth
    f = weights.color * color + (1.0 - weights.color) * shape
    return f if f > 0.0 else 0.0


def _shared_boundary(a: Parcel, b: Parcel) -> int:
    pa = set(map(tuple, a.pixels.tolist()))
    shared = 0
    for r, c in b.pixels.tolist():
        for q in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if q in pa:
                shared += 1
    return shared


def merge_cost(a: Parcel, b: Parcel, weights: HeterogeneityWeights = HeterogeneityWeights()) -> float:
    """Heterogeneity increase caused by merging two adjacent parcels."""
    shared = _shared_boundary(a, b)
    if shared == 0:
        raise SegmentationError(f"parcels {a.id} and {b.id} are not adjacent")
    if b.id < a.id:
        a, b = b, a
    vr = weights.value_range
    m2a = a.area * (a.std_spectrum * vr) ** 2
    m2b = b.area * (b.std_spectrum * vr) ** 2
    return _hetero_delta(weights, weights.bands(len(a.mean_spectrum)),
                         a.area, a.mean_spectrum * vr, m2a, a.perimeter, a.bbox,
                         b.area, b.mean_spectrum * vr, m2b, b.perimeter, b.bbox, shared)


# -- region merging state ----------------------------------------------------


class _MergeState:
    """Mutable region statistics driving the merge loop.

    Region ids are the initial label ids; a merged region keeps the smaller id.
    """

    def __init__(self, values: np.ndarray, labels: np.ndarray, weights: HeterogeneityWeights):
        self.weights = weights
        self.shape = labels.shape
        self.labels0 = labels
        bands = values.shape[0]
        self.band_w = weights.bands(bands)
        n = int(labels.max()) + 1
        flat = labels.ravel()
        vals = values.reshape(bands, -1) * weights.value_range
        area = np.bincount(flat, minlength=n).astype(np.float64)
        means = np.stack([np.bincount(flat, v, minlength=n) for v in vals]) / area
        m2 = np.stack([np.bincount(flat, (v - mu[flat]) ** 2, minlength=n)
                       for v, mu in zip(vals, means)])
        rows, cols = np.indices(self.shape)
        rmin = np.full(n, np.iinfo(np.int64).max)
        rmax = np.full(n, -1)
        cmin = rmin.copy()
        cmax = rmax.copy()
        np.minimum.at(rmin, flat, rows.ravel())
        np.maximum.at(rmax, flat, rows.ravel())
        np.minimum.at(cmin, flat, cols.ravel())
        np.maximum.at(cmax, flat, cols.ravel())

        self.n = area.astype(np.int64).tolist()
        self.mean = [list(col) for col in means.T.tolist()]
        self.m2 = [list(col) for col in m2.T.tolist()]
        self.bbox = [list(b) for b in zip(rmin.tolist(), rmax.tolist(), cmin.tolist(), cmax.tolist())]
        self.adj: List[Dict[int, int]] = [dict() for _ in range(n)]
        perim = np.bincount(flat, minlength=n) * 4
        for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
            same = a == b
            perim -= 2 * np.bincount(a[same], minlength=n)
            diff = ~same
            for x, y in zip(a[diff].tolist(), b[diff].tolist()):
                self.adj[x][y] = self.adj[x].get(y, 0) + 1
                self.adj[y][x] = self.adj[y].get(x, 0) + 1
        self.perim = perim.tolist()
        self.parent = list(range(n))
        self.alive = [a > 0 for a in self.n]
        self._cost: Dict[Tuple[int, int], float] = {}

    def cost(self, a: int, b: int) -> float:
        key = (a, b) if a < b else (b, a)
        c = self._cost.get(key)
        if c is None:
            x, y = key
            c = _hetero_delta(self.weights, self.band_w,
                              self.n[x], self.mean[x], self.m2[x], self.perim[x], self.bbox[x],
                              self.n[y], self.mean[y], self.m2[y], self.perim[y], self.bbox[y],
                              self.adj[x][y])
            self._cost[key] = c
        return c

    def best(self, a: int):
        best_key = None
        for b in self.adj[a]:
            key = (self.cost(a, b), min(a, b), max(a, b))
            if best_key is None or key < best_key:
                best_key = key
        if best_key is None:
            return None, math.inf
        _, x, y = best_key
        return (y if x == a else x), best_key[0]

    def merge(self, a: int, b: int) -> None:
        keep, gone = (a, b) if a < b else (b, a)
        na, nb = self.n[keep], self.n[gone]
        nm = na + nb
        for k in range(len(self.mean[keep])):
            xa, xb = self.mean[keep][k], self.mean[gone][k]
            d = xb - xa
            self.m2[keep][k] += self.m2[gone][k] + d * d * na * nb / nm
            self.mean[keep][k] = xa + d * nb / nm
        self.n[keep] = nm
        shared = self.adj[keep].pop(gone)
        del self.adj[gone][keep]
        self.perim[keep] += self.perim[gone] - 2 * shared
        bk, bg = self.bbox[keep], self.bbox[gone]
        self.bbox[keep] = [min(bk[0], bg[0]), max(bk[1], bg[1]), min(bk[2], bg[2]), max(bk[3], bg[3])]
        cost = self._cost
        cost.pop((keep, gone), None)
        for x, length in self.adj[gone].items():
            cost.pop((x, gone) if x < gone else (gone, x), None)
            nbx = self.adj[x]
            del nbx[gone]
            nbx[keep] = nbx.get(keep, 0) + length
            self.adj[keep][x] = self.adj[keep].get(x, 0) + length
        for x in self.adj[keep]:
            cost.pop((x, keep) if x < keep else (keep, x), None)
        self.adj[gone] = {}
        self.alive[gone] = False
        self.parent[gone] = keep
        self.n[gone] = 0

    def run(self, threshold: float, rng: np.random.Generator) -> int:
        """Mutual-best-fitting merging until no adjacent pair costs less than ``threshold``."""
        merges = 0
        while True:
            merged = False
            ids = [i for i, alive in enumerate(self.alive) if alive]
            for r in rng.permutation(len(ids)).tolist():
                a = ids[r]
                if not self.alive[a]:
                    continue
                while True:
                    b, c_ab = self.best(a)
                    if b is None or not c_ab < threshold:
                        break
                    c, _ = self.best(b)
                    if c == a:
                        self.merge(a, b)
                        merged = True
                        merges += 1
                        break
                    a = b
            if not merged:
                return merges

    def root(self, i: int) -> int:
        parent = self.parent
        r = i
        while parent[r] != r:
            r = parent[r]
        while parent[i] != r:
            parent[i], i = r, parent[i]
        return r

    def label_image(self) -> np.ndarray:
        roots = np.array([self.root(i) for i in range(len(self.parent))], dtype=np.int64)
        return _relabel_raster_order(roots[self.labels0])


def _relabel_raster_order(labels: np.ndarray) -> np.ndarray:
    uniq, first, inverse = np.unique(labels.ravel(), return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    return rank[inverse].reshape(labels.shape)


def level_from_labels(pair_or_values, label_image: np.ndarray, scale: float = 0.0) -> SegmentationLevel:
    """Build a level (parcel table included) from a label image.

    Labels are renumbered in raster order of each parcel's first pixel.
    """
    values = pair_or_values.stacked.data if isinstance(pair_or_values, RasterPair) else np.asarray(pair_or_values)
    labels = _relabel_raster_order(np.asarray(label_image, dtype=np.int64))
    if labels.shape != values.shape[1:]:
        raise SegmentationError(f"label image {labels.shape} does not match raster {values.shape[1:]}")
    h, w = labels.shape
    flat = labels.ravel()
    n = int(flat.max()) + 1
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(n + 1))
    rows, cols = np.divmod(order, w)
    coords = np.stack([rows, cols], axis=1)
    vals = values.reshape(values.shape[0], -1)

    perim = np.bincount(flat, minlength=n) * 4
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        same = a == b
        perim -= 2 * np.bincount(a[same], minlength=n)

    parcels = []
    for i in range(n):
        px = coords[bounds[i]:bounds[i + 1]]
        v = vals[:, order[bounds[i]:bounds[i + 1]]]
        parcels.append(Parcel(
            id=i,
            pixels=px,
            centroid=(float(px[:, 0].mean()), float(px[:, 1].mean())),
            mean_spectrum=v.mean(axis=1),
            std_spectrum=v.std(axis=1),
            perimeter=int(perim[i]),
            bbox=(int(px[:, 0].min()), int(px[:, 0].max()), int(px[:, 1].min()), int(px[:, 1].max())),
        ))
    return SegmentationLevel(scale=float(scale), label_image=labels, parcels=parcels)


def _initial_state(pair: RasterPair, weights: HeterogeneityWeights, labels: Optional[np.ndarray] = None):
    values = pair.stacked.data
    if labels is None:
        labels = np.arange(values.shape[1] * values.shape[2], dtype=np.int64).reshape(values.shape[1:])
    return _MergeState(values, labels, weights)


def fnea_segment(pair: RasterPair, scale: float,
                 weights: HeterogeneityWeights = HeterogeneityWeights(), seed: int = 0) -> SegmentationLevel:
    """Segment the stacked image at one scale, starting from single pixels."""
    if not scale > 0:
        raise SegmentationError(f"scale must be positive, got {scale}")
    state = _initial_state(pair, weights)
    state.run(scale * scale, np.random.default_rng(seed))
    return level_from_labels(pair, state.label_image(), scale)


def build_hierarchy(pair: RasterPair, scales: Sequence[float],
                    weights: HeterogeneityWeights = HeterogeneityWeights(), seed: int = 0,
                    initial_labels: Optional[np.ndarray] = None) -> SegmentationHierarchy:
    """Nested segmentations at ascending ``scales``.

    Each level continues merging from the previous one. ``initial_labels``
    replaces the single-pixel start (used to resume from a dumped finest level).
    """
    scales = [float(s) for s in scales]
    if not scales:
        raise SegmentationError("at least one scale is required")
    if any(s <= 0 for s in scales):
        raise SegmentationError(f"scales must be positive, got {scales}")
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise SegmentationError(f"scales must be strictly ascending, got {scales}")
    rng = np.random.default_rng(seed)
    state = _initial_state(pair, weights, initial_labels)
    levels = []
    for s in scales:
        state.run(s * s, rng)
        levels.append(level_from_labels(pair, state.label_image(), s))
    return SegmentationHierarchy(levels, _father_maps(levels))


def hierarchy_from_label_images(pair: RasterPair, label_images: Sequence[np.ndarray],
                                scales: Sequence[float]) -> SegmentationHierarchy:
    levels = [level_from_labels(pair, lab, s) for lab, s in zip(label_images, scales)]
    return SegmentationHierarchy(levels, _father_maps(levels))


def _father_maps(levels: List[SegmentationLevel]) -> Dict[int, np.ndarray]:
    finest = levels[0]
    # one representative pixel per finest parcel
    rep = np.array([p.pixels[0] for p in finest.parcels])
    maps = {}
    for k, lvl in enumerate(levels[1:], start=1):
        fathers = lvl.label_image[rep[:, 0], rep[:, 1]]
        # nesting check: every pixel of a finest parcel must carry its father's label
        if not np.array_equal(fathers[finest.label_image], lvl.label_image):
            raise SegmentationError(f"level {k} is not nested in the finest level")
        maps[k] = fathers
    return maps


def parcel_table_rows(level: SegmentationLevel):
    """Rows (id, area, centroid_row, centroid_col, mean_band0, ...) for CSV dumps."""
    for p in level.parcels:
        yield [p.id, p.area, p.centroid[0], p.centroid[1], *p.mean_spectrum.tolist()]
