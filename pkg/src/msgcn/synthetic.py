"""Synthetic co-registered image pairs with known change polygons."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from skimage.draw import polygon2mask

from .raster_io import ChangeMap, Raster

Polygon = Sequence[Tuple[float, float]]


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    """Blocky textured background plus polygons whose mean shifts in t2.

    Polygon vertices are (row, col) pixel coordinates; a pixel is inside when
    its centre is inside the polygon (vertices on the boundary count).
    """

    height: int = 64
    width: int = 64
    bands: int = 1
    background_mean: float = 0.3
    texture_amplitude: float = 0.1
    texture_block: int = 8
    polygons: List[Polygon] = field(default_factory=list)
    shift: float = 0.5
    noise_sigma: float = 0.05


def default_polygons(height: int = 64, width: int = 64) -> List[Polygon]:
    """Three change regions of mixed sizes scaled to the image."""
    sy, sx = height / 64.0, width / 64.0

    def sc(pts):
        return [(r * sy, c * sx) for r, c in pts]

    return [
        sc([(6, 6), (6, 27), (25, 27), (25, 6)]),            # large rectangle
        sc([(34, 40), (56, 40), (56, 58)]),                  # medium triangle
        sc([(44, 10), (44, 19), (53, 19), (53, 10)]),        # small square
    ]


def polygon_mask(shape: Tuple[int, int], polygon: Polygon) -> np.ndarray:
    h, w = shape
    pts = np.asarray(polygon, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise SceneError("a polygon needs at least three (row, col) vertices")
    if pts[:, 0].min() < 0 or pts[:, 1].min() < 0 or pts[:, 0].max() > h - 1 or pts[:, 1].max() > w - 1:
        raise SceneError(f"polygon {polygon} lies outside the {h}x{w} image")
    return polygon2mask((h, w), pts)


def generate_synthetic_pair(spec: SceneSpec, seed: int = 0) -> Tuple[Raster, Raster, ChangeMap]:
    """Return (t1, t2, reference).

    t2 equals t1 except inside the polygons, where every band is raised by
    ``shift``; independent Gaussian noise is then added to both images.
    """
    if spec.height < 1 or spec.width < 1 or spec.bands < 1 or spec.texture_block < 1:
        raise SceneError("scene dimensions must be positive")
    rng = np.random.default_rng(seed)
    shape = (spec.height, spec.width)
    changed = np.zeros(shape, dtype=bool)
    for poly in spec.polygons:
        changed |= polygon_mask(shape, poly)

    nby = -(-spec.height // spec.texture_block)
    nbx = -(-spec.width // spec.texture_block)
    block = np.ones((spec.texture_block, spec.texture_block))
    clean = np.empty((spec.bands, *shape))
    for b in range(spec.bands):
        means = rng.uniform(spec.background_mean - spec.texture_amplitude,
                            spec.background_mean + spec.texture_amplitude, size=(nby, nbx))
        # 8-bit grey levels keep t2 - t1 exact inside the polygons
        means = np.round(means * 256.0) / 256.0
        clean[b] = np.kron(means, block)[: spec.height, : spec.width]
    t1 = clean.copy()
    t2 = clean.copy()
    t2[:, changed] += spec.shift
    if spec.noise_sigma > 0:
        t1 += rng.normal(0.0, spec.noise_sigma, size=t1.shape)
        t2 += rng.normal(0.0, spec.noise_sigma, size=t2.shape)
    return Raster(t1), Raster(t2), ChangeMap(changed.astype(np.uint8))
