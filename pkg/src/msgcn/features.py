"""Per-pixel feature sources and object-wise feature pooling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .raster_io import FeatureMaps, RasterError, RasterPair, load_feature_maps
from .segmentation import SegmentationLevel

CHANNELS_PER_BAND = 5


@dataclass(frozen=True)
class FilterBankConfig:
    blur_sigmas: Sequence[float] = (1.0, 2.0)
    std_window: int = 3


def _minmax(plane: np.ndarray) -> np.ndarray:
    lo, hi = plane.min(), plane.max()
    if hi - lo <= 0:
        return np.zeros_like(plane)
    return (plane - lo) / (hi - lo)


def _local_std(plane: np.ndarray, size: int) -> np.ndarray:
    mean = ndimage.uniform_filter(plane, size, mode="reflect")
    sq = ndimage.uniform_filter(plane * plane, size, mode="reflect")
    return np.sqrt(np.clip(sq - mean * mean, 0.0, None))


def filter_bank_features(pair: RasterPair, config: FilterBankConfig = FilterBankConfig()) -> FeatureMaps:
    """Hand-crafted feature maps of the stacked raster.

    For each stacked band, in order: the band itself, Gaussian blurs at each
    ``blur_sigmas``, central-difference gradient magnitude and local standard
    deviation over a ``std_window`` square. Every channel is min-max scaled to
    [0, 1]; constant channels become zero. Values are rounded to float32 so
    a dumped feature file reproduces the run exactly.
    """
    planes = []
    for band in pair.stacked.data:
        planes.append(band)
        for s in config.blur_sigmas:
            planes.append(ndimage.gaussian_filter(band, s, mode="reflect"))
        gy, gx = np.gradient(band) if min(band.shape) > 1 else (np.zeros_like(band),) * 2
        planes.append(np.hypot(gx, gy))
        local = _local_std(band, config.std_window)
        # uniform_filter leaves round-off noise on flat areas
        local[local < 1e-7] = 0.0
        planes.append(local)
    stacked = np.stack([_minmax(p) for p in planes]).astype(np.float32)
    return FeatureMaps(stacked.astype(np.float64))


def pool_object_features(maps: FeatureMaps, level: SegmentationLevel) -> np.ndarray:
    """Mean of every feature channel over each parcel's pixels; shape (N, C)."""
    if maps.shape != level.shape:
        raise RasterError(f"dimension mismatch: feature maps {maps.shape}, segmentation {level.shape}")
    flat = level.label_image.ravel()
    n = level.n_parcels
    area = np.bincount(flat, minlength=n).astype(np.float64)
    sums = np.stack([np.bincount(flat, ch.ravel(), minlength=n) for ch in maps.data], axis=1)
    return sums / area[:, None]


@dataclass(frozen=True)
class FeatureSource:
    """Where per-pixel features come from: an external tensor file or the filter bank."""

    kind: str = "filter-bank"
    path: Optional[Union[str, Path]] = None
    filter_bank: FilterBankConfig = FilterBankConfig()

    def __post_init__(self):
        if self.kind not in ("filter-bank", "external-file"):
            raise ValueError(f"unknown feature source kind {self.kind!r}")
        if self.kind == "external-file" and self.path is None:
            raise ValueError("external-file feature source needs a path")

    def maps(self, pair: RasterPair) -> FeatureMaps:
        if self.kind == "external-file":
            return load_feature_maps(self.path, (0, *pair.shape))
        return filter_bank_features(pair, self.filter_bank)

    def channels(self, pair: RasterPair) -> int:
        if self.kind == "external-file":
            return self.maps(pair).channels
        return pair.stacked.bands * (3 + len(self.filter_bank.blur_sigmas))
