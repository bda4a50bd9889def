"""Child-to-father fusion of multiscale channel outputs onto the finest scale."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import scipy.sparse as sp

from .raster_io import ChangeMap
from .segmentation import SegmentationHierarchy, SegmentationLevel


class FusionError(ValueError):
    pass


def fusion_matrix(hierarchy: SegmentationHierarchy, level: int, beta: float = 0.5) -> sp.csr_matrix:
    """Sparse N_finest x N_level matrix with one nonzero per row.

    Row ``i`` holds, at its father's column ``j``,
    ``area(i) / area(j) * exp(-beta * ||mean(i) - mean(j)||)``, where the
    means are the parcels' mean spectra of the stacked raster.
    """
    if not beta > 0:
        raise FusionError(f"beta must be positive, got {beta}")
    if level not in hierarchy.father_maps:
        raise FusionError(f"no father mapping for level {level}")
    fathers = np.asarray(hierarchy.father_maps[level], dtype=np.int64)
    finest = hierarchy.finest
    coarse = hierarchy.levels[level]
    if len(fathers) != finest.n_parcels or fathers.min() < 0 or fathers.max() >= coarse.n_parcels:
        raise FusionError(f"father mapping for level {level} is incomplete or out of range")
    ratio = finest.areas / coarse.areas[fathers]
    sim = np.linalg.norm(finest.mean_spectra - coarse.mean_spectra[fathers], axis=1)
    data = ratio * np.exp(-beta * sim)
    rows = np.arange(finest.n_parcels)
    return sp.csr_matrix((data, (rows, fathers)), shape=(finest.n_parcels, coarse.n_parcels))


def fuse_outputs(outputs: Sequence[np.ndarray], fusion_mats: Sequence[sp.spmatrix]) -> np.ndarray:
    """E = O_1 + sum_l T_l O_l, with ``fusion_mats[k]`` paired to ``outputs[k + 1]``."""
    if not outputs:
        raise FusionError("at least one channel output is required")
    if len(fusion_mats) != len(outputs) - 1:
        raise FusionError(f"{len(outputs)} outputs need {len(outputs) - 1} fusion matrices, got {len(fusion_mats)}")
    e = np.array(outputs[0], dtype=np.float64, copy=True)
    for t, o in zip(fusion_mats, outputs[1:]):
        if t.shape[0] != e.shape[0] or t.shape[1] != o.shape[0] or o.shape[1] != e.shape[1]:
            raise FusionError(f"shape mismatch: T {t.shape}, O {o.shape}, E {e.shape}")
        e += t @ o
    return e


def assign_labels(fused: np.ndarray) -> np.ndarray:
    """Per-row argmax over (unchanged, changed); ties go to changed."""
    fused = np.asarray(fused)
    if fused.ndim != 2 or fused.shape[1] != 2:
        raise FusionError(f"fused output must be N x 2, got {fused.shape}")
    return (fused[:, 1] >= fused[:, 0]).astype(np.uint8)


def render_map(node_labels: np.ndarray, finest: SegmentationLevel) -> ChangeMap:
    node_labels = np.asarray(node_labels, dtype=np.uint8)
    if node_labels.shape != (finest.n_parcels,):
        raise FusionError(f"{node_labels.shape[0] if node_labels.ndim else 0} labels for {finest.n_parcels} parcels")
    return ChangeMap(node_labels[finest.label_image], node_labels=node_labels)


def write_fusion_csv(matrix: sp.spmatrix, path: Union[str, Path]) -> None:
    coo = sp.csr_matrix(matrix).tocoo()
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["i", "father", "weight"])
        for i, j, v in sorted(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist())):
            out.writerow([i, j, repr(v)])
