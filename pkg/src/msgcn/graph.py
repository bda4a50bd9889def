"""Parcel graphs: feature-weighted region adjacency and GCN propagation matrix.

Sparse symmetric matrices are plain ``scipy.sparse.csr_matrix`` objects.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import scipy.sparse as sp

from .segmentation import SegmentationLevel


class GraphError(ValueError):
    pass


@dataclass(eq=False)
class ParcelGraph:
    level_index: int
    features: np.ndarray
    adjacency: sp.csr_matrix
    propagation: sp.csr_matrix

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]


def adjacency_matrix(level: SegmentationLevel, features: np.ndarray, gamma: float = 0.2) -> sp.csr_matrix:
    """Edge weights exp(-d) * exp(-gamma * ||F_i - F_j||) between neighbouring parcels.

    ``d`` is the centroid distance divided by the image diagonal. The
    diagonal is zero.
    """
    features = np.asarray(features, dtype=np.float64)
    n = level.n_parcels
    if features.ndim != 2 or features.shape[0] != n:
        raise GraphError(f"dimension mismatch: {features.shape[0] if features.ndim else 0} feature rows for {n} parcels")
    if not gamma > 0:
        raise GraphError(f"gamma must be positive, got {gamma}")
    edges = level.edges()
    if len(edges) == 0:
        return sp.csr_matrix((n, n))
    i, j = edges[:, 0], edges[:, 1]
    h, w = level.shape
    diag = math.hypot(h, w)
    cen = level.centroids
    d = np.linalg.norm(cen[i] - cen[j], axis=1) / diag
    df = np.linalg.norm(features[i] - features[j], axis=1)
    wts = np.exp(-d) * np.exp(-gamma * df)
    a = sp.coo_matrix((np.concatenate([wts, wts]), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n))
    return a.tocsr()


def renormalize(adjacency: sp.spmatrix) -> sp.csr_matrix:
    """D~^-1/2 (A + I) D~^-1/2 with D~ the row sums of A + I."""
    a = sp.csr_matrix(adjacency, dtype=np.float64)
    n = a.shape[0]
    a_tilde = a + sp.identity(n, format="csr")
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    d_inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
    p = (d_inv_sqrt @ a_tilde @ d_inv_sqrt).tocsr()
    p.sort_indices()
    return p


def build_graph(level: SegmentationLevel, features: np.ndarray, gamma: float = 0.2, level_index: int = 0) -> ParcelGraph:
    a = adjacency_matrix(level, features, gamma)
    return ParcelGraph(level_index, np.asarray(features, dtype=np.float64), a, renormalize(a))


def write_edge_list(matrix: sp.spmatrix, path: Union[str, Path]) -> None:
    """Dump the upper triangle as CSV rows (i, j, weight)."""
    coo = sp.triu(matrix, k=1).tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["i", "j", "weight"])
        for k in order:
            out.writerow([int(coo.row[k]), int(coo.col[k]), repr(float(coo.data[k]))])
