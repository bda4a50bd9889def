"""Multiscale graph convolutional network with hand-written backpropagation.

One channel per segmentation scale. Each channel stacks graph convolutions
``act(P @ H @ W)`` (ReLU on hidden layers, row softmax on the output); the
channel outputs are fused onto the finest scale and trained jointly against a
cross-entropy loss on the labelled finest-scale nodes.

Weights are indexed ``model.weights[channel][layer]``; channel 0 is the
finest scale.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .fusion import fuse_outputs
from .graph import ParcelGraph
from .raster_io import ChangeMap, read_tensor, write_tensor
from .segmentation import SegmentationLevel

logger = logging.getLogger(__name__)

LOSS_FLOOR = 1e-12


class GcnError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class GcnModel:
    weights: List[List[np.ndarray]]
    dropout: float = 0.5
    weight_decay: float = 5e-4
    learning_rate: float = 0.1
    seed: int = 0
    average_loss: bool = True

    def __post_init__(self):
        if not self.weights or not self.weights[0]:
            raise GcnError("model needs at least one channel with one layer")
        dims = self.dims
        for ch in self.weights:
            if [w.shape[0] for w in ch] + [ch[-1].shape[1]] != dims:
                raise GcnError("all channels must share layer dimensions")
            for a, b in zip(ch, ch[1:]):
                if a.shape[1] != b.shape[0]:
                    raise GcnError(f"layer dims do not chain: {a.shape} then {b.shape}")
        if not 0.0 <= self.dropout < 1.0:
            raise GcnError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def initialize(cls, dims: Sequence[int], n_channels: int, seed: int = 0, **hyper) -> "GcnModel":
        """Glorot-uniform weights for ``n_channels`` stacks of layers ``dims[0] -> ... -> dims[-1]``."""
        dims = [int(d) for d in dims]
        if len(dims) < 2:
            raise GcnError(f"need at least input and output dims, got {dims}")
        rng = np.random.default_rng(seed)
        weights = []
        for _ in range(n_channels):
            layers = []
            for fan_in, fan_out in zip(dims, dims[1:]):
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                layers.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            weights.append(layers)
        return cls(weights, seed=seed, **hyper)

    @property
    def n_channels(self) -> int:
        return len(self.weights)

    @property
    def depth(self) -> int:
        return len(self.weights[0])

    @property
    def dims(self) -> List[int]:
        ch = self.weights[0]
        return [w.shape[0] for w in ch] + [ch[-1].shape[1]]

    def copy(self) -> "GcnModel":
        return replace(self, weights=[[w.copy() for w in ch] for ch in self.weights])


@dataclass(frozen=True)
class LabelSet:
    indices: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        lab = np.asarray(self.labels, dtype=np.int64).ravel()
        if idx.shape != lab.shape:
            raise GcnError(f"{len(idx)} indices but {len(lab)} labels")
        if len(np.unique(idx)) != len(idx):
            raise GcnError("label indices must be unique")
        if len(idx) and (idx.min() < 0 or not np.isin(lab, (0, 1)).all()):
            raise GcnError("label indices must be non-negative and labels 0 or 1")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "labels", lab)

    def __len__(self):
        return len(self.indices)

    def check(self, n_nodes: int) -> None:
        if len(self) and self.indices.max() >= n_nodes:
            raise GcnError(f"label index {self.indices.max()} out of range for {n_nodes} nodes")
        if len(self) and len(np.unique(self.labels)) < 2:
            warnings.warn("label set contains a single class", stacklevel=3)


# -- forward -----------------------------------------------------------------


def _relu(x):
    return np.maximum(x, 0.0)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def layer_forward(P, X: np.ndarray, W: np.ndarray, activation: str = "relu") -> np.ndarray:
    """One graph convolution ``act(P X W)``; ``activation`` is 'relu' or 'none'."""
    if P.shape[0] != P.shape[1] or P.shape[1] != X.shape[0] or X.shape[1] != W.shape[0]:
        raise GcnError(f"dimension mismatch: P {P.shape}, X {X.shape}, W {W.shape}")
    z = P @ (X @ W)
    if activation == "relu":
        return _relu(z)
    if activation == "none":
        return np.asarray(z)
    raise GcnError(f"unknown activation {activation!r}")


def _forward_cached(P, X, weights, masks=None):
    h = X
    cache = []
    for k, w in enumerate(weights):
        ph = np.asarray(P @ h)
        z = ph @ w
        cache.append((ph, z))
        if k < len(weights) - 1:
            h = _relu(z)
            if masks is not None:
                h = h * masks[k]
    return softmax(z), cache


def channel_forward(graph: ParcelGraph, weights: Sequence[np.ndarray], train: bool = False,
                    dropout: float = 0.5, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Row-softmax output of one channel; in train mode hidden activations get inverted dropout."""
    if len(weights) < 1 or graph.features.shape[1] != weights[0].shape[0]:
        raise GcnError(f"dimension mismatch: features {graph.features.shape}, first layer {weights[0].shape}")
    masks = None
    if train and dropout > 0:
        if rng is None:
            raise GcnError("train mode needs an rng for dropout")
        masks = _dropout_masks(rng, [(graph.n_nodes, w.shape[1]) for w in weights[:-1]], dropout)
    out, _ = _forward_cached(graph.propagation, graph.features, weights, masks)
    return out


def _dropout_masks(rng, shapes, rate):
    keep = 1.0 - rate
    return [(rng.random(s) < keep) / keep for s in shapes]


def sample_masks(model: GcnModel, graphs: Sequence[ParcelGraph], rng: np.random.Generator):
    """Inverted-dropout masks for every hidden layer of every channel."""
    if model.dropout <= 0:
        return None
    return [_dropout_masks(rng, [(g.n_nodes, w.shape[1]) for w in ch[:-1]], model.dropout)
            for g, ch in zip(graphs, model.weights)]


def forward(model: GcnModel, graphs: Sequence[ParcelGraph], fusion_mats: Sequence[sp.spmatrix], masks=None):
    """Fused output E and the channel outputs O_l."""
    _check_shapes(model, graphs, fusion_mats)
    outs = []
    for l, (g, ch) in enumerate(zip(graphs, model.weights)):
        o, _ = _forward_cached(g.propagation, g.features, ch, None if masks is None else masks[l])
        outs.append(o)
    return fuse_outputs(outs, fusion_mats), outs


def _check_shapes(model, graphs, fusion_mats):
    if len(graphs) != model.n_channels:
        raise GcnError(f"{len(graphs)} graphs for a {model.n_channels}-channel model")
    if len(fusion_mats) != len(graphs) - 1:
        raise GcnError(f"{len(graphs)} graphs need {len(graphs) - 1} fusion matrices")
    for g in graphs:
        if g.features.shape[1] != model.dims[0]:
            raise GcnError(f"graph has {g.features.shape[1]} features, model expects {model.dims[0]}")
    n1 = graphs[0].n_nodes
    for t, g in zip(fusion_mats, graphs[1:]):
        if t.shape != (n1, g.n_nodes):
            raise GcnError(f"fusion matrix {t.shape} does not map {g.n_nodes} nodes onto {n1}")


# -- loss and gradients ------------------------------------------------------


def fused_loss(E: np.ndarray, labels: LabelSet) -> float:
    """Cross-entropy ``-sum ln E[t, y_t]`` over the labelled rows."""
    if len(labels) == 0:
        return 0.0
    picked = np.asarray(E)[labels.indices, labels.labels]
    # exact zeros come from softmax underflow and are clamped; negatives are invalid input
    if np.any(picked < 0) or not np.all(np.isfinite(picked)):
        raise GcnError("fused output must be non-negative and finite at labelled entries")
    return float(-np.log(np.maximum(picked, LOSS_FLOOR)).sum())


def weight_decay_term(model: GcnModel) -> float:
    return 0.5 * model.weight_decay * sum(float(np.sum(w * w)) for ch in model.weights for w in ch)


def objective(model: GcnModel, graphs, fusion_mats, labels: LabelSet, masks=None, loss_scale: float = 1.0) -> float:
    """``loss_scale`` times the fused cross-entropy, plus L2 weight decay."""
    E, _ = forward(model, graphs, fusion_mats, masks)
    return loss_scale * fused_loss(E, labels) + weight_decay_term(model)


def training_loss_scale(model: GcnModel, labels: LabelSet) -> float:
    """1/|labels| when the model averages its loss over labelled nodes, else 1."""
    return 1.0 / len(labels) if model.average_loss and len(labels) else 1.0


def backward(model: GcnModel, graphs: Sequence[ParcelGraph], fusion_mats: Sequence[sp.spmatrix],
             labels: LabelSet, masks=None, loss_scale: float = 1.0) -> Tuple[float, List[List[np.ndarray]]]:
    """Value and exact gradient of ``objective`` for every weight matrix.

    ``masks`` must be the dropout masks of the paired forward pass (None for
    no dropout).
    """
    _check_shapes(model, graphs, fusion_mats)
    labels.check(graphs[0].n_nodes)
    outs, caches = [], []
    for l, (g, ch) in enumerate(zip(graphs, model.weights)):
        o, cache = _forward_cached(g.propagation, g.features, ch, None if masks is None else masks[l])
        outs.append(o)
        caches.append(cache)
    E = fuse_outputs(outs, fusion_mats)
    loss = loss_scale * fused_loss(E, labels) + weight_decay_term(model)

    dE = np.zeros_like(E)
    if len(labels):
        picked = E[labels.indices, labels.labels]
        dE[labels.indices, labels.labels] = np.where(picked > LOSS_FLOOR, -loss_scale / np.maximum(picked, LOSS_FLOOR), 0.0)

    grads = []
    for l, (g, ch) in enumerate(zip(graphs, model.weights)):
        dO = dE if l == 0 else np.asarray(fusion_mats[l - 1].T @ dE)
        o = outs[l]
        dz = o * (dO - np.sum(dO * o, axis=1, keepdims=True))
        P = g.propagation
        ch_grads = [None] * len(ch)
        for k in range(len(ch) - 1, -1, -1):
            ph, z = caches[l][k]
            ch_grads[k] = ph.T @ dz + model.weight_decay * ch[k]
            if k == 0:
                break
            dh = np.asarray(P.T @ (dz @ ch[k].T))
            if masks is not None:
                dh = dh * masks[l][k - 1]
            _, z_prev = caches[l][k - 1]
            dz = dh * (z_prev > 0)
        grads.append(ch_grads)
    return loss, grads


# -- training ----------------------------------------------------------------


def train(model: GcnModel, graphs: Sequence[ParcelGraph], fusion_mats: Sequence[sp.spmatrix],
          labels: LabelSet, epochs: int = 400) -> Tuple[GcnModel, List[float]]:
    """Full-batch gradient descent; returns the trained copy and per-epoch eval losses.

    Each step follows the gradient of ``objective`` with the cross-entropy
    averaged over labelled nodes (``model.average_loss``) or summed. The
    history holds the eval-mode (no dropout) summed fused loss after each update.
    """
    if epochs < 1:
        raise GcnError(f"epochs must be >= 1, got {epochs}")
    model = model.copy()
    rng = np.random.default_rng(model.seed)
    lr = model.learning_rate
    scale = training_loss_scale(model, labels)
    history = []
    for epoch in range(epochs):
        masks = sample_masks(model, graphs, rng)
        _, grads = backward(model, graphs, fusion_mats, labels, masks, scale)
        for ch, gch in zip(model.weights, grads):
            for w, gw in zip(ch, gch):
                w -= lr * gw
        E, _ = forward(model, graphs, fusion_mats)
        loss = fused_loss(E, labels)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(w)) for ch in model.weights for w in ch):
            raise DivergenceError(f"training diverged at epoch {epoch + 1}")
        history.append(loss)
        if (epoch + 1) % 100 == 0:
            logger.debug("epoch %d loss %.6f", epoch + 1, loss)
    return model, history


def sample_labels(finest: SegmentationLevel, reference: ChangeMap, ratio: float = 0.05, seed: int = 0) -> LabelSet:
    """Pick ceil(ratio * N) finest parcels uniformly and label them by majority vote.

    A parcel is labelled changed when at least half its reference pixels are changed.
    """
    if not 0 < ratio <= 1:
        raise GcnError(f"label ratio must be in (0, 1], got {ratio}")
    if reference.shape != finest.shape:
        raise GcnError(f"reference {reference.shape} does not match segmentation {finest.shape}")
    n = finest.n_parcels
    k = min(n, math.ceil(round(ratio * n, 9)))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return LabelSet(idx, node_truth(finest, reference)[idx])


def node_truth(finest: SegmentationLevel, reference: ChangeMap) -> np.ndarray:
    """Majority reference label of every finest parcel (ties to changed)."""
    flat = finest.label_image.ravel()
    n = finest.n_parcels
    changed = np.bincount(flat, reference.labels.ravel().astype(np.float64), minlength=n)
    return (2 * changed >= np.bincount(flat, minlength=n)).astype(np.int64)


# -- checkpoints -------------------------------------------------------------


def save_model(model: GcnModel, directory: Union[str, Path]) -> None:
    """Write every weight matrix as a raw-f32 tensor plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    for c, ch in enumerate(model.weights):
        for k, w in enumerate(ch):
            name = f"w_c{c}_l{k}.f32"
            write_tensor(directory / name, w)
            layers.append({"channel": c, "layer": k, "file": name, "shape": list(w.shape)})
    manifest = {
        "dims": model.dims,
        "channels": model.n_channels,
        "dropout": model.dropout,
        "weight_decay": model.weight_decay,
        "learning_rate": model.learning_rate,
        "seed": model.seed,
        "average_loss": model.average_loss,
        "layers": layers,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_model(directory: Union[str, Path]) -> GcnModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    weights = [[None] * (len(manifest["dims"]) - 1) for _ in range(manifest["channels"])]
    for entry in manifest["layers"]:
        w = read_tensor(directory / entry["file"])[0].astype(np.float64)
        if list(w.shape) != entry["shape"]:
            raise GcnError(f"checkpoint tensor {entry['file']} has shape {w.shape}, manifest says {entry['shape']}")
        weights[entry["channel"]][entry["layer"]] = w
    return GcnModel(weights, dropout=manifest["dropout"], weight_decay=manifest["weight_decay"],
                    learning_rate=manifest["learning_rate"], seed=manifest["seed"],
                    average_loss=manifest.get("average_loss", True))
