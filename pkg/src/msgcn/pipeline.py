"""End-to-end change detection: config, staged pipeline and ablations.

Config files are INI style. Only the two image paths are required::

    [images]
    t1 = before.pgm
    t2 = after.pgm
    reference = truth.pgm      ; optional, enables metrics
    features = feats.f32       ; optional external C x H x W tensor

    [segmentation]
    scales = 8, 15, 20

    [training]
    layer_dims = C, 32, 8, 2

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import configparser
import csv
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import gcn
from .evaluation import MetricReport, confusion, metrics
from .features import FeatureSource, pool_object_features
from .fusion import assign_labels, fuse_outputs, fusion_matrix, render_map, write_fusion_csv
from .graph import ParcelGraph, build_graph, write_edge_list
from .raster_io import (ChangeMap, FeatureMaps, RasterPair, load_change_map, load_raster,
                        read_label_image, save_feature_maps, stack_pair, write_change_map,
                        write_label_image)
from .segmentation import (HeterogeneityWeights, SegmentationHierarchy, build_hierarchy,
                           hierarchy_from_label_images, parcel_table_rows)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# per-stage seed offsets from the global seed
SEGMENTATION_SEED = 1
LABEL_SEED = 2
MODEL_SEED = 3

DEPTH_DIMS = {
    2: (32,),
    3: (32, 8),
    4: (32, 16, 4),
    5: (32, 16, 8, 4),
}


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    t1: Optional[Path] = None
    t2: Optional[Path] = None
    reference: Optional[Path] = None
    features: Optional[Path] = None
    label_images: Tuple[Path, ...] = ()
    scales: Tuple[float, ...] = (8.0, 15.0, 20.0)
    color_weight: float = 0.9
    compactness: float = 0.5
    value_range: float = 255.0
    gamma: float = 0.2
    beta: float = 0.5
    label_ratio: float = 0.05
    hidden_dims: Tuple[int, ...] = (32, 8)
    epochs: int = 400
    dropout: float = 0.5
    weight_decay: float = 5e-4
    learning_rate: float = 0.1
    average_loss: bool = True
    seed: int = 0

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        if not scales or any(s <= 0 for s in scales):
            raise ConfigError(f"scales must be positive and non-empty, got {scales}")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ConfigError(f"scales must be strictly ascending, got {list(scales)}")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if any(d < 1 for d in self.hidden_dims):
            raise ConfigError(f"hidden layer widths must be positive, got {self.hidden_dims}")
        if not 0 < self.label_ratio <= 1:
            raise ConfigError(f"label_ratio must be in (0, 1], got {self.label_ratio}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.gamma <= 0 or self.beta <= 0:
            raise ConfigError("gamma and beta must be positive")
        if self.label_images and len(self.label_images) != len(scales):
            raise ConfigError(f"{len(self.label_images)} label images for {len(scales)} scales")

    @property
    def n_scales(self) -> int:
        return len(self.scales)

    def layer_dims(self, n_features: int) -> List[int]:
        return [n_features, *self.hidden_dims, 2]

    @property
    def heterogeneity(self) -> HeterogeneityWeights:
        return HeterogeneityWeights(self.color_weight, self.compactness, None, self.value_range)

    @classmethod
    def from_file(cls, path: PathLike, **overrides) -> "PipelineConfig":
        path = Path(path)
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = path.parent
        values: Dict[str, object] = {}

        def p(v):
            q = Path(v).expanduser()
            return q if q.is_absolute() else base / q

        known = {f.name for f in fields(cls)}
        for section in parser.sections():
            for key, raw in parser.items(section):
                key = key.replace("-", "_")
                if key == "layer_dims":
                    dims = _split(raw)
                    if len(dims) < 2 or dims[-1] != "2":
                        raise ConfigError(f"layer_dims must end in 2 output classes, got {raw!r}")
                    if dims[0].upper() not in ("C", "AUTO") and not dims[0].isdigit():
                        raise ConfigError(f"layer_dims must start with the feature count or 'C', got {raw!r}")
                    values["hidden_dims"] = tuple(int(d) for d in dims[1:-1])
                    continue
                if key not in known:
                    raise ConfigError(f"unknown config key {key!r} in [{section}]")
                try:
                    values[key] = _coerce(key, raw, p)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        values.update({k: v for k, v in overrides.items() if v is not None})
        if "t1" not in values or "t2" not in values:
            raise ConfigError("config must name both images (t1, t2)")
        return cls(**values)

    def to_ini(self) -> str:
        lines = ["[images]"]
        for key in ("t1", "t2", "reference", "features"):
            v = getattr(self, key)
            if v is not None:
                lines.append(f"{key} = {v}")
        lines += ["", "[segmentation]", f"scales = {', '.join(repr(s) for s in self.scales)}",
                  f"color_weight = {self.color_weight!r}", f"compactness = {self.compactness!r}",
                  f"value_range = {self.value_range!r}"]
        if self.label_images:
            lines.append(f"label_images = {', '.join(str(x) for x in self.label_images)}")
        lines += ["", "[graph]", f"gamma = {self.gamma!r}", "", "[fusion]", f"beta = {self.beta!r}",
                  "", "[training]", f"label_ratio = {self.label_ratio!r}",
                  f"layer_dims = C, {', '.join(str(d) for d in self.hidden_dims)}, 2",
                  f"epochs = {self.epochs}", f"dropout = {self.dropout!r}",
                  f"weight_decay = {self.weight_decay!r}", f"learning_rate = {self.learning_rate!r}",
                  f"average_loss = {str(self.average_loss).lower()}",
                  "", "[run]", f"seed = {self.seed}", ""]
        return "\n".join(lines)


def _split(raw: str) -> List[str]:
    return [t.strip() for t in raw.replace(";", ",").split(",") if t.strip()]


def _coerce(key, raw, to_path):
    if key in ("t1", "t2", "reference", "features"):
        return to_path(raw.strip()) if raw.strip() else None
    if key == "label_images":
        return tuple(to_path(t) for t in _split(raw))
    if key == "scales":
        return tuple(float(t) for t in _split(raw))
    if key == "hidden_dims":
        return tuple(int(t) for t in _split(raw))
    if key in ("epochs", "seed"):
        return int(raw)
    if key == "average_loss":
        v = raw.strip().lower()
        if v not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(raw)
        return v in ("1", "true", "yes", "on")
    return float(raw)


@dataclass(eq=False)
class Prepared:
    """Everything upstream of training: shared by ablation variants."""

    pair: RasterPair
    maps: FeatureMaps
    hierarchy: SegmentationHierarchy
    node_features: List[np.ndarray]
    graphs: List[ParcelGraph]
    reference: Optional[ChangeMap] = None
    labels: Optional[gcn.LabelSet] = None


@dataclass(eq=False)
class PipelineResult:
    change_map: ChangeMap
    report: Optional[MetricReport]
    history: List[float]
    model: gcn.GcnModel
    prepared: Prepared
    fused: np.ndarray = field(repr=False, default=None)


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except PipelineError:
                raise
            except (ValueError, OSError, RuntimeError) as exc:
                raise PipelineError(name, exc) from exc
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


@_stage("load")
def _load(config: PipelineConfig):
    if config.t1 is None or config.t2 is None:
        raise ConfigError("config must name both images (t1, t2)")
    pair = stack_pair(load_raster(config.t1), load_raster(config.t2))
    reference = load_change_map(config.reference) if config.reference else None
    if reference is not None and reference.shape != pair.shape:
        raise ValueError(f"reference {reference.shape} does not match images {pair.shape}")
    return pair, reference


@_stage("features")
def _features(config: PipelineConfig, pair: RasterPair) -> FeatureMaps:
    if config.features is not None:
        return FeatureSource("external-file", config.features).maps(pair)
    return FeatureSource().maps(pair)


@_stage("segmentation")
def _segment(config: PipelineConfig, pair: RasterPair) -> SegmentationHierarchy:
    if config.label_images:
        return hierarchy_from_label_images(pair, [read_label_image(p) for p in config.label_images], config.scales)
    return build_hierarchy(pair, config.scales, config.heterogeneity, seed=config.seed + SEGMENTATION_SEED)


@_stage("graphs")
def _graphs(config, maps, hierarchy):
    feats = [pool_object_features(maps, lvl) for lvl in hierarchy.levels]
    graphs = [build_graph(lvl, f, config.gamma, k) for k, (lvl, f) in enumerate(zip(hierarchy.levels, feats))]
    return feats, graphs


def prepare(config: PipelineConfig, pair: Optional[RasterPair] = None,
            reference: Optional[ChangeMap] = None) -> Prepared:
    """Load, extract features, segment and build per-scale graphs.

    ``pair``/``reference`` bypass loading from the config paths.
    """
    if pair is None:
        pair, ref = _load(config)
        reference = reference if reference is not None else ref
    maps = _features(config, pair)
    hierarchy = _segment(config, pair)
    logger.info("parcels per scale: %s", hierarchy.counts())
    feats, graphs = _graphs(config, maps, hierarchy)
    labels = None
    if reference is not None:
        labels = _stage("labels")(gcn.sample_labels)(hierarchy.finest, reference, config.label_ratio,
                                                      config.seed + LABEL_SEED)
    return Prepared(pair, maps, hierarchy, feats, graphs, reference, labels)


def fit_predict(config: PipelineConfig, prepared: Prepared, levels: Optional[Sequence[int]] = None,
                hidden_dims: Optional[Sequence[int]] = None) -> PipelineResult:
    """Train the multiscale GCN on a subset of levels (finest always first) and render the map."""
    levels = list(range(len(prepared.hierarchy))) if levels is None else list(levels)
    if not levels or levels[0] != 0:
        raise ConfigError("the finest level must be the first channel")
    if prepared.labels is None:
        raise PipelineError("labels", ValueError("a reference map is required to sample training labels"))
    hidden = config.hidden_dims if hidden_dims is None else tuple(hidden_dims)
    graphs = [prepared.graphs[k] for k in levels]
    try:
        tmats = [fusion_matrix(prepared.hierarchy, k, config.beta) for k in levels[1:]]
    except ValueError as exc:
        raise PipelineError("fusion", exc) from exc
    dims = [prepared.maps.channels, *hidden, 2]
    model = gcn.GcnModel.initialize(dims, len(levels), seed=config.seed + MODEL_SEED, dropout=config.dropout,
                                    weight_decay=config.weight_decay, learning_rate=config.learning_rate,
                                    average_loss=config.average_loss)
    try:
        model, history = gcn.train(model, graphs, tmats, prepared.labels, config.epochs)
    except (ValueError, RuntimeError) as exc:
        raise PipelineError("training", exc) from exc
    E, _ = gcn.forward(model, graphs, tmats)
    change_map = render_map(assign_labels(E), prepared.hierarchy.finest)
    report = None
    if prepared.reference is not None:
        report = metrics(confusion(change_map, prepared.reference))
    return PipelineResult(change_map, report, history, model, prepared, E)


def run_pipeline(config: PipelineConfig, out_dir: Optional[PathLike] = None, dump_intermediates: bool = False,
                 pair: Optional[RasterPair] = None, reference: Optional[ChangeMap] = None) -> PipelineResult:
    prepared = prepare(config, pair, reference)
    result = fit_predict(config, prepared)
    if out_dir is not None:
        write_outputs(result, config, out_dir, dump_intermediates)
    return result


def write_metrics_csv(report: MetricReport, path: PathLike, label: Optional[str] = None) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow((["variant"] if label else []) + list(MetricReport.HEADER))
        out.writerow(([label] if label else []) + report.percent_row())


def write_loss_history(history: Sequence[float], path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["epoch", "eval_loss"])
        for i, v in enumerate(history, start=1):
            out.writerow([i, repr(float(v))])


def write_outputs(result: PipelineResult, config: PipelineConfig, out_dir: PathLike, dump_intermediates: bool) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_change_map(result.change_map, out / "change_map.pgm")
    write_loss_history(result.history, out / "loss_history.csv")
    if result.report is not None:
        write_metrics_csv(result.report, out / "metrics.csv")
    if not dump_intermediates:
        return
    prep = result.prepared
    inter = out / "intermediates"
    inter.mkdir(exist_ok=True)
    save_feature_maps(prep.maps, inter / "features.f32")
    for k, lvl in enumerate(prep.hierarchy.levels):
        write_label_image(lvl.label_image, inter / f"labels_level{k}.u32")
        with open(inter / f"parcels_level{k}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            bands = prep.pair.stacked.bands
            w.writerow(["id", "area", "centroid_row", "centroid_col"] + [f"mean_b{b}" for b in range(bands)])
            w.writerows(parcel_table_rows(lvl))
        write_edge_list(prep.graphs[k].adjacency, inter / f"edges_level{k}.csv")
        if k > 0:
            write_fusion_csv(fusion_matrix(prep.hierarchy, k, config.beta), inter / f"fusion_level{k}.csv")
    with open(inter / "training_labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "label"])
        w.writerows(zip(prep.labels.indices.tolist(), prep.labels.labels.tolist()))
    gcn.save_model(result.model, inter / "model")
    # dumped files are named relative to resume.ini, the inputs absolutely
    absolute = {k: Path(getattr(config, k)).resolve() for k in ("t1", "t2", "reference") if getattr(config, k)}
    resume = replace(config, features=Path("features.f32"),
                     label_images=tuple(Path(f"labels_level{k}.u32") for k in range(len(prep.hierarchy))),
                     **absolute)
    (inter / "resume.ini").write_text(resume.to_ini())


# -- ablations ---------------------------------------------------------------

SCALE_NAMES = ("fine", "medium", "coarse")


def scale_combinations(n_scales: int) -> List[Tuple[str, List[int]]]:
    """Level subsets compared in the scale ablation; always anchored at the finest level."""
    if n_scales == 1:
        return [("fine", [0])]
    if n_scales == 2:
        return [("fine", [0]), ("fine-coarse", [0, 1])]
    if n_scales == 3:
        return [("fine", [0]), ("fine-medium", [0, 1]), ("fine-coarse", [0, 2]),
                ("fine-medium-coarse", [0, 1, 2])]
    combos = [("fine", [0])] + [(f"fine-s{k}", [0, k]) for k in range(1, n_scales)]
    combos.append(("all", list(range(n_scales))))
    return combos


def run_ablation(config: PipelineConfig, mode: str, pair: Optional[RasterPair] = None,
                 reference: Optional[ChangeMap] = None) -> List[Tuple[str, MetricReport]]:
    """Metrics for each scale combination or network depth under one shared seed."""
    prepared = prepare(config, pair, reference)
    if prepared.reference is None:
        raise ConfigError("ablation needs a reference change map")
    rows = []
    if mode == "scale-combinations":
        for name, levels in scale_combinations(config.n_scales):
            rows.append((name, fit_predict(config, prepared, levels=levels).report))
    elif mode == "layer-depths":
        c = prepared.maps.channels
        for depth, hidden in DEPTH_DIMS.items():
            name = "-".join(str(d) for d in (c, *hidden, 2))
            rows.append((name, fit_predict(config, prepared, hidden_dims=hidden).report))
    else:
        raise ConfigError(f"unknown ablation mode {mode!r}")
    return rows


def write_ablation_table(rows: Sequence[Tuple[str, MetricReport]], path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["variant", *MetricReport.HEADER])
        for name, rep in rows:
            out.writerow([name, *rep.percent_row()])


def format_ablation_table(rows: Sequence[Tuple[str, MetricReport]]) -> str:
    width = max(len("variant"), *(len(n) for n, _ in rows))
    lines = ["variant".ljust(width) + "".join(h.rjust(9) for h in MetricReport.HEADER)]
    for name, rep in rows:
        lines.append(name.ljust(width) + "".join(c.rjust(9) for c in rep.percent_row()))
    return "\n".join(lines)
