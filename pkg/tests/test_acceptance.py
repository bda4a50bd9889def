"""Acceptance checks. Each test prints one PASS/FAIL line; the lines are
repeated in the pytest terminal summary (see conftest.py).

Run just this suite with ``pytest tests/test_acceptance.py -v``.
"""

import math
import subprocess
import sys
import time

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from msgcn.evaluation import Confusion, metrics
from msgcn.fusion import fuse_outputs
from msgcn.gcn import GcnModel, LabelSet, backward, channel_forward, forward, objective, train
from msgcn.graph import ParcelGraph, renormalize
from msgcn.pipeline import PipelineConfig, fit_predict, prepare
from msgcn.raster_io import stack_pair
from msgcn.segmentation import build_hierarchy
from msgcn.synthetic import SceneSpec, default_polygons, generate_synthetic_pair

from oracles import dense_channel, dense_fuse, numeric_gradient, random_instance

RESULTS = []


def report(number, ok, text):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {text}"
    RESULTS.append(line)
    print(line)
    return ok


def test_1_gradient_matches_central_differences():
    t0 = time.perf_counter()
    dims = (4, 8, 4, 2)
    graphs, tmats = random_instance(2024, n_nodes=6, n_scales=2, dims=dims)
    model = GcnModel.initialize(dims, 2, seed=1)
    labels = LabelSet([0, 2, 3, 5], [1, 0, 1, 0])
    _, grads = backward(model, graphs, tmats, labels)
    worst = 0.0
    for ch, gch in zip(model.weights, grads):
        for w, g in zip(ch, gch):
            num = numeric_gradient(lambda: objective(model, graphs, tmats, labels), w, h=1e-5)
            rel = np.abs(num - g) / np.maximum(np.maximum(np.abs(num), np.abs(g)), 1e-8)
            worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 5
    assert report(1, ok, f"max relative gradient error {worst:.2e} (< 1e-4), {elapsed:.2f}s (< 5s)")


def test_2_dense_oracle_equivalence():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 11))
        depth = int(rng.integers(2, 5))
        dims = [int(rng.integers(1, 6)) for _ in range(depth)] + [2]
        graphs, tmats = random_instance(seed, n_nodes=n, n_scales=int(rng.integers(1, 4)), dims=dims)
        weights = [[rng.normal(size=(a, b)) for a, b in zip(dims, dims[1:])] for _ in graphs]
        outs = [channel_forward(g, w) for g, w in zip(graphs, weights)]
        dense_outs = [dense_channel(g.adjacency.toarray(), g.features, w) for g, w in zip(graphs, weights)]
        for o, d in zip(outs, dense_outs):
            worst = max(worst, float(np.abs(o - d).max()))
        e = fuse_outputs(outs, tmats)
        worst = max(worst, float(np.abs(e - dense_fuse(dense_outs, [t.toarray() for t in tmats])).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 10
    assert report(2, ok, f"max deviation from dense oracle {worst:.1e} (<= 1e-10) over 100 seeds, {elapsed:.2f}s (< 10s)")


def test_3_segmentation_invariants():
    t0 = time.perf_counter()
    failures = []
    for seed in range(50):
        spec = SceneSpec(height=32, width=32, texture_block=4, texture_amplitude=0.05, noise_sigma=0.02,
                         polygons=default_polygons(32, 32))
        t1, t2, _ = generate_synthetic_pair(spec, seed)
        h = build_hierarchy(stack_pair(t1, t2), (8, 15, 20), seed=seed)
        for k, lvl in enumerate(h.levels):
            lab = lvl.label_image
            if set(np.unique(lab)) != set(range(lvl.n_parcels)):
                failures.append((seed, k, "not a partition"))
            for i in range(lvl.n_parcels):
                if ndimage.label(lab == i)[1] != 1:
                    failures.append((seed, k, f"parcel {i} disconnected"))
            if k:
                if not np.array_equal(h.father_maps[k][h.finest.label_image], lab):
                    failures.append((seed, k, "not nested"))
        n1, n2, n3 = h.counts()
        if not n1 > n2 > n3:
            failures.append((seed, "counts", (n1, n2, n3)))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60
    assert report(3, ok, f"{50 - len({f[0] for f in failures})}/50 scenes satisfy partition, connectivity, "
                         f"nesting and N1 > N2 > N3, {elapsed:.1f}s (< 60s)"), failures[:5]


def test_4_propagation_spectrum():
    lo, hi = np.inf, -np.inf
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 11))
        # weights over five decades so strongly bipartite graphs push towards -1
        scale = 10 ** rng.uniform(-2, 3)
        w = np.triu(scale * rng.uniform(0.0, 1.0, (n, n)) * (rng.random((n, n)) < rng.random()), 1)
        ev = np.linalg.eigvalsh(renormalize(sp.csr_matrix(w + w.T)).toarray())
        lo, hi = min(lo, ev.min()), max(hi, ev.max())
    ok = lo >= -1 - 1e-10 and hi <= 1 + 1e-10
    assert report(4, ok, f"eigenvalues span [{lo:.6f}, {hi:.12f}] over 100 graphs (within [-1, 1] +- 1e-10)")


def planted_partition(seed, n=40, channels=8, p_in=0.3, p_out=0.02, spread=0.5):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    prob = np.where(y[:, None] == y[None, :], p_in, p_out)
    mask = np.triu(rng.random((n, n)) < prob, 1)
    w = np.triu(rng.uniform(0.2, 1.0, (n, n)), 1) * mask
    a = sp.csr_matrix(w + w.T)
    x = rng.normal(size=(2, channels))[y] + rng.normal(scale=spread, size=(n, channels))
    return ParcelGraph(0, x, a, renormalize(a)), y, rng


def test_5_planted_partition_learning():
    t0 = time.perf_counter()
    graph, y, rng = planted_partition(0)
    # 5% of 40 nodes: one labelled node per cluster
    picks = [int(rng.integers(0, 20)), 20 + int(rng.integers(0, 20))]
    labels = LabelSet(picks, y[picks])
    cfg = PipelineConfig()
    model = GcnModel.initialize(cfg.layer_dims(graph.features.shape[1]), 1, seed=0, dropout=cfg.dropout,
                                weight_decay=cfg.weight_decay, learning_rate=cfg.learning_rate)
    trained, _ = train(model, [graph], [], labels, epochs=cfg.epochs)
    E, _ = forward(trained, [graph], [])
    acc = float(np.mean((E[:, 1] >= E[:, 0]) == y))
    elapsed = time.perf_counter() - t0
    ok = acc >= 0.95 and elapsed < 30
    assert report(5, ok, f"all-node accuracy {acc:.3f} (>= 0.95) after {cfg.epochs} epochs, {elapsed:.2f}s (< 30s)")


# the 64x64 desk scenes use texture blocks of 4 px and scales 5/10/20, which
# give roughly 1500 finest parcels and so about 75 labelled nodes at 5%
SCENE_SCALES = (5.0, 10.0, 20.0)


def test_6_end_to_end_synthetic_scene():
    t0 = time.perf_counter()
    spec = SceneSpec(height=64, width=64, texture_block=4, polygons=default_polygons(), noise_sigma=0.05)
    t1, t2, ref = generate_synthetic_pair(spec, seed=0)
    cfg = PipelineConfig(scales=SCENE_SCALES, label_ratio=0.05, seed=0)
    prepared = prepare(cfg, stack_pair(t1, t2), ref)
    result = fit_predict(cfg, prepared)
    elapsed = time.perf_counter() - t0
    kappa = result.report.kappa
    ok = kappa >= 0.80 and elapsed < 120 and len(prepared.hierarchy) == 3
    assert report(6, ok, f"pixel Kappa {kappa:.4f} (>= 0.80) with {len(prepared.labels)} labels, "
                         f"{elapsed:.1f}s (< 120s)")


def _fusion_comparison(seed):
    square = [(8, 8), (8, 39), (39, 39), (39, 8)]
    spec = SceneSpec(height=64, width=64, texture_block=4, polygons=[square], noise_sigma=0.05, shift=0.5)
    t1, t2, ref = generate_synthetic_pair(spec, seed=seed)
    cfg = PipelineConfig(scales=SCENE_SCALES, seed=seed)
    prepared = prepare(cfg, stack_pair(t1, t2), ref)
    fine = fit_predict(cfg, prepared, levels=[0]).report.kappa
    fused = fit_predict(cfg, prepared, levels=[0, 1, 2]).report.kappa
    return fine, fused, int(ref.labels.sum()), int(prepared.hierarchy.finest.areas.max())


def test_7_fusion_ablation_direction():
    fine, fused, region, largest = _fusion_comparison(0)
    assert region > largest
    # context only: the same comparison under other seeds is not part of the pass condition
    others = [_fusion_comparison(s)[:2] for s in range(1, 10)]
    held = sum(b >= a for a, b in others)
    mean_diff = float(np.mean([b - a for a, b in [(fine, fused), *others]]))
    ok = fused >= fine
    assert report(7, ok, f"seed 0: fine-medium-coarse Kappa {fused:.4f} vs fine {fine:.4f} "
                         f"(region {region} px, largest fine parcel {largest} px); "
                         f"direction also holds on {held}/9 other seeds, mean difference {mean_diff:+.4f}")


def test_8_metric_formulas():
    m = metrics(Confusion(tp=40, fp=20, tn=130, fn=10))
    expected = (0.13333333333333333, 0.2, 0.85, 0.625)
    errors = [abs(a - b) for a, b in zip((m.far, m.mar, m.oa, m.kappa), expected)]
    ok = max(errors) <= 1e-9 and math.isclose(m.far, 20 / 150, abs_tol=1e-15)
    assert report(8, ok, f"FAR {m.far:.5f} MAR {m.mar:.5f} OA {m.oa:.5f} Kappa {m.kappa:.5f} "
                         f"(max error {max(errors):.1e} <= 1e-9)")


def test_9_cli_runs_are_byte_identical(tmp_path):
    cmd = [sys.executable, "-m", "msgcn"]
    scene = tmp_path / "scene"
    subprocess.run(cmd + ["synth", "--out", str(scene), "--height", "32", "--width", "32", "--seed", "5"],
                   check=True, capture_output=True)
    outs = []
    for name in ("first", "second"):
        out = tmp_path / name
        subprocess.run(cmd + ["run", "--config", str(scene / "config.ini"), "--seed", "5", "--out", str(out)],
                       check=True, capture_output=True)
        outs.append(out)
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
               for f in ("change_map.pgm", "metrics.csv", "loss_history.csv"))
    assert report(9, same, "two CLI runs with the same config and seed give byte-identical change map, "
                           "metrics and loss history")
