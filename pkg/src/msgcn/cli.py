"""Command line entry point: ``msgcn {run,synth,ablate,eval}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .evaluation import EvaluationError, confusion, metrics
from .pipeline import (ConfigError, PipelineConfig, PipelineError, format_ablation_table, run_ablation,
                       run_pipeline, write_ablation_table, write_metrics_csv)
from .raster_io import RasterError, load_change_map, save_raster, write_change_map
from .synthetic import SceneError, SceneSpec, default_polygons, generate_synthetic_pair

logger = logging.getLogger("msgcn")


def _load_config(args) -> PipelineConfig:
    return PipelineConfig.from_file(args.config, seed=args.seed)


def cmd_run(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    result = run_pipeline(config, out, dump_intermediates=args.dump_intermediates)
    print(f"change map written to {out / 'change_map.pgm'}")
    if result.report is not None:
        print(result.report.table())
    return 0


def cmd_synth(args) -> int:
    if args.scene == "square":
        side = min(args.height, args.width) // 2
        polygons = [[(8, 8), (8, 7 + side), (7 + side, 7 + side), (7 + side, 8)]]
    else:
        polygons = default_polygons(args.height, args.width)
    spec = SceneSpec(height=args.height, width=args.width, bands=args.bands, texture_block=args.block,
                     polygons=polygons, shift=args.shift, noise_sigma=args.noise)
    t1, t2, ref = generate_synthetic_pair(spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_raster(t1, out / "t1.f32")
    save_raster(t2, out / "t2.f32")
    write_change_map(ref, out / "reference.pgm")
    config = PipelineConfig(t1=Path("t1.f32"), t2=Path("t2.f32"), reference=Path("reference.pgm"),
                            scales=tuple(args.scales), seed=args.seed)
    (out / "config.ini").write_text(config.to_ini())
    print(f"scene written to {out} ({int(ref.labels.sum())} changed pixels)")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    rows = run_ablation(config, args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ablation_table(rows, out / f"ablation_{args.mode}.csv")
    print(format_ablation_table(rows))
    return 0


def cmd_eval(args) -> int:
    report = metrics(confusion(load_change_map(args.predicted), load_change_map(args.reference)))
    print(report.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(report, out / "metrics.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msgcn", description="Multiscale graph convolutional change detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full pipeline from a config file")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--out", required=True, type=Path)
    run.add_argument("--dump-intermediates", action="store_true",
                     help="also write features, label images, graphs and the model")
    run.set_defaults(func=cmd_run)

    synth = sub.add_parser("synth", help="generate a synthetic image pair with a reference map")
    synth.add_argument("--out", required=True, type=Path)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--scene", choices=("polygons", "square"), default="polygons")
    synth.add_argument("--height", type=int, default=64)
    synth.add_argument("--width", type=int, default=64)
    synth.add_argument("--bands", type=int, default=1)
    synth.add_argument("--block", type=int, default=4, help="background texture block size in pixels")
    synth.add_argument("--shift", type=float, default=0.5)
    synth.add_argument("--noise", type=float, default=0.05)
    synth.add_argument("--scales", type=float, nargs="+", default=[5.0, 10.0, 20.0])
    synth.set_defaults(func=cmd_synth)

    ablate = sub.add_parser("ablate", help="compare scale combinations or network depths")
    ablate.add_argument("--config", required=True, type=Path)
    ablate.add_argument("--seed", type=int, default=None)
    ablate.add_argument("--out", required=True, type=Path)
    ablate.add_argument("--mode", choices=("scale-combinations", "layer-depths"), default="scale-combinations")
    ablate.set_defaults(func=cmd_ablate)

    ev = sub.add_parser("eval", help="compare a change map against a reference")
    ev.add_argument("predicted", type=Path)
    ev.add_argument("reference", type=Path)
    ev.add_argument("--out", type=Path, default=None)
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, PipelineError, RasterError, EvaluationError, SceneError) as exc:
        print(f"msgcn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
