"""Command-line entry points: synth, train, render, eval.

Usage errors exit with status 2 (argparse); data and configuration errors
print one ``error:`` line to stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .geometry import load_cameras, save_cameras
from .io import DataError, PPMError, load_dataset, write_ppm
from .losses import ConfigError
from .pruning import write_prune_csv
from .rasterizer import render_image
from .subdivision import write_split_csv
from .synth import SceneSpec, synth, three_box_scene
from .trainer import ABLATIONS, TrainConfig, evaluate, train, write_metrics_csv
from .voxel_grid import VoxelGrid

USER_ERRORS = (DataError, PPMError, ConfigError, FileNotFoundError, json.JSONDecodeError,
               ValueError, TypeError, KeyError)


def _load_config(args) -> TrainConfig:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    if not isinstance(raw, dict):
        raise ConfigError("config JSON must be an object")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.iters is not None:
        raw["total_iters"] = args.iters
    if args.workers is not None:
        raw["workers"] = args.workers
    cfg = TrainConfig.from_dict(raw)
    return cfg.ablate(*(args.ablate or []))


def run_synth(args) -> int:
    spec = SceneSpec.load(args.scene) if args.scene else three_box_scene()
    ds = synth(spec, args.out)
    print(f"wrote {len(ds)} views to {args.out}")
    return 0


def run_train(args) -> int:
    cfg = _load_config(args)
    ds = load_dataset(args.data)
    train_views, test_views = ds.split(cfg.holdout_every)
    if not train_views:
        train_views = list(range(len(ds)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(cfg, ds, train_views)
    write_metrics_csv(res.rows, out / "metrics.csv")
    res.grid.save(out / "checkpoint.json")
    save_cameras(ds.cameras, out / "cameras.json")
    write_prune_csv(out / "prune.csv", res.prune_reports)
    write_split_csv(out / "splits.csv", res.split_reports)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    last = res.rows[-1]
    print(f"trained {cfg.total_iters} iters: live {last['live_voxels']} voxels, "
          f"peak {last['peak_model_bytes']} bytes, last train psnr {last['psnr']:.2f}")
    if test_views:
        summary = evaluate(res.grid, ds, test_views, workers=cfg.workers)
        print(f"held-out psnr {summary['psnr']:.2f} ssim {summary['ssim']:.4f} "
              f"({summary['count']} views)")
    return 0


def run_render(args) -> int:
    ckpt = Path(args.checkpoint)
    grid = VoxelGrid.load(ckpt)
    cam_file = Path(args.cameras) if args.cameras else ckpt.parent / "cameras.json"
    cameras = load_cameras(cam_file)
    views = range(len(cameras)) if args.view is None else [args.view]
    out = Path(args.out) if args.out else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    for v in views:
        if not 0 <= v < len(cameras):
            raise DataError(f"view {v} out of range (0..{len(cameras) - 1})")
        img = render_image(grid, cameras[v], workers=args.workers).image
        write_ppm(img, out / f"view_{v:04d}.ppm")
    print(f"rendered {len(views)} view(s) to {out}")
    return 0


def run_eval(args) -> int:
    grid = VoxelGrid.load(args.checkpoint)
    ds = load_dataset(args.data)
    train_views, test_views = ds.split(args.holdout_every)
    views = {"test": test_views, "train": train_views, "all": list(range(len(ds)))}[args.split]
    summary = evaluate(grid, ds, views, workers=args.workers)
    if args.json:
        Path(args.json).write_text(json.dumps(summary, indent=1))
    for r in summary["views"]:
        print(f"view {r['view']:4d}  psnr {r['psnr']:.2f}  ssim {r['ssim']:.4f}")
    print(f"mean psnr {summary['psnr']:.2f} ssim {summary['ssim']:.4f} ({summary['count']} views)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="litevoxel", description="Sparse voxel radiance fitting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log adaptation steps")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic box-scene dataset")
    s.add_argument("--scene", help="scene spec JSON (default: built-in three-box scene)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=run_synth)

    t = sub.add_parser("train", help="fit a voxel grid to a dataset")
    t.add_argument("--config", help="TrainConfig JSON")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--iters", type=int, help="override total_iters")
    t.add_argument("--workers", type=int)
    t.add_argument("--ablate", action="append", choices=sorted(ABLATIONS),
                   help="switch a component off; repeatable")
    t.set_defaults(func=run_train)

    r = sub.add_parser("render", help="render views of a checkpoint to PPM")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--cameras", help="cameras.json (default: next to the checkpoint)")
    r.add_argument("--view", type=int, help="single view index (default: all)")
    r.add_argument("--out", help="output directory (default: checkpoint directory)")
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(func=run_render)

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint against a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--holdout-every", type=int, default=8)
    e.add_argument("--json", help="also write the summary here")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=run_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
