"""Render / loss / backward / step loop with periodic prune and split."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Camera
from .io import Dataset, DataError
from .losses import (ConfigError, LossWeights, gamma_schedule, sobel_map, ssim,
                     total_loss)
from .optimizer import Adam
from .pruning import PruneConfig, PruneReport, prune_step, update_inside_states
from .rasterizer import backward, render_image
from .subdivision import (SplitReport, SubdivideConfig, select_and_split,
                          update_usefulness_all)
from .voxel_grid import VoxelGrid, init_uniform, model_bytes

log = logging.getLogger(__name__)

METRICS_FIELDS = ("iter", "total", "lf", "ssim", "t_conc", "tv", "psnr", "live_voxels",
                  "peak_voxels", "model_bytes", "peak_model_bytes", "splits", "prunes", "gamma")
ABLATIONS = {"lf": "lf_off", "prune": "prune_off", "subdiv": "subdivide_off",
             "bins": "depth_bins_off"}


@dataclass
class TrainConfig:
    total_iters: int = 2000
    adapt_every: int | None = None      # None: total_iters // 20
    t0: float | None = None             # None: 0.3 * total_iters
    t1: float | None = None             # None: 0.6 * total_iters
    gamma_max: float = 0.6
    lf_eps: float = 1e-3
    lambda_ssim: float = 0.2
    lambda_tc: float = 0.01
    lambda_tv: float = 1e-4
    prune: PruneConfig = field(default_factory=PruneConfig)
    subdivide: SubdivideConfig = field(default_factory=SubdivideConfig)
    lr_color: float = 2e-2
    lr_opacity: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    lf_off: bool = False
    prune_off: bool = False
    subdivide_off: bool = False
    depth_bins_off: bool = False
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    init_level: int = 3
    init_alpha: float = 0.1
    init_color: tuple = (0.5, 0.5, 0.5)
    l_max: int = 10
    early_stop: float = 1e-4
    workers: int = 1
    holdout_every: int = 8

    def __post_init__(self):
        if isinstance(self.prune, dict):
            self.prune = PruneConfig(**self.prune)
        if isinstance(self.subdivide, dict):
            self.subdivide = SubdivideConfig(**self.subdivide)
        if self.total_iters < 1:
            raise ConfigError("total_iters must be >= 1")
        if self.adapt_every is None:
            self.adapt_every = max(1, self.total_iters // 20)
        if self.adapt_every < 1:
            raise ConfigError("adapt_every must be >= 1")
        if self.t0 is None:
            self.t0 = 0.3 * self.total_iters
        if self.t1 is None:
            self.t1 = 0.6 * self.total_iters
        if not 0 <= self.t0 < self.t1 <= self.total_iters:
            raise ConfigError("need 0 <= t0 < t1 <= total_iters")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def ablate(self, *names: str) -> "TrainConfig":
        cfg = dataclasses.replace(self)
        for n in names:
            if n not in ABLATIONS:
                raise ConfigError(f"unknown ablation {n!r}; choose from {sorted(ABLATIONS)}")
            setattr(cfg, ABLATIONS[n], True)
        return cfg

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_ssim, self.lambda_tc, self.lambda_tv)

    def gamma(self, t: int) -> float:
        if self.lf_off:
            return 0.0
        return gamma_schedule(t, self.total_iters, self.t0, self.t1, self.gamma_max)


@dataclass
class TrainResult:
    grid: VoxelGrid
    rows: list[dict]
    prune_reports: list[tuple[int, PruneReport]] = field(default_factory=list)
    split_reports: list[tuple[int, SplitReport]] = field(default_factory=list)

    @property
    def peak_model_bytes(self) -> int:
        return self.rows[-1]["peak_model_bytes"] if self.rows else 0


def psnr(render: np.ndarray, gt: np.ndarray) -> float:
    """PSNR in dB for unit-range images; identical images report 99.0."""
    render = np.asarray(render, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if render.shape != gt.shape:
        raise ValueError("render and ground truth shapes differ")
    mse = float(np.mean((render - gt) ** 2))
    if mse == 0:
        return 99.0
    return 10.0 * np.log10(1.0 / mse)


def _check_dataset(ds: Dataset):
    if len(ds) == 0:
        raise ConfigError("dataset has no views")
    for i, (cam, img) in enumerate(zip(ds.cameras, ds.images)):
        if img.shape != (cam.height, cam.width, 3):
            raise DataError(f"view {i}: image shape {img.shape} does not match camera")


def adapt(grid: VoxelGrid, optimizer: Adam, cameras: Sequence[Camera], cfg: TrainConfig,
          t: int) -> tuple[PruneReport | None, SplitReport | None]:
    """One adaptation barrier: labels, prune, split, optimizer refresh, window reset."""
    update_inside_states(grid, cfg.prune)
    update_usefulness_all(grid, cfg.subdivide.usefulness_ema)
    prune_rep = split_rep = None
    if not cfg.prune_off:
        prune_rep = prune_step(grid, cameras, cfg.prune, t, cfg.total_iters,
                               use_bins=not cfg.depth_bins_off)
    if not cfg.subdivide_off:
        split_rep = select_and_split(grid, cameras, cfg.subdivide)
    optimizer.refresh_after_topology(split_rep, prune_rep)
    optimizer.check_aligned(grid)
    grid.reset_window()
    return prune_rep, split_rep


def train(config: TrainConfig, dataset: Dataset, views: Sequence[int] | None = None,
          grid: VoxelGrid | None = None) -> TrainResult:
    """Fit a voxel grid to ``dataset`` (restricted to ``views`` when given)."""
    _check_dataset(dataset)
    cfg = config
    if views is None:
        views = list(range(len(dataset)))
    if len(views) == 0:
        raise ConfigError("no training views")
    cameras = [dataset.cameras[i] for i in views]
    images = [dataset.images[i] for i in views]
    sobels = [sobel_map(img) for img in images]

    if grid is None:
        grid = init_uniform(cfg.bounds, cfg.init_level, cfg.init_alpha, cfg.init_color, cfg.l_max)
    sub = cfg.subdivide
    if sub.hard_cap is None:
        sub = dataclasses.replace(sub, hard_cap=8 * len(grid))
        cfg = dataclasses.replace(cfg, subdivide=sub)
    opt = Adam.for_grid(grid, cfg.lr_color, cfg.lr_opacity, beta1=cfg.beta1,
                        beta2=cfg.beta2, eps=cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(views))
    weights = cfg.loss_weights

    result = TrainResult(grid, [])
    peak_vox = peak_bytes = 0
    for it in range(cfg.total_iters):
        v = int(order[it % len(order)])
        cam, gt = cameras[v], images[v]
        gamma = cfg.gamma(it)
        out = render_image(grid, cam, collect_stats=True, target=gt, workers=cfg.workers,
                           early_stop=cfg.early_stop)
        losses, grads = total_loss(out.image, out.transmittance, gt, grid, gamma, weights,
                                   sobels[v], cfg.lf_eps)
        if not np.isfinite(losses.total):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        g = backward(grid, out, grads.d_image, grads.d_trans, grads.d_params)
        opt.step(grid.params, g)

        n_split = n_pruned = 0
        if (it + 1) % cfg.adapt_every == 0 and it + 1 < cfg.total_iters:
            prune_rep, split_rep = adapt(grid, opt, cameras, cfg, it + 1)
            if prune_rep is not None:
                n_pruned = prune_rep.total_removed
                result.prune_reports.append((it + 1, prune_rep))
            if split_rep is not None:
                n_split = len(split_rep.split)
                result.split_reports.append((it + 1, split_rep))
            log.info("iter %d: pruned %d, split %d, live %d", it + 1, n_pruned, n_split, len(grid))

        live = len(grid)
        peak_vox = max(peak_vox, live)
        peak_bytes = max(peak_bytes, model_bytes(grid))
        result.rows.append({
            "iter": it, "total": losses.total, "lf": losses.lf, "ssim": losses.ssim,
            "t_conc": losses.t_conc, "tv": losses.tv, "psnr": psnr(out.image, gt),
            "live_voxels": live, "peak_voxels": peak_vox, "model_bytes": model_bytes(grid),
            "peak_model_bytes": peak_bytes, "splits": n_split, "prunes": n_pruned,
            "gamma": gamma,
        })
    return result


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def evaluate(grid: VoxelGrid, dataset: Dataset, views: Sequence[int] | None = None,
             workers: int = 1) -> dict:
    """Per-view and mean PSNR/SSIM of ``grid`` on the selected views."""
    if views is None:
        views = list(range(len(dataset)))
    per_view = []
    for i in views:
        cam, gt = dataset.cameras[i], dataset.images[i]
        img = render_image(grid, cam, workers=workers).image
        per_view.append({"view": i, "psnr": psnr(img, gt), "ssim": ssim(img, gt)})
    summary = {"views": per_view, "count": len(per_view)}
    summary["psnr"] = float(np.mean([r["psnr"] for r in per_view])) if per_view else float("nan")
    summary["ssim"] = float(np.mean([r["ssim"] for r in per_view])) if per_view else float("nan")
    return summary
