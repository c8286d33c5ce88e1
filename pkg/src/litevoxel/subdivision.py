"""Footprint-gated, priority-ranked, budgeted voxel splitting."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Camera, depth_proxy, min_footprint
from .voxel_grid import Voxel, VoxelGrid, split_voxels


@dataclass
class SubdivideConfig:
    kappa: float = 1.0
    beta: float = 0.2
    budget: int | None = None          # None: budget_fraction of live count
    budget_fraction: float = 0.02
    hard_cap: int | None = None        # None: set by the trainer
    usefulness_ema: float = 0.5

    def __post_init__(self):
        if self.budget is not None and self.budget < 0:
            raise ValueError("budget must be >= 0")
        if not 0 < self.usefulness_ema <= 1:
            raise ValueError("usefulness_ema must lie in (0, 1]")
        if not 0.1 <= self.beta <= 0.3:
            warnings.warn(f"far-bias beta={self.beta} outside the usual [0.1, 0.3]",
                          stacklevel=2)

    def budget_for(self, live: int) -> int:
        if self.budget is not None:
            return self.budget
        return max(1, int(self.budget_fraction * live))


@dataclass
class DepthPercentiles:
    z_p5: float
    z_p95: float

    @classmethod
    def from_depths(cls, z) -> "DepthPercentiles":
        z = np.asarray(z, dtype=np.float64)
        if len(z) == 0:
            return cls(0.0, 0.0)
        p5, p95 = np.percentile(z, [5.0, 95.0])
        return cls(float(p5), float(p95))


@dataclass
class SplitReport:
    split: list[tuple] = field(default_factory=list)
    children: list[tuple] = field(default_factory=list)
    priorities: list[float] = field(default_factory=list)
    truncated_by: str = ""
    eligible: int = 0

    @property
    def min_selected_priority(self) -> float:
        return min(self.priorities) if self.priorities else float("nan")


def eligibility(level, half_size, footprint, kappa: float, l_max: int):
    """Split allowed below the finest level when half-size exceeds kappa * footprint."""
    return (np.asarray(level) < l_max) & (np.asarray(half_size) > kappa * np.asarray(footprint))


def normalize_depth(z, p: DepthPercentiles):
    z = np.asarray(z, dtype=np.float64)
    spread = p.z_p95 - p.z_p5
    if spread <= 0:
        out = np.full(z.shape, 0.5)
    else:
        out = np.clip((z - p.z_p5) / spread, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def far_bias(z_norm, beta: float):
    return 1.0 + beta * z_norm


def usefulness_signal(grid: VoxelGrid) -> np.ndarray:
    """w_max times the mean residual over rays the voxel contributed to."""
    mean_resid = np.divide(grid.resid_sum, grid.resid_count,
                           out=np.zeros(len(grid)), where=grid.resid_count > 0)
    return grid.w_max * mean_resid


def update_usefulness(voxel: Voxel, signal: float, ema: float) -> float:
    if signal < 0:
        raise ValueError("usefulness signal must be >= 0")
    voxel.usefulness = (1.0 - ema) * voxel.usefulness + ema * signal
    return voxel.usefulness


def update_usefulness_all(grid: VoxelGrid, ema: float) -> None:
    grid.usefulness[:] = (1.0 - ema) * grid.usefulness + ema * usefulness_signal(grid)


def priorities(grid: VoxelGrid, cameras: Sequence[Camera], cfg: SubdivideConfig):
    """(eligible mask, priority) for every voxel."""
    centers = grid.centers()
    elig = eligibility(grid.keys[:, 0], grid.half_sizes(), min_footprint(cameras, centers),
                       cfg.kappa, grid.l_max)
    z = depth_proxy(cameras, centers)
    pct = DepthPercentiles.from_depths(z)
    prio = grid.usefulness * far_bias(normalize_depth(z, pct), cfg.beta)
    return elig, prio


def select_and_split(grid: VoxelGrid, cameras: Sequence[Camera], cfg: SubdivideConfig,
                     optimizer=None, execute: bool = True) -> SplitReport:
    """Split the top-priority eligible voxels within budget and hard cap.

    Voxels with zero priority are never selected.  Ties are broken by voxel
    key.  When ``optimizer`` is given its state is refreshed for the new
    topology.
    """
    report = SplitReport()
    n = len(grid)
    if n == 0:
        return report
    elig, prio = priorities(grid, cameras, cfg)
    cand = np.nonzero(elig & (prio > 0))[0]
    report.eligible = int(elig.sum())
    budget = cfg.budget_for(n)
    room = n if cfg.hard_cap is None else max(0, (cfg.hard_cap - n) // 7)
    k = grid.keys[cand]
    order = np.lexsort((k[:, 3], k[:, 2], k[:, 1], k[:, 0], -prio[cand]))
    cand = cand[order]
    take = min(len(cand), budget, room)
    if take < len(cand):
        report.truncated_by = "budget" if budget <= room else "hard_cap"
    cand = cand[:take]
    report.split = [tuple(kk) for kk in grid.keys[cand].tolist()]
    report.priorities = prio[cand].tolist()
    if execute and report.split:
        kids = split_voxels(grid, report.split)
        report.children = [c for group in kids for c in group]
        if optimizer is not None:
            optimizer.refresh_after_topology(report, None)
    return report


SPLIT_CSV_FIELDS = ("step", "splits", "truncated_by", "min_selected_priority")


def write_split_csv(path, reports: Sequence[tuple[int, SplitReport]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SPLIT_CSV_FIELDS)
        w.writeheader()
        for step, rep in reports:
            w.writerow({"step": step, "splits": len(rep.split), "truncated_by": rep.truncated_by,
                        "min_selected_priority": rep.min_selected_priority})
