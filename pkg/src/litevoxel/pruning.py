"""Depth-binned quantile pruning with hysteresis, keep-halo and a removal cap."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Camera, depth_proxy, min_footprint
from .voxel_grid import Voxel, VoxelGrid, ceil_count, face_neighbor_pairs, remove_voxels

# window w_max above this counts as "inside" evidence
INSIDE_FLOOR = 1e-3


@dataclass
class PruneConfig:
    num_bins: int = 8
    q_start: float = 0.05
    q_end: float = 0.25
    near_far_relax: float = 0.2
    ema_alpha: float = 0.1
    m_low: float = 0.3
    m_high: float = 0.7
    cap_fraction: float = 0.05
    halo_wmax: float = 0.5
    halo_size_ratio: float = 2.0

    def __post_init__(self):
        if self.num_bins < 1:
            raise ValueError("num_bins must be >= 1")
        if not self.m_low < self.m_high:
            raise ValueError("m_low must be < m_high")
        if not 0 < self.ema_alpha <= 1:
            raise ValueError("ema_alpha must lie in (0, 1]")
        if not 0 < self.cap_fraction <= 1:
            raise ValueError("cap_fraction must lie in (0, 1]")
        for q in (self.q_start, self.q_end):
            if not 0 < q < 1:
                raise ValueError("quantiles must lie in (0, 1)")


@dataclass
class BinStats:
    bin: int
    population: int
    tau: float
    pruned: int
    protected: int


@dataclass
class PruneReport:
    bins: list[BinStats] = field(default_factory=list)
    cap: int = 0
    cap_limited: bool = False
    removed: list[tuple] = field(default_factory=list)
    live_before: int = 0

    @property
    def total_removed(self) -> int:
        return len(self.removed)


DEPTH_DECIMALS = 9


def assign_depth_bins(grid: VoxelGrid, cameras: Sequence[Camera], num_bins: int,
                      depth: np.ndarray | None = None) -> np.ndarray:
    """Equal-population depth bins: bin ``b`` holds ranks ``[b N/B, (b+1) N/B)``.

    Depths are rounded to ``DEPTH_DECIMALS`` places first, so voxels at
    equal distance tie regardless of float evaluation order; ties are then
    ordered by voxel row.
    """
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    n = len(grid)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if depth is None:
        if not cameras:
            raise ValueError("depth binning needs at least one camera")
        depth = depth_proxy(cameras, grid.centers())
    order = np.argsort(np.round(depth, DEPTH_DECIMALS), kind="stable")
    bins = np.empty(n, dtype=np.int64)
    bins[order] = np.arange(n) * num_bins // n
    return bins


def bin_threshold(weights, q: float) -> float | None:
    """Empirical-CDF inverse: smallest observed w with F(w) >= q.

    Returns ``None`` for an empty bin.
    """
    w = np.sort(np.asarray(weights, dtype=np.float64))
    if len(w) == 0:
        return None
    if not 0 < q < 1:
        raise ValueError("quantile must lie in (0, 1)")
    cdf = np.arange(1, len(w) + 1) / len(w)
    return float(w[np.argmax(cdf >= q)])


def bin_quantiles(cfg: PruneConfig, t: float, T: float, num_bins: int | None = None) -> np.ndarray:
    """Annealed per-bin quantile; far bins are relaxed (prune slightly less)."""
    B = cfg.num_bins if num_bins is None else num_bins
    frac = min(max(t / T, 0.0), 1.0) if T > 0 else 1.0
    q = cfg.q_start + (cfg.q_end - cfg.q_start) * frac
    pos = np.arange(B) / (B - 1) - 0.5 if B > 1 else np.zeros(1)
    qb = q * (1.0 - cfg.near_far_relax * pos)
    return np.clip(qb, 1e-6, 1 - 1e-6)


def update_inside_state(voxel: Voxel, x: float, cfg: PruneConfig) -> tuple[float, str]:
    """EMA of the inside score with two-threshold hysteresis on the label."""
    m = (1.0 - cfg.ema_alpha) * voxel.inside_ema + cfg.ema_alpha * x
    voxel.inside_ema = m
    if m < cfg.m_low:
        voxel.inside = False
    elif m > cfg.m_high:
        voxel.inside = True
    return m, voxel.inside_state


def update_inside_states(grid: VoxelGrid, cfg: PruneConfig, scores: np.ndarray | None = None):
    """Vectorized ``update_inside_state``; scores default to w_max > floor."""
    x = (grid.w_max > INSIDE_FLOOR).astype(np.float64) if scores is None else scores
    m = (1.0 - cfg.ema_alpha) * grid.inside_ema + cfg.ema_alpha * x
    grid.inside_ema[:] = m
    grid.inside[m < cfg.m_low] = False
    grid.inside[m > cfg.m_high] = True


def keep_halo_mask(grid: VoxelGrid, cameras: Sequence[Camera], cfg: PruneConfig,
                   footprint: np.ndarray | None = None) -> np.ndarray:
    """Voxels protected from pruning this step.

    Protected: half-size below ``halo_size_ratio`` times the ray footprint,
    or w_max above ``halo_wmax`` with a same-level face neighbor that is too.
    """
    if len(grid) == 0:
        return np.zeros(0, dtype=bool)
    if footprint is None:
        footprint = min_footprint(cameras, grid.centers())
    small = grid.half_sizes() < cfg.halo_size_ratio * footprint
    hot = grid.w_max > cfg.halo_wmax
    edge = np.zeros(len(grid), dtype=bool)
    pairs = face_neighbor_pairs(grid)
    if len(pairs):
        both = hot[pairs[:, 0]] & hot[pairs[:, 1]]
        edge[pairs[both, 0]] = True
        edge[pairs[both, 1]] = True
    return small | edge


def prune_step(grid: VoxelGrid, cameras: Sequence[Camera], cfg: PruneConfig, t: float,
               T: float, use_bins: bool = True, execute: bool = True) -> PruneReport:
    """One pruning pass at an adaptation barrier.

    Candidates are voxels labelled ``out`` plus those whose w_max is at or
    below their bin's quantile threshold, minus the keep-halo set.  At most
    ``ceil(cap_fraction * live)`` are removed, lowest w_max first with ties
    broken by voxel key.
    """
    n = len(grid)
    report = PruneReport(live_before=n)
    if n == 0:
        return report
    B = cfg.num_bins if use_bins else 1
    bins = assign_depth_bins(grid, cameras, B)
    qb = bin_quantiles(cfg, t, T, B)
    protected = keep_halo_mask(grid, cameras, cfg)
    below = np.zeros(n, dtype=bool)
    taus = np.full(B, np.nan)
    for b in range(B):
        members = bins == b
        tau = bin_threshold(grid.w_max[members], qb[b])
        if tau is None:
            continue
        taus[b] = tau
        below |= members & (grid.w_max <= tau)
    cand = np.nonzero((below | ~grid.inside) & ~protected)[0]
    report.cap = ceil_count(cfg.cap_fraction, n)
    if len(cand) > report.cap:
        report.cap_limited = True
        k = grid.keys[cand]
        order = np.lexsort((k[:, 3], k[:, 2], k[:, 1], k[:, 0], grid.w_max[cand]))
        cand = cand[order[:report.cap]]
    chosen = np.zeros(n, dtype=bool)
    chosen[cand] = True
    for b in range(B):
        members = bins == b
        report.bins.append(BinStats(b, int(members.sum()), float(taus[b]),
                                    int((chosen & members).sum()),
                                    int((protected & members).sum())))
    keys = grid.keys[np.sort(cand)]
    report.removed = [tuple(k) for k in keys.tolist()]
    if execute:
        remove_voxels(grid, report.removed)
    return report


PRUNE_CSV_FIELDS = ("step", "bin", "population", "tau", "pruned", "protected")


def prune_rows(step: int, report: PruneReport) -> list[dict]:
    return [{"step": step, "bin": b.bin, "population": b.population, "tau": b.tau,
             "pruned": b.pruned, "protected": b.protected} for b in report.bins]


def write_prune_csv(path, reports: Sequence[tuple[int, PruneReport]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=PRUNE_CSV_FIELDS)
        w.writeheader()
        for step, rep in reports:
            w.writerows(prune_rows(step, rep))
