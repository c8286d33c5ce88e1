"""Ray/octree traversal and differentiable front-to-back alpha compositing.

Two paths share the same slab test and ordering rule:

* a scalar path (``trace_ray``, ``composite_forward``, ``composite_backward``)
  that handles one ray at a time by hierarchical octree descent, and
* a vectorized image path (``render_image``, ``backward``) that culls voxels
  by their projected screen rectangle and composites all rays of a row block
  at once.

Segments along a ray are ordered by clipped entry distance, ties broken by
the voxel's row in the grid.  Background is black.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import Camera, Ray, camera_rays
from .voxel_grid import Voxel, VoxelGrid, child_keys

BACKGROUND = np.zeros(3)
LUMA = np.array([0.299, 0.587, 0.114])
# rays with weight at a voxel above this feed its residual accumulator
CONTRIB_FLOOR = 1e-3


class Segment(NamedTuple):
    key: tuple
    t_entry: float
    t_exit: float


def slab(lo, hi, origin, direction):
    """Slab-test entry/exit distances; arrays broadcast over leading axes.

    A zero direction component yields an unbounded interval when the origin
    lies inside that slab and an empty one otherwise.
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    o, d = np.asarray(origin, float), np.asarray(direction, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tn = np.minimum(t0, t1)
    tf = np.maximum(t0, t1)
    par = d == 0
    if np.any(par):
        inside = (o >= lo) & (o <= hi)
        tn = np.where(par, np.where(inside, -np.inf, np.inf), tn)
        tf = np.where(par, np.where(inside, np.inf, -np.inf), tf)
    return tn.max(-1), tf.min(-1)


def _pair_slab(lo, hi, d):
    """Row-wise slab test for an origin at 0; entry clipped at t = 0."""
    if np.any(d == 0):
        tn, tf = slab(lo, hi, 0.0, d)
        return np.maximum(tn, 0.0), tf
    inv = 1.0 / d
    t0 = lo * inv
    t1 = hi * inv
    tn = np.minimum(t0, t1)
    tf = np.maximum(t0, t1)
    entry = np.maximum(np.maximum(tn[:, 0], tn[:, 1]), np.maximum(tn[:, 2], 0.0))
    exit_ = np.minimum(np.minimum(tf[:, 0], tf[:, 1]), tf[:, 2])
    return entry, exit_


def voxel_boxes(grid: VoxelGrid) -> tuple[np.ndarray, np.ndarray]:
    edge = 2.0 * grid.half_sizes()[:, None]
    lo = grid.lo + grid.keys[:, 1:] * edge
    return lo, lo + edge


# -- single ray -------------------------------------------------------------


def trace_ray(grid: VoxelGrid, ray: Ray) -> list[Segment]:
    """Stored voxels hit by ``ray`` (t >= 0), front to back."""
    if len(grid) == 0:
        return []
    internal = grid.internal_nodes()
    index = grid._index
    o, d = ray.origin, ray.direction
    hits = []
    stack = [(0, 0, 0, 0)]
    while stack:
        node = stack.pop()
        lo, hi = grid.box_of(node)
        tn, tf = slab(lo, hi, o, d)
        tn = max(float(tn), 0.0)
        if not tf > tn:
            continue
        if node in index:
            hits.append(Segment(node, tn, float(tf)))
        elif node in internal:
            stack.extend(child_keys(node))
    hits.sort(key=lambda s: (s.t_entry, index[s.key]))
    return hits


def composite_forward(segments: Sequence[Segment], grid: VoxelGrid, early_stop: float = 0.0):
    """Composite one ray. Returns ``(color, final_transmittance, weights)``."""
    T = 1.0
    color = np.zeros(3)
    weights = []
    alphas, colors = grid.alphas(), grid.colors()
    for seg in segments:
        i = grid.index_of(seg.key)
        a = float(alphas[i]) if early_stop <= 0 or T >= early_stop else 0.0
        w = T * a
        weights.append(w)
        color = color + w * colors[i]
        T = T * (1.0 - a)
    return color + T * BACKGROUND, T, weights


def composite_backward(segments: Sequence[Segment], grid: VoxelGrid, d_color, d_trans: float,
                       grad: np.ndarray | None = None) -> np.ndarray:
    """Accumulate dL/d(params) of one ray into ``grad`` (shape (N, 4)).

    Columns 0-2 are color logits, column 3 the opacity logit.
    """
    if grad is None:
        grad = np.zeros((len(grid), 4))
    d_color = np.asarray(d_color, dtype=np.float64)
    idx = [grid.index_of(s.key) for s in segments]
    alphas = grid.alphas()[idx]
    colors = grid.colors()[idx]
    n = len(idx)
    t_before = np.ones(n)
    for k in range(1, n):
        t_before[k] = t_before[k - 1] * (1.0 - alphas[k - 1])
    # behind: color composited from just after k with unit transmittance
    behind = BACKGROUND.copy()
    through = 1.0
    for k in range(n - 1, -1, -1):
        a, c, i = alphas[k], colors[k], idx[k]
        w = t_before[k] * a
        grad[i, :3] += w * d_color * c * (1.0 - c)
        d_alpha = t_before[k] * (d_color @ (c - behind) - d_trans * through)
        grad[i, 3] += d_alpha * a * (1.0 - a)
        behind = a * c + (1.0 - a) * behind
        through *= 1.0 - a
    return grad


def update_wmax(voxel: Voxel, w: float) -> None:
    if not 0.0 <= w <= 1.0:
        raise ValueError("blending weight must lie in [0, 1]")
    voxel.w_max = max(voxel.w_max, w)


# -- whole image --------------------------------------------------------------


@dataclass
class _Block:
    rays: np.ndarray        # (R,) flat pixel ids
    vox: np.ndarray         # (R, K) grid rows, -1 padding
    alpha: np.ndarray       # (R, K) alpha used in compositing
    color: np.ndarray       # (R, K, 3)
    t_before: np.ndarray    # (R, K) transmittance in front of each sample
    weight: np.ndarray      # (R, K)


@dataclass
class RenderOutput:
    image: np.ndarray
    transmittance: np.ndarray
    blocks: list = field(default_factory=list, repr=False)
    topology_version: int = -1

    def ray_weights(self, x: int, y: int) -> list[float]:
        """Blending weights of the samples along pixel (x, y), front to back."""
        rid = y * self.image.shape[1] + x
        for b in self.blocks:
            hit = np.nonzero(b.rays == rid)[0]
            if len(hit):
                r = hit[0]
                return b.weight[r, b.vox[r] >= 0].tolist()
        return []


def _screen_rects(grid: VoxelGrid, camera: Camera, lo: np.ndarray, hi: np.ndarray):
    """Conservative pixel rectangle (inclusive) covering each voxel's rays."""
    n = len(grid)
    corners = np.stack([np.where(np.array(bits, bool), hi, lo)
                        for bits in np.ndindex(2, 2, 2)], axis=1)  # (N, 8, 3)
    pc = corners @ camera.rotation.T + camera.translation
    z = pc[..., 2]
    front = z.min(1) > 1e-9
    behind = z.max(1) <= 0
    W, H = camera.width, camera.height
    x0 = np.zeros(n, np.int64)
    x1 = np.full(n, W - 1, np.int64)
    y0 = np.zeros(n, np.int64)
    y1 = np.full(n, H - 1, np.int64)
    if np.any(front):
        pf = pc[front]
        u = camera.fx * pf[..., 0] / pf[..., 2] + camera.cx
        v = camera.fy * pf[..., 1] / pf[..., 2] + camera.cy
        # one pixel of slack on each side
        x0[front] = np.ceil(u.min(1) - 0.5).astype(np.int64) - 1
        x1[front] = np.floor(u.max(1) - 0.5).astype(np.int64) + 1
        y0[front] = np.ceil(v.min(1) - 0.5).astype(np.int64) - 1
        y1[front] = np.floor(v.max(1) - 0.5).astype(np.int64) + 1
    x0 = np.clip(x0, 0, W)
    x1 = np.clip(x1, -1, W - 1)
    y0 = np.clip(y0, 0, H)
    y1 = np.clip(y1, -1, H - 1)
    y1[behind] = -1
    return x0, x1, y0, y1


def _trace_block(origin, dirs, lo, hi, alphas, colors, rects, rows, early_stop) -> _Block | None:
    x0, x1, y0, y1 = rects
    H, W = dirs.shape[:2]
    ya, yb = rows
    y0c = np.maximum(y0, ya)
    y1c = np.minimum(y1, yb - 1)
    bw = np.maximum(x1 - x0 + 1, 0)
    bh = np.maximum(y1c - y0c + 1, 0)
    counts = bw * bh
    total = int(counts.sum())
    if total == 0:
        return None
    vi = np.repeat(np.arange(len(counts)), counts)
    off = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[vi] + off % bw[vi]
    py = y0c[vi] + off // bw[vi]
    tn, tf = _pair_slab(lo[vi] - origin, hi[vi] - origin, dirs[py, px])
    hit = tf > tn
    if not np.any(hit):
        return None
    vi, tn, ray = vi[hit], tn[hit], (py * W + px)[hit]
    order = np.lexsort((tn, ray))  # stable: equal keys keep voxel-row order
    vi, ray = vi[order], ray[order]
    rays, first, cnt = np.unique(ray, return_index=True, return_counts=True)
    R, K = len(rays), int(cnt.max())
    row = np.repeat(np.arange(R), cnt)
    pos = np.arange(len(ray)) - np.repeat(first, cnt)
    vox = np.full((R, K), -1, np.int64)
    vox[row, pos] = vi
    alpha = np.zeros((R, K))
    alpha[row, pos] = alphas[vi]
    color = np.zeros((R, K, 3))
    color[row, pos] = colors[vi]
    t_before = np.empty((R, K))
    weight = np.empty((R, K))
    T = np.ones(R)
    for k in range(K):
        a = alpha[:, k]
        if early_stop > 0:
            a = np.where(T < early_stop, 0.0, a)
            alpha[:, k] = a
        t_before[:, k] = T
        weight[:, k] = T * a
        T = T * (1.0 - a)
    return _Block(rays, vox, alpha, color, t_before, weight)


def _row_chunks(height: int, n: int) -> list[tuple[int, int]]:
    n = max(1, min(n, height))
    edges = np.linspace(0, height, n + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def render_image(grid: VoxelGrid, camera: Camera, collect_stats: bool = False,
                 target: np.ndarray | None = None, workers: int = 1,
                 early_stop: float = 0.0) -> RenderOutput:
    """Render ``camera``'s view of ``grid``.

    With ``collect_stats`` the grid's window statistics are updated: the
    running max blending weight per voxel, and (when ``target`` is given)
    the per-voxel sums of luminance-weighted absolute residual over rays the
    voxel contributes to.  ``workers`` splits the image into row blocks that
    are traced concurrently; results are merged in row order, so output is
    bit-identical for any worker count.
    """
    H, W = camera.height, camera.width
    image = np.zeros((H * W, 3)) + BACKGROUND
    trans = np.ones(H * W)
    out = RenderOutput(image.reshape(H, W, 3), trans.reshape(H, W),
                       topology_version=grid.topology_version)
    if len(grid) == 0:
        return out
    origin, dirs = camera_rays(camera)
    lo, hi = voxel_boxes(grid)
    alphas, colors = grid.alphas(), grid.colors()
    rects = _screen_rects(grid, camera, lo, hi)
    chunks = _row_chunks(H, workers)
    args = (origin, dirs, lo, hi, alphas, colors, rects)
    if len(chunks) == 1:
        blocks = [_trace_block(*args, chunks[0], early_stop)]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            blocks = list(pool.map(lambda rows: _trace_block(*args, rows, early_stop), chunks))
    blocks = [b for b in blocks if b is not None]
    for b in blocks:
        C = np.zeros((len(b.rays), 3))
        for k in range(b.vox.shape[1]):
            C += b.weight[:, k, None] * b.color[:, k]
        T = b.t_before[:, -1] * (1.0 - b.alpha[:, -1])
        image[b.rays] = C + T[:, None] * BACKGROUND
        trans[b.rays] = T
    out.blocks = blocks
    if collect_stats:
        _collect_stats(grid, out, target)
    return out


def _collect_stats(grid: VoxelGrid, out: RenderOutput, target):
    resid = None
    if target is not None:
        target = np.asarray(target, dtype=np.float64)
        if target.shape != out.image.shape:
            raise ValueError("target image shape does not match render")
        resid = (np.abs(out.image - target) @ LUMA).reshape(-1)
    for b in out.blocks:
        valid = b.vox >= 0
        vox, w = b.vox[valid], b.weight[valid]
        np.maximum.at(grid.w_max, vox, w)
        if resid is not None:
            used = w > CONTRIB_FLOOR
            r = np.broadcast_to(resid[b.rays][:, None], b.vox.shape)[valid][used]
            grid.resid_sum += np.bincount(vox[used], r, minlength=len(grid))
            grid.resid_count += np.bincount(vox[used], minlength=len(grid))


def backward(grid: VoxelGrid, out: RenderOutput, d_image: np.ndarray,
             d_trans: np.ndarray | None = None, grad: np.ndarray | None = None) -> np.ndarray:
    """Reverse-mode pass of ``render_image``.

    ``d_image`` is dL/dC per pixel (H, W, 3), ``d_trans`` dL/dT_K per pixel.
    Returns (or accumulates into) the (N, 4) parameter gradient.
    """
    if out.topology_version != grid.topology_version:
        raise RuntimeError("grid topology changed since this render")
    n = len(grid)
    if grad is None:
        grad = np.zeros((n, 4))
    dC_all = np.asarray(d_image, dtype=np.float64).reshape(-1, 3)
    dT_all = (np.zeros(len(dC_all)) if d_trans is None
              else np.asarray(d_trans, dtype=np.float64).reshape(-1))
    idx_parts, gc_parts, ga_parts = [], [], []
    for b in out.blocks:
        R, K = b.vox.shape
        dC = dC_all[b.rays]
        dT = dT_all[b.rays]
        behind = np.broadcast_to(BACKGROUND, (R, 3)).copy()
        through = np.ones(R)
        g_col = np.empty((R, K, 3))
        g_op = np.empty((R, K))
        for k in range(K - 1, -1, -1):
            a = b.alpha[:, k]
            c = b.color[:, k]
            g_col[:, k] = b.weight[:, k, None] * dC * c * (1.0 - c)
            d_alpha = b.t_before[:, k] * (np.einsum("ij,ij->i", dC, c - behind) - dT * through)
            g_op[:, k] = d_alpha * a * (1.0 - a)
            behind = a[:, None] * c + (1.0 - a)[:, None] * behind
            through = through * (1.0 - a)
        valid = b.vox >= 0
        idx_parts.append(b.vox[valid])
        gc_parts.append(g_col[valid])
        ga_parts.append(g_op[valid])
    if not idx_parts:
        return grad
    idx = np.concatenate(idx_parts)
    gc = np.concatenate(gc_parts)
    ga = np.concatenate(ga_parts)
    for ch in range(3):
        grad[:, ch] += np.bincount(idx, gc[:, ch], minlength=n)
    grad[:, 3] += np.bincount(idx, ga, minlength=n)
    return grad
