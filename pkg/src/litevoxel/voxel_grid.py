"""Sparse octree of cube voxels stored as flat parameter/statistic arrays.

Voxels are identified by ``(level, i, j, k)`` where ``(i, j, k)`` is the
integer cell coordinate at that level.  Only leaves are stored; ancestors are
implicit.  Parameters live in one ``(N, 4)`` array (three color logits and
one opacity logit) so the optimizer can update them in place.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CHECKPOINT_VERSION = 1
BYTES_PER_SCALAR = 4
PARAMS_PER_VOXEL = 4
# trainable scalars + two optimizer moments per scalar
BYTES_PER_VOXEL = BYTES_PER_SCALAR * PARAMS_PER_VOXEL * 3

Key = tuple[int, int, int, int]


class SplitError(RuntimeError):
    """Raised when splitting a voxel already at the finest level."""


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


class Voxel:
    """Live view onto one stored voxel; attribute writes go to the grid."""

    __slots__ = ("_grid", "key")

    def __init__(self, grid: "VoxelGrid", key: Key):
        self._grid = grid
        self.key = key

    @property
    def _i(self) -> int:
        return self._grid.index_of(self.key)

    @property
    def level(self) -> int:
        return self.key[0]

    @property
    def center(self) -> np.ndarray:
        return self._grid.centers()[self._i]

    @property
    def half_size(self) -> float:
        return self._grid.half_size(self.level)

    @property
    def color(self) -> np.ndarray:
        return sigmoid(self._grid.params[self._i, :3])

    @property
    def alpha(self) -> float:
        return float(sigmoid(self._grid.params[self._i, 3]))

    @property
    def color_params(self) -> np.ndarray:
        return self._grid.params[self._i, :3]

    @color_params.setter
    def color_params(self, value):
        self._grid.params[self._i, :3] = value

    @property
    def opacity_param(self) -> float:
        return float(self._grid.params[self._i, 3])

    @opacity_param.setter
    def opacity_param(self, value):
        self._grid.params[self._i, 3] = value

    def _stat(name):
        def get(self):
            return getattr(self._grid, name)[self._i].item()

        def set_(self, value):
            getattr(self._grid, name)[self._i] = value

        return property(get, set_)

    w_max = _stat("w_max")
    usefulness = _stat("usefulness")
    inside_ema = _stat("inside_ema")
    inside = _stat("inside")
    del _stat

    @property
    def inside_state(self) -> str:
        return "in" if self.inside else "out"

    @inside_state.setter
    def inside_state(self, value: str):
        if value not in ("in", "out"):
            raise ValueError("inside_state must be 'in' or 'out'")
        self.inside = value == "in"

    def __repr__(self):
        return f"Voxel(key={self.key}, alpha={self.alpha:.4g}, w_max={self.w_max:.4g})"


class VoxelGrid:
    """Sparse voxel octree over a cubic scene box.

    Level ``l`` voxels have half-size ``h0 * 2**-l`` where ``h0`` is the
    half-extent of the scene box.
    """

    _arrays = ("keys", "params", "w_max", "usefulness", "inside_ema", "inside",
               "resid_sum", "resid_count")

    def __init__(self, bounds, l_max: int = 10):
        lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bounds)
        ext = hi - lo
        if np.any(ext <= 0):
            raise ValueError("scene bounds must have positive extent")
        if not np.allclose(ext, ext[0], rtol=1e-12, atol=0):
            raise ValueError("scene bounds must be a cube")
        if l_max < 0:
            raise ValueError("l_max must be >= 0")
        self.lo, self.hi = lo, hi
        self.l_max = int(l_max)
        self.h0 = float(ext[0]) / 2.0
        self.keys = np.zeros((0, 4), dtype=np.int64)
        self.params = np.zeros((0, 4))
        self.w_max = np.zeros(0)
        self.usefulness = np.zeros(0)
        self.inside_ema = np.zeros(0)
        self.inside = np.zeros(0, dtype=bool)
        # per-window residual accumulators filled by the renderer
        self.resid_sum = np.zeros(0)
        self.resid_count = np.zeros(0)
        self._index: dict[Key, int] = {}
        self._centers: np.ndarray | None = None
        self._internal: set[Key] | None = None
        self.topology_version = 0

    # -- basic access ------------------------------------------------------

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lo, self.hi

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key) -> bool:
        return tuple(key) in self._index

    def __getitem__(self, key) -> Voxel:
        key = tuple(int(v) for v in key)
        if key not in self._index:
            raise KeyError(f"no voxel {key}")
        return Voxel(self, key)

    def index_of(self, key) -> int:
        try:
            return self._index[tuple(key)]
        except KeyError:
            raise KeyError(f"no voxel {tuple(key)}") from None

    def key_list(self) -> list[Key]:
        return [tuple(k) for k in self.keys.tolist()]

    def half_size(self, level: int) -> float:
        return self.h0 * 2.0 ** -int(level)

    def half_sizes(self) -> np.ndarray:
        return self.h0 * np.exp2(-self.keys[:, 0].astype(np.float64))

    def centers(self) -> np.ndarray:
        if self._centers is None:
            edge = 2.0 * self.half_sizes()
            self._centers = self.lo + (self.keys[:, 1:] + 0.5) * edge[:, None]
        return self._centers

    def alphas(self) -> np.ndarray:
        return sigmoid(self.params[:, 3])

    def colors(self) -> np.ndarray:
        return sigmoid(self.params[:, :3])

    def key_for(self, center, level: int) -> Key:
        """Integer key of the level-``level`` cell containing ``center``."""
        edge = 2.0 * self.h0 * 2.0 ** -level
        ijk = np.floor((np.asarray(center, dtype=np.float64) - self.lo) / edge)
        return (int(level), *(int(v) for v in ijk))

    def box_of(self, key) -> tuple[np.ndarray, np.ndarray]:
        level = key[0]
        edge = 2.0 * self.h0 * 2.0 ** -level
        lo = self.lo + np.asarray(key[1:], dtype=np.float64) * edge
        return lo, lo + edge

    # -- topology ----------------------------------------------------------

    def _touch(self):
        self._index = {k: i for i, k in enumerate(self.key_list())}
        self._centers = None
        self._internal = None
        self.topology_version += 1

    def _append(self, keys: np.ndarray, params: np.ndarray, inside: np.ndarray):
        n = len(keys)
        self.keys = np.concatenate([self.keys, keys.astype(np.int64)])
        self.params = np.concatenate([self.params, params])
        for name in ("w_max", "usefulness", "inside_ema", "resid_sum", "resid_count"):
            setattr(self, name, np.concatenate([getattr(self, name), np.zeros(n)]))
        self.inside = np.concatenate([self.inside, inside.astype(bool)])

    def _keep(self, mask: np.ndarray):
        for name in self._arrays:
            setattr(self, name, getattr(self, name)[mask])

    def add_voxels(self, keys, params=None, inside=None):
        """Insert leaves. Caller is responsible for the non-overlap invariant."""
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 4)
        if np.any(keys[:, 0] > self.l_max) or np.any(keys[:, 0] < 0):
            raise ValueError("voxel level outside [0, l_max]")
        side = np.left_shift(1, keys[:, 0])
        if np.any(keys[:, 1:] < 0) or np.any(keys[:, 1:] >= side[:, None]):
            raise ValueError("voxel key outside scene bounds")
        seen = set()
        for k in map(tuple, keys.tolist()):
            if k in self._index or k in seen:
                raise ValueError(f"voxel {k} already stored")
            seen.add(k)
        n = len(keys)
        params = np.zeros((n, 4)) if params is None else np.asarray(params, float).reshape(n, 4)
        inside = np.ones(n, dtype=bool) if inside is None else np.asarray(inside, bool).reshape(n)
        self._append(keys, params, inside)
        self._touch()

    def internal_nodes(self) -> set[Key]:
        """Strict ancestors of every stored leaf."""
        if self._internal is None:
            nodes = set()
            for level, i, j, k in self.key_list():
                while level > 0:
                    level, i, j, k = level - 1, i >> 1, j >> 1, k >> 1
                    if (level, i, j, k) in nodes:
                        break
                    nodes.add((level, i, j, k))
            self._internal = nodes
        return self._internal

    def reset_window(self):
        """Clear per-window statistics (max weights and residual sums)."""
        self.w_max[:] = 0.0
        self.resid_sum[:] = 0.0
        self.resid_count[:] = 0.0

    def copy(self) -> "VoxelGrid":
        g = VoxelGrid((self.lo, self.hi), self.l_max)
        for name in self._arrays:
            setattr(g, name, getattr(self, name).copy())
        g._touch()
        return g

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        voxels = []
        for i, k in enumerate(self.key_list()):
            voxels.append({
                "level": k[0],
                "key": list(k[1:]),
                "color_params": [float(v) for v in self.params[i, :3]],
                "opacity_param": float(self.params[i, 3]),
                "w_max": float(self.w_max[i]),
                "usefulness": float(self.usefulness[i]),
                "inside_ema": float(self.inside_ema[i]),
                "inside_state": "in" if self.inside[i] else "out",
            })
        return {
            "version": CHECKPOINT_VERSION,
            "bounds": [self.lo.tolist(), self.hi.tolist()],
            "l_max": self.l_max,
            "voxels": voxels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelGrid":
        for field in ("version", "bounds", "l_max", "voxels"):
            if field not in d:
                raise ValueError(f"checkpoint missing field {field!r}")
        if d["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d['version']}")
        g = cls(d["bounds"], d["l_max"])
        vox = d["voxels"]
        n = len(vox)
        keys = np.array([[v["level"], *v["key"]] for v in vox], dtype=np.int64).reshape(n, 4)
        params = np.array([[*v["color_params"], v["opacity_param"]] for v in vox],
                          dtype=np.float64).reshape(n, 4)
        states = [v["inside_state"] for v in vox]
        if any(s not in ("in", "out") for s in states):
            raise ValueError("inside_state must be 'in' or 'out'")
        g.add_voxels(keys, params, np.array([s == "in" for s in states], dtype=bool))
        g.w_max[:] = [v["w_max"] for v in vox]
        g.usefulness[:] = [v["usefulness"] for v in vox]
        g.inside_ema[:] = [v["inside_ema"] for v in vox]
        check_non_overlap(g)
        return g

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "VoxelGrid":
        return cls.from_dict(json.loads(Path(path).read_text()))


def check_non_overlap(grid: VoxelGrid) -> None:
    """Raise if a stored voxel is an ancestor of another stored voxel."""
    internal = grid.internal_nodes()
    clash = [k for k in grid.key_list() if k in internal]
    if clash:
        raise ValueError(f"overlapping voxels, e.g. {clash[0]}")


def init_uniform(bounds, level: int, alpha0: float = 0.1, color0=(0.5, 0.5, 0.5),
                 l_max: int = 10) -> VoxelGrid:
    """Dense grid of all 8**level cells at ``level``."""
    if level > l_max:
        raise ValueError(f"level {level} exceeds l_max {l_max}")
    if level < 0:
        raise ValueError("level must be >= 0")
    if not 0.0 < alpha0 < 1.0:
        raise ValueError("alpha0 must lie in (0, 1)")
    grid = VoxelGrid(bounds, l_max)
    side = 1 << level
    ijk = np.stack(np.meshgrid(*(np.arange(side),) * 3, indexing="ij"), -1).reshape(-1, 3)
    keys = np.concatenate([np.full((len(ijk), 1), level), ijk], axis=1)
    params = np.empty((len(keys), 4))
    params[:, :3] = logit(np.clip(np.asarray(color0, dtype=np.float64), 1e-6, 1 - 1e-6))
    params[:, 3] = logit(alpha0)
    grid.add_voxels(keys, params)
    return grid


_OCTANTS = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)], dtype=np.int64)


def child_keys(key) -> list[Key]:
    level, i, j, k = key
    return [(level + 1, 2 * i + a, 2 * j + b, 2 * k + c) for a, b, c in _OCTANTS.tolist()]


def split_voxels(grid: VoxelGrid, keys: Sequence) -> list[list[Key]]:
    """Split every voxel in ``keys`` into its eight children.

    Parents are removed and children appended in parent order.  Children
    inherit the parent's parameters and inside state; their statistics
    start from zero.
    """
    keys = [tuple(int(v) for v in k) for k in keys]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate voxel in split list")
    rows = []
    for k in keys:
        if k not in grid._index:
            raise KeyError(f"no voxel {k}")
        if k[0] >= grid.l_max:
            raise SplitError(f"voxel {k} is at the finest level {grid.l_max}")
        rows.append(grid._index[k])
    if not rows:
        return []
    rows = np.asarray(rows)
    parents = grid.keys[rows]
    params = np.repeat(grid.params[rows], 8, axis=0)
    inside = np.repeat(grid.inside[rows], 8)
    kids = np.repeat(parents, 8, axis=0)
    kids[:, 0] += 1
    kids[:, 1:] = kids[:, 1:] * 2 + np.tile(_OCTANTS, (len(rows), 1))
    keep = np.ones(len(grid), dtype=bool)
    keep[rows] = False
    grid._keep(keep)
    grid._append(kids, params, inside)
    grid._touch()
    kid_list = [tuple(k) for k in kids.tolist()]
    return [kid_list[8 * n:8 * n + 8] for n in range(len(rows))]


def split_voxel(grid: VoxelGrid, key) -> list[Key]:
    """Split one voxel; returns the eight child keys."""
    return split_voxels(grid, [key])[0]


def remove_voxels(grid: VoxelGrid, keys: Iterable) -> int:
    """Remove the listed voxels; unknown keys are skipped.

    Returns the number removed; ``len(set(keys)) - removed`` were unknown.
    """
    rows = {grid._index[k] for k in (tuple(int(v) for v in key) for key in keys)
            if k in grid._index}
    if not rows:
        return 0
    keep = np.ones(len(grid), dtype=bool)
    keep[list(rows)] = False
    grid._keep(keep)
    grid._touch()
    return len(rows)


def model_bytes(grid: VoxelGrid) -> int:
    """Parameter plus optimizer-moment bytes (48 per voxel)."""
    return len(grid) * BYTES_PER_VOXEL


def face_neighbor_pairs(grid: VoxelGrid) -> np.ndarray:
    """Row index pairs ``(a, b)`` of same-level voxels sharing a face.

    Each unordered pair appears once, ``b`` being the +x/+y/+z neighbor of
    ``a``.  Cached per topology version.
    """
    cached = getattr(grid, "_pairs_cache", None)
    if cached is not None and cached[0] == grid.topology_version:
        return cached[1]
    index = grid._index
    pairs = []
    for a, (level, i, j, k) in enumerate(grid.key_list()):
        for nb in ((level, i + 1, j, k), (level, i, j + 1, k), (level, i, j, k + 1)):
            b = index.get(nb)
            if b is not None:
                pairs.append((a, b))
    out = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    grid._pairs_cache = (grid.topology_version, out)
    return out


def ceil_count(fraction: float, n: int) -> int:
    """``ceil(fraction * n)`` robust to float noise like 0.07 * 100."""
    return int(math.ceil(round(fraction * n, 9)))
