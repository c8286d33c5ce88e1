"""Adam over per-voxel parameter rows, kept aligned with the grid topology."""

from __future__ import annotations

import numpy as np

from .voxel_grid import VoxelGrid


class ConsistencyError(RuntimeError):
    """Optimizer state and grid topology disagree."""


class Adam:
    """Adam with a per-row step counter and per-column learning rates.

    Rows follow the grid's voxel order.  After pruning or splitting,
    ``refresh_after_topology`` drops removed rows and appends zeroed rows for
    new children in the same order the grid does.
    """

    def __init__(self, keys: np.ndarray, lr=(2e-2, 2e-2, 2e-2, 5e-2),
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, width: int = 4):
        self.keys = np.asarray(keys, dtype=np.int64).reshape(-1, 4).copy()
        n = len(self.keys)
        self.lr = np.broadcast_to(np.asarray(lr, dtype=np.float64), (width,)).copy()
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros((n, width))
        self.v = np.zeros((n, width))
        self.t = np.zeros(n, dtype=np.int64)
        self._row = {tuple(k): i for i, k in enumerate(self.keys.tolist())}

    @classmethod
    def for_grid(cls, grid: VoxelGrid, lr_color: float = 2e-2, lr_opacity: float = 5e-2,
                 **kw) -> "Adam":
        return cls(grid.keys, lr=(lr_color,) * 3 + (lr_opacity,), **kw)

    def __len__(self):
        return len(self.keys)

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        """Update ``params`` in place and return it."""
        if params.shape != grads.shape or params.shape != self.m.shape:
            raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, "
                             f"state {self.m.shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1.0 - b1) * grads
        self.v *= b2
        self.v += (1.0 - b2) * (grads * grads)
        bc1 = 1.0 - b1 ** self.t[:, None]
        bc2 = 1.0 - b2 ** self.t[:, None]
        params -= self.lr * (self.m / bc1) / (np.sqrt(self.v / bc2) + self.eps)
        return params

    def _drop(self, keys):
        rows = []
        for k in keys:
            k = tuple(k)
            if k not in self._row:
                raise ConsistencyError(f"optimizer has no state for voxel {k}")
            rows.append(self._row[k])
        keep = np.ones(len(self.keys), dtype=bool)
        keep[rows] = False
        self.keys, self.m, self.v, self.t = (a[keep] for a in (self.keys, self.m, self.v, self.t))

    def _add(self, keys):
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 4)
        n = len(keys)
        self.keys = np.concatenate([self.keys, keys])
        self.m = np.concatenate([self.m, np.zeros((n, self.m.shape[1]))])
        self.v = np.concatenate([self.v, np.zeros((n, self.v.shape[1]))])
        self.t = np.concatenate([self.t, np.zeros(n, dtype=np.int64)])

    def _reindex(self):
        self._row = {tuple(k): i for i, k in enumerate(self.keys.tolist())}

    def refresh_after_topology(self, split_report=None, prune_report=None) -> None:
        """Apply one adapt step's prune then split to the state rows."""
        if prune_report is not None and prune_report.removed:
            self._drop(prune_report.removed)
            self._reindex()
        if split_report is not None and split_report.split:
            self._drop(split_report.split)
            self._add(split_report.children)
            self._reindex()

    def check_aligned(self, grid: VoxelGrid) -> None:
        if not np.array_equal(self.keys, grid.keys):
            raise ConsistencyError("optimizer rows are not aligned with the grid")


def refresh_after_topology(state: Adam, split_report=None, prune_report=None) -> None:
    state.refresh_after_topology(split_report, prune_report)
