"""Shared builders and the acceptance-summary hook."""

from __future__ import annotations

import numpy as np
import pytest

from litevoxel.geometry import Camera, look_at
from litevoxel.voxel_grid import VoxelGrid, init_uniform, split_voxels

UNIT = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def ring_cameras(n=4, radius=3.0, height=0.7, size=8, focal=None):
    """``n`` cameras on a ring around the origin, all looking at it."""
    focal = size * 1.2 if focal is None else focal
    cams = []
    for i in range(n):
        ang = 2 * np.pi * i / n + 0.3
        eye = np.array([radius * np.cos(ang), height, radius * np.sin(ang)])
        cams.append(Camera(size, size, focal, focal, size / 2, size / 2, look_at(eye, np.zeros(3))))
    return cams


def random_grid(rng, max_voxels=50, level=1, bounds=UNIT, l_max=4, drop=0.3):
    """Random leaf set: uniform start, random splits and removals, random params."""
    grid = init_uniform(bounds, level, l_max=l_max)
    for _ in range(int(rng.integers(0, 4))):
        keys = grid.key_list()
        pick = [k for k in keys if k[0] < l_max and rng.random() < 0.15]
        if pick and len(grid) + 7 * len(pick) <= max_voxels * 3:
            split_voxels(grid, pick)
    keys = grid.key_list()
    keep = [k for k in keys if rng.random() > drop]
    if len(keep) > max_voxels:
        idx = rng.choice(len(keep), max_voxels, replace=False)
        keep = [keep[i] for i in sorted(idx)]
    out = VoxelGrid(bounds, l_max)
    params = rng.normal(0.0, 1.5, (len(keep), 4))
    out.add_voxels(np.array(keep, dtype=np.int64).reshape(-1, 4), params,
                   rng.random(len(keep)) < 0.5)
    return out


def spread_alphas(grid, rng, lo=0.05, hi=0.95):
    """Distinct opacities at least ``(hi - lo) / N`` apart.

    Keeps TV pairs away from the smoothing knee, where an h = 1e-4 central
    difference is itself inaccurate.
    """
    a = rng.permutation(np.linspace(lo, hi, len(grid)))
    grid.params[:, 3] = np.log(a) - np.log1p(-a)
    return grid


def central_diff(f, x, h=1e-4):
    """Central finite differences of scalar ``f`` at every entry of ``x`` (in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
