"""Synthetic box scenes and their analytic ground-truth renders.

The tracer here composites whole boxes (one opacity per box crossing) and is
deliberately independent of ``VoxelGrid`` and the rasterizer, so it can act
as an end-to-end reference.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera, camera_rays, look_at
from .io import Dataset, save_dataset


@dataclass
class BoxPrimitive:
    min: tuple[float, float, float]
    max: tuple[float, float, float]
    color: tuple[float, float, float]
    opacity: float = 1.0


@dataclass
class CameraRing:
    count: int = 16
    radius: float = 3.0
    height: float = 1.0
    look_at: tuple[float, float, float] = (0.0, -0.2, 0.0)


@dataclass
class SceneSpec:
    boxes: list[BoxPrimitive] = field(default_factory=list)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    ring: CameraRing = field(default_factory=CameraRing)
    width: int = 64
    height: int = 64
    focal: float = 64.0
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    supersample: int = 1   # n x n subsamples averaged per pixel
    noise_std: float = 0.0  # additive Gaussian sensor noise, clipped to [0, 1]
    noise_seed: int = 0

    def __post_init__(self):
        self.boxes = [b if isinstance(b, BoxPrimitive) else BoxPrimitive(**b) for b in self.boxes]
        if not isinstance(self.ring, CameraRing):
            self.ring = CameraRing(**self.ring)
        if self.ring.count < 1:
            raise ValueError("camera ring needs at least one camera")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        for b in self.boxes:
            bmin, bmax = np.asarray(b.min), np.asarray(b.max)
            if np.any(bmin >= bmax):
                raise ValueError(f"box {b} has non-positive extent")
            if np.any(bmin < lo) or np.any(bmax > hi):
                raise ValueError(f"box {b} leaves the scene bounds")
            if not 0.0 <= b.opacity <= 1.0:
                raise ValueError("box opacity must lie in [0, 1]")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def cameras(self) -> list[Camera]:
        r = self.ring
        target = np.asarray(r.look_at, dtype=np.float64)
        cams = []
        for i in range(r.count):
            ang = 2.0 * math.pi * i / r.count
            eye = target + np.array([r.radius * math.cos(ang), r.height, r.radius * math.sin(ang)])
            cams.append(Camera(self.width, self.height, self.focal, self.focal,
                               self.width / 2.0, self.height / 2.0, look_at(eye, target)))
        return cams

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def three_box_scene(**overrides) -> SceneSpec:
    """Platform carrying a red block with a translucent blue block on top.

    All outer faces lie on the level-3 lattice of the unit scene.  The
    red/blue seam sits at y = -1/8, halfway through a level-3 cell, so the
    coarse grid blends the two colours there and one level of subdivision
    resolves it.  The blue block has opacity 0.6, so its flat faces show
    the red block through it.
    """
    boxes = [
        BoxPrimitive((-0.5, -0.75, -0.5), (0.5, -0.5, 0.5), (0.85, 0.75, 0.55)),
        BoxPrimitive((-0.25, -0.5, -0.25), (0.25, -0.125, 0.25), (0.9, 0.2, 0.2)),
        BoxPrimitive((-0.25, -0.125, -0.25), (0.25, 0.25, 0.25), (0.2, 0.4, 0.9), 0.6),
    ]
    return SceneSpec(boxes=boxes, **overrides)


def _trace_boxes(spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    H, W = dirs.shape[:2]
    bg = np.asarray(spec.background, dtype=np.float64)
    if not spec.boxes:
        return np.broadcast_to(bg, (H, W, 3)).copy()
    entries, alphas = [], []
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for b in spec.boxes:
        t0 = (np.asarray(b.min) - origin) * inv
        t1 = (np.asarray(b.max) - origin) * inv
        tn = np.maximum(np.minimum(t0, t1).max(-1), 0.0)
        tf = np.maximum(t0, t1).min(-1)
        hit = tf > tn
        entries.append(np.where(hit, tn, np.inf))
        alphas.append(np.where(hit, b.opacity, 0.0))
    entries = np.stack(entries)
    alphas = np.stack(alphas)
    colors = np.array([b.color for b in spec.boxes], dtype=np.float64)
    order = np.argsort(entries, axis=0, kind="stable")
    img = np.zeros((H, W, 3))
    T = np.ones((H, W))
    for k in range(len(spec.boxes)):
        idx = order[k]
        a = np.take_along_axis(alphas, idx[None], 0)[0]
        img += (T * a)[..., None] * colors[idx]
        T *= 1.0 - a
    return img + T[..., None] * bg


def render_boxes(spec: SceneSpec, camera: Camera) -> np.ndarray:
    """Analytic front-to-back composite of the spec's boxes for every pixel.

    With ``supersample = n`` each pixel averages an n x n grid of sub-pixel
    rays, which anti-aliases silhouettes and colour seams.
    """
    n = spec.supersample
    subs = (np.arange(n) + 0.5) / n
    img = None
    for oy in subs:
        for ox in subs:
            origin, dirs = camera_rays(camera, (ox, oy))
            part = _trace_boxes(spec, origin, dirs)
            img = part if img is None else img + part
    return img / (n * n)


def synthesize(spec: SceneSpec) -> Dataset:
    cams = spec.cameras()
    images = [render_boxes(spec, c) for c in cams]
    if spec.noise_std > 0:
        rng = np.random.default_rng(spec.noise_seed)
        images = [np.clip(img + rng.normal(0.0, spec.noise_std, img.shape), 0.0, 1.0)
                  for img in images]
    return Dataset(cams, images)


def synth(spec: SceneSpec, out_dir) -> Dataset:
    """Render the spec and write ``cameras.json`` plus PPM views to ``out_dir``."""
    ds = synthesize(spec)
    save_dataset(ds, out_dir)
    (Path(out_dir) / "scene.json").write_text(json.dumps(spec.to_dict(), indent=1))
    return ds
