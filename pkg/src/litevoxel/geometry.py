"""Pinhole cameras, primary rays and the per-depth ray footprint."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

CAMERA_FIELDS = ("width", "height", "fx", "fy", "cx", "cy", "world_to_camera")


@dataclass
class Camera:
    """Pinhole camera looking down +z of its own frame (x right, y down).

    ``world_to_camera`` is a 4x4 rigid transform mapping world points into
    camera coordinates.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.width = int(self.width)
        self.height = int(self.height)
        self.fx, self.fy = float(self.fx), float(self.fy)
        self.cx, self.cy = float(self.cx), float(self.cy)
        m = np.asarray(self.world_to_camera, dtype=np.float64)
        if m.size == 16:
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise ValueError(f"world_to_camera must be 4x4, got shape {m.shape}")
        self.world_to_camera = m
        if self.width < 1 or self.height < 1:
            raise ValueError("camera width and height must be >= 1")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        rot = m[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6, rtol=0):
            raise ValueError("rotation block of world_to_camera is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "world_to_camera": [float(v) for v in self.world_to_camera.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        missing = [k for k in CAMERA_FIELDS if k not in d]
        if missing:
            raise ValueError(f"camera entry missing fields: {missing}")
        w2c = d["world_to_camera"]
        if len(w2c) != 16:
            raise ValueError("world_to_camera must hold 16 numbers (row-major)")
        return cls(d["width"], d["height"], d["fx"], d["fy"], d["cx"], d["cy"],
                   np.asarray(w2c, dtype=np.float64).reshape(4, 4))


class Ray(NamedTuple):
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int]


def pixel_ray(camera: Camera, x: int, y: int) -> Ray:
    """Ray from the camera center through the center of pixel (x, y)."""
    if not (0 <= x < camera.width and 0 <= y < camera.height):
        raise ValueError(f"pixel ({x}, {y}) outside {camera.width}x{camera.height} image")
    d_cam = np.array([(x + 0.5 - camera.cx) / camera.fx,
                      (y + 0.5 - camera.cy) / camera.fy,
                      1.0])
    d = camera.rotation.T @ d_cam
    return Ray(camera.center, d / np.linalg.norm(d), (int(x), int(y)))


def camera_rays(camera: Camera, offset=(0.5, 0.5)) -> tuple[np.ndarray, np.ndarray]:
    """All primary rays of ``camera``: origin (3,) and unit directions (H, W, 3).

    ``offset`` is the sample position inside each pixel; the default is the
    pixel center.
    """
    xs = (np.arange(camera.width) + offset[0] - camera.cx) / camera.fx
    ys = (np.arange(camera.height) + offset[1] - camera.cy) / camera.fy
    d_cam = np.empty((camera.height, camera.width, 3))
    d_cam[..., 0] = xs[None, :]
    d_cam[..., 1] = ys[:, None]
    d_cam[..., 2] = 1.0
    d = d_cam @ camera.rotation  # row-vector form of R^T d
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return camera.center, d


def camera_depth(camera: Camera, p) -> np.ndarray | float:
    """Camera-space z of world point(s) ``p`` (shape (3,) or (N, 3))."""
    p = np.asarray(p, dtype=np.float64)
    z = p @ camera.rotation[2] + camera.translation[2]
    return float(z) if z.ndim == 0 else z


def inter_ray_spacing(camera: Camera, z) -> np.ndarray | float:
    """World-space distance between adjacent pixel rays at depth ``z``."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("inter-ray spacing needs positive depth")
    d = z / min(camera.fx, camera.fy)
    return float(d) if d.ndim == 0 else d


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``.

    The camera's y axis points opposite to ``up`` (image rows grow downward).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise ValueError("up vector is parallel to viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    m = np.eye(4)
    m[:3, :3] = np.stack([right, down, fwd])
    m[:3, 3] = -m[:3, :3] @ eye
    return m


def save_cameras(cameras: Iterable[Camera], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


def load_cameras(path) -> list[Camera]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise ValueError("cameras.json must hold a JSON array")
    return [Camera.from_dict(d) for d in data]


def voxel_depths(cameras: Sequence[Camera], centers: np.ndarray) -> np.ndarray:
    """Camera-space depth of every center in every camera, shape (n_cams, N)."""
    if len(cameras) == 0:
        return np.zeros((0, len(centers)))
    return np.stack([camera_depth(c, centers) for c in cameras])


def min_footprint(cameras: Sequence[Camera], centers: np.ndarray) -> np.ndarray:
    """Smallest inter-ray spacing over cameras in front of each center.

    Centers behind every camera get ``inf``.
    """
    delta = np.full(len(centers), np.inf)
    for cam in cameras:
        z = camera_depth(cam, centers)
        ok = z > 0
        d = np.where(ok, z, np.inf) / min(cam.fx, cam.fy)
        delta = np.minimum(delta, d)
    return delta


def depth_proxy(cameras: Sequence[Camera], centers: np.ndarray) -> np.ndarray:
    """Mean camera depth over the cameras whose image contains each center.

    Falls back to the distance to the nearest camera center for points no
    camera sees.
    """
    n = len(centers)
    total = np.zeros(n)
    count = np.zeros(n)
    for cam in cameras:
        pc = centers @ cam.rotation.T + cam.translation
        z = pc[:, 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        u = cam.fx * pc[:, 0] / zs + cam.cx
        v = cam.fy * pc[:, 1] / zs + cam.cy
        seen = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        total += np.where(seen, z, 0.0)
        count += seen
    out = np.empty(n)
    seen_any = count > 0
    out[seen_any] = total[seen_any] / count[seen_any]
    if not np.all(seen_any):
        eyes = np.stack([c.center for c in cameras])
        dist = np.linalg.norm(centers[~seen_any, None, :] - eyes[None], axis=-1)
        out[~seen_any] = dist.min(axis=1)
    return out
