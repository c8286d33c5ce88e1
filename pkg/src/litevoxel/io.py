"""Binary PPM (P6) images and the on-disk dataset layout.

A dataset directory holds ``cameras.json`` and ``images/view_%04d.ppm``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Camera, load_cameras, save_cameras


class PPMError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class DataError(ValueError):
    pass


def _header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PPMError("truncated header", start)
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise PPMError(f"unsupported magic {buf[:2]!r}, only binary P6 is read", 0)
    pos = 2
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PPMError("expected whitespace after magic", pos)
    vals, starts = [], []
    for name in ("width", "height", "maxval"):
        tok, end = _header_token(buf, pos)
        if not tok.isdigit():
            raise PPMError(f"bad {name} {tok!r}", end - len(tok))
        vals.append(int(tok))
        starts.append(end - len(tok))
        pos = end
    width, height, maxval = vals
    if width < 1 or height < 1:
        raise PPMError("image dimensions must be positive", starts[0] if width < 1 else starts[1])
    if maxval != 255:
        raise PPMError(f"maxval {maxval} unsupported, expected 255", starts[2])
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PPMError("expected single whitespace before pixel data", pos)
    pos += 1
    need = width * height * 3
    if len(buf) - pos < need:
        raise PPMError(f"pixel data truncated: need {need} bytes, have {len(buf) - pos}", pos)
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(height, width, 3).astype(np.float64) / 255.0


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an H x W x 3 image")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + data.tobytes()


def read_ppm(path) -> np.ndarray:
    """H x W x 3 float image with values byte/255."""
    return decode_ppm(Path(path).read_bytes())


def write_ppm(image: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_ppm(image))


@dataclass
class Dataset:
    cameras: list[Camera]
    images: list[np.ndarray]

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise DataError(f"{len(self.cameras)} cameras but {len(self.images)} images")
        for i, (cam, img) in enumerate(zip(self.cameras, self.images)):
            if img.shape != (cam.height, cam.width, 3):
                raise DataError(f"view {i}: image {img.shape[1]}x{img.shape[0]} does not match "
                                f"camera {cam.width}x{cam.height}")

    def __len__(self):
        return len(self.cameras)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.cameras[i] for i in indices], [self.images[i] for i in indices])

    def split(self, holdout_every: int = 8) -> tuple[list[int], list[int]]:
        """(train, test) view indices; every ``holdout_every``-th view is held out."""
        test = [i for i in range(len(self)) if holdout_every and i % holdout_every == 0]
        train = [i for i in range(len(self)) if i not in test]
        return train, test


def image_path(root, i: int) -> Path:
    return Path(root) / "images" / f"view_{i:04d}.ppm"


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    save_cameras(ds.cameras, root / "cameras.json")
    for i, img in enumerate(ds.images):
        write_ppm(img, image_path(root, i))


def load_dataset(root) -> Dataset:
    root = Path(root)
    cam_file = root / "cameras.json"
    if not cam_file.exists():
        raise DataError(f"{cam_file} not found")
    try:
        cameras = load_cameras(cam_file)
    except (ValueError, KeyError, TypeError) as e:
        raise DataError(f"{cam_file}: {e}") from e
    images = []
    for i in range(len(cameras)):
        p = image_path(root, i)
        if not p.exists():
            raise DataError(f"{p} not found")
        images.append(read_ppm(p))
    return Dataset(cameras, images)
