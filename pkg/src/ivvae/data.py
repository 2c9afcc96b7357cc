"""Data sources: synthetic moving shapes and clips read from disk.

Every source hands out ``[B, 3, T, H, W]`` tensors in [-1, 1].
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import DataError


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int = 4) -> np.ndarray:
    """Low-frequency texture: bilinear upsampling of a coarse random grid."""
    g = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0, cells, h, endpoint=False) + cells / (2 * h)
    xs = np.linspace(0, cells, w, endpoint=False) + cells / (2 * w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    y1, x1 = np.minimum(y0 + 1, cells), np.minimum(x0 + 1, cells)
    return (g[np.ix_(y0, x0)] * (1 - fy) * (1 - fx) + g[np.ix_(y1, x0)] * fy * (1 - fx)
            + g[np.ix_(y0, x1)] * (1 - fy) * fx + g[np.ix_(y1, x1)] * fy * fx)


def moving_shapes_clip(rng: np.random.Generator, frames: int, height: int, width: int,
                       n_shapes: int = 3, max_speed: float = 2.0) -> np.ndarray:
    """One clip ``[3, T, H, W]`` in [-1, 1]: textured background and
    soft-edged discs and boxes moving at constant velocity (wrapping)."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    bg_color = rng.uniform(0.1, 0.9, size=3)
    tex = _smooth_noise(rng, height, width)
    base = bg_color[:, None, None] * (0.6 + 0.4 * tex)[None]
    shapes = []
    for _ in range(n_shapes):
        r = rng.uniform(0.08, 0.2) * min(height, width)
        shapes.append(dict(
            kind=rng.integers(2), color=rng.uniform(0, 1, size=3),
            pos=np.array([rng.uniform(0, height), rng.uniform(0, width)]),
            vel=rng.uniform(-max_speed, max_speed, size=2), r=r,
        ))
    out = np.empty((3, frames, height, width))
    for t in range(frames):
        img = base.copy()
        for s in shapes:
            cy, cx = s["pos"] + t * s["vel"]
            dy = (yy - cy + height / 2) % height - height / 2
            dx = (xx - cx + width / 2) % width - width / 2
            if s["kind"] == 0:
                d = np.hypot(dy, dx) - s["r"]
            else:
                d = np.maximum(np.abs(dy), np.abs(dx)) - s["r"]
            alpha = np.clip(0.5 - d, 0.0, 1.0)
            img = img * (1 - alpha) + s["color"][:, None, None] * alpha
        out[:, t] = img
    return out * 2.0 - 1.0


class SyntheticVideos:
    """Endless (or ``limit``-sample) seeded stream of moving-shape clips.

    With ``frames == 1`` the clips are single images."""

    def __init__(self, frames: int, size: tuple[int, int], seed: int = 0,
                 limit: Optional[int] = None, n_shapes: int = 3, max_speed: float = 2.0,
                 dtype: torch.dtype = torch.float32):
        self.frames = frames
        self.size = tuple(size)
        self.rng = np.random.default_rng(seed)
        self.limit = limit
        self.served = 0
        self.n_shapes = n_shapes
        self.max_speed = max_speed
        self.dtype = dtype

    def next_batch(self, batch: int) -> torch.Tensor:
        if self.limit is not None and self.served + batch > self.limit:
            raise DataError(f"data source exhausted after {self.served} samples")
        clips = [moving_shapes_clip(self.rng, self.frames, *self.size, self.n_shapes, self.max_speed)
                 for _ in range(batch)]
        self.served += batch
        return torch.from_numpy(np.stack(clips)).to(self.dtype)


class FileVideos:
    """Clips read from raw video files / PNG directories, each cut to the
    first ``frames`` frames; served once, in order."""

    def __init__(self, paths: Sequence, frames: int, dtype: torch.dtype = torch.float32):
        self.paths = list(paths)
        self.frames = frames
        self.pos = 0
        self.dtype = dtype

    def next_batch(self, batch: int) -> torch.Tensor:
        from .io import read_video

        if self.pos + batch > len(self.paths):
            raise DataError(f"data source exhausted after {self.pos} of {len(self.paths)} files")
        clips = []
        for p in self.paths[self.pos:self.pos + batch]:
            v = read_video(p)
            if v.shape[1] < self.frames:
                raise DataError(f"{p}: {v.shape[1]} frames, need {self.frames}")
            clips.append(v[:, :self.frames])
        self.pos += batch
        if len({c.shape for c in clips}) != 1:
            raise DataError("clips in one batch differ in size")
        return torch.from_numpy(np.stack(clips)).to(self.dtype)


def data_source_from_dir(path, frames: int):
    p = Path(path)
    entries = sorted(q for q in p.iterdir() if q.suffix == ".ivv" or q.is_dir())
    if not entries:
        raise DataError(f"{path}: no .ivv files or frame directories")
    return FileVideos(entries, frames)
