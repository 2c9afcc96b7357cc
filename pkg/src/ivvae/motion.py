"""Optical-flow motion scores and motion-uniform dataset curation.

Flow convention: ``a(p) ~= b(p + (u, v))``, i.e. ``(u, v)`` is where the
content of ``a`` at ``p`` moved to in ``b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError, ShapeError
from .flowkernels import block_match

SCORE_SIZE = (432, 768)  # (H, W) every frame is resized to before scoring
DEFAULT_BINS = (0.0, 2.0, 4.0, 6.0, 8.0, 12.0, 20.0, math.inf)


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ShapeError(f"flow components must be equal 2-D arrays, got {self.u.shape}, {self.v.shape}")

    @property
    def shape(self):
        return self.u.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@dataclass
class MotionRecord:
    video_id: str
    score: float
    frame_interval: int = 1

    def __post_init__(self):
        if not self.score >= 0:
            raise InvalidInputError(f"motion score must be >= 0, got {self.score}")


FlowEstimator = Callable[[np.ndarray, np.ndarray], FlowField]


# --------------------------------------------------------------------------
# Image helpers


def to_luma(frame) -> np.ndarray:
    f = frame.detach().cpu().numpy() if hasattr(frame, "detach") else np.asarray(frame)
    f = f.astype(np.float64)
    if f.ndim == 3:
        if f.shape[0] == 1:
            return f[0]
        if f.shape[0] != 3:
            raise ShapeError(f"expected [3,H,W] or [H,W], got {f.shape}")
        return 0.299 * f[0] + 0.587 * f[1] + 0.114 * f[2]
    if f.ndim != 2:
        raise ShapeError(f"expected [3,H,W] or [H,W], got {f.shape}")
    return f


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize (half-pixel centers, no antialiasing) of ``[..., H, W]``."""
    if tuple(img.shape[-2:]) == tuple(size):
        return np.array(img, dtype=np.float64)
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64))
    lead = t.shape[:-2]
    t = t.reshape(1, -1, *t.shape[-2:])
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out.reshape(*lead, *size).numpy()


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    p = np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")
    return 0.25 * (p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2])


def _block_grid_to_pixels(bf: np.ndarray, shape, block: int) -> np.ndarray:
    """Bilinear interpolation of per-block values (located at block centers)
    onto the pixel grid, clamped at the borders."""
    h, w = shape
    ys = (np.arange(h) + 0.5) / block - 0.5
    xs = (np.arange(w) + 0.5) / block - 0.5
    nby, nbx = bf.shape

    def axis(c, n):
        c = np.clip(c, 0, n - 1)
        i0 = np.minimum(np.floor(c).astype(int), n - 1)
        i1 = np.minimum(i0 + 1, n - 1)
        return i0, i1, c - i0

    y0, y1, fy = axis(ys, nby)
    x0, x1, fx = axis(xs, nbx)
    top = bf[y0][:, x0] * (1 - fx) + bf[y0][:, x1] * fx
    bot = bf[y1][:, x0] * (1 - fx) + bf[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


# --------------------------------------------------------------------------
# Flow


class BlockMatchingEstimator:
    """Coarse-to-fine block matching: ``levels`` pyramid levels, ``block``
    pixel blocks, integer search of +-``radius`` around the upsampled coarse
    prediction, zero-mean normalized SAD cost."""

    def __init__(self, levels: int = 3, block: int = 16, radius: int = 4):
        if levels < 1 or block < 1 or radius < 0:
            raise ValueError("levels, block must be >= 1 and radius >= 0")
        self.levels = levels
        self.block = block
        self.radius = radius

    def _match_level(self, a, b, pred_u, pred_v):
        blk, r = self.block, self.radius
        h, w = a.shape
        nby, nbx = -(-h // blk), -(-w // blk)
        apad = np.pad(a, ((0, nby * blk - h), (0, nbx * blk - w)), mode="edge")
        cy = np.minimum(np.arange(nby) * blk + blk // 2, h - 1)
        cx = np.minimum(np.arange(nbx) * blk + blk // 2, w - 1)
        pu = np.rint(pred_u[np.ix_(cy, cx)]).astype(np.int64)
        pv = np.rint(pred_v[np.ix_(cy, cx)]).astype(np.int64)
        reach = int(max(np.abs(pu).max(initial=0), np.abs(pv).max(initial=0))) + r
        pad = reach + blk
        bpad = np.pad(b, ((pad, pad + nby * blk - h), (pad, pad + nbx * blk - w)), mode="edge")
        bu, bv = block_match(apad, bpad, pu, pv, blk, r, pad)
        shape = (h, w)
        return (_block_grid_to_pixels(bu.astype(np.float64), shape, blk),
                _block_grid_to_pixels(bv.astype(np.float64), shape, blk))

    def __call__(self, a: np.ndarray, b: np.ndarray) -> FlowField:
        pa, pb = [a], [b]
        for _ in range(self.levels - 1):
            pa.append(_downsample2(pa[-1]))
            pb.append(_downsample2(pb[-1]))
        u = np.zeros(pa[-1].shape)
        v = np.zeros(pa[-1].shape)
        for lvl in range(self.levels - 1, -1, -1):
            shape = pa[lvl].shape
            if u.shape != shape:
                u = 2.0 * resize_bilinear(u, shape)
                v = 2.0 * resize_bilinear(v, shape)
            u, v = self._match_level(pa[lvl], pb[lvl], u, v)
        return FlowField(u, v)


class FlowFileEstimator:
    """Replays externally computed flow files, one per call, in order."""

    def __init__(self, paths: Sequence):
        self.paths = list(paths)
        self.calls = 0

    def __call__(self, a, b) -> FlowField:
        from .io import read_flow

        if self.calls >= len(self.paths):
            raise InvalidInputError("ran out of flow files")
        flow = read_flow(self.paths[self.calls])
        self.calls += 1
        if flow.shape != a.shape:
            raise ShapeError(f"flow file is {flow.shape}, frames are {a.shape}")
        return flow


def estimate_flow(a, b, estimator: Optional[FlowEstimator] = None) -> FlowField:
    a, b = to_luma(a), to_luma(b)
    if a.shape != b.shape:
        raise ShapeError(f"frame shapes differ: {a.shape} vs {b.shape}")
    est = estimator if estimator is not None else BlockMatchingEstimator()
    return est(a, b)


def motion_score(x, frame_interval: int = 1, estimator: Optional[FlowEstimator] = None,
                 size: tuple[int, int] = SCORE_SIZE) -> float:
    """Mean flow magnitude over all pixels of all frame pairs
    ``(i, i + frame_interval)``, measured at ``size`` (H, W)."""
    v = x.detach().cpu().numpy() if hasattr(x, "detach") else np.asarray(x)
    if v.ndim != 4:
        raise ShapeError(f"expected video [C,T,H,W], got {v.shape}")
    T = v.shape[1]
    if frame_interval < 1:
        raise InvalidInputError("frame interval must be >= 1")
    if T <= frame_interval:
        raise InvalidInputError(f"need more than {frame_interval} frames, got {T}")
    frames = resize_bilinear(np.stack([to_luma(v[:, t]) for t in range(T)]), size)
    mags = [estimate_flow(frames[i], frames[i + frame_interval], estimator).magnitude().mean()
            for i in range(T - frame_interval)]
    return float(np.mean(mags))


# --------------------------------------------------------------------------
# Curation


def bin_index(score: float, edges: Sequence[float]) -> int:
    for i in range(len(edges) - 1):
        if edges[i] <= score < edges[i + 1]:
            return i
    if score == edges[-1]:
        return len(edges) - 2
    raise InvalidInputError(f"score {score} is outside the bin edges {list(edges)}")


def allocate_quotas(counts: Sequence[int], n: int) -> list[int]:
    """Per-bin draw counts: ``n // B`` each, the remainder to the lowest bins,
    then each bin's shortfall handed to the nearest bins with spare records
    (lower bin first on ties)."""
    counts = list(counts)
    nb = len(counts)
    if n > sum(counts):
        raise InvalidInputError(f"cannot select {n} of {sum(counts)} records")
    quota = [n // nb + (1 if i < n % nb else 0) for i in range(nb)]
    take = [min(q, c) for q, c in zip(quota, counts)]
    shortfalls = [q - t for q, t in zip(quota, take)]
    for i in range(nb):
        short = shortfalls[i]
        for d in range(1, nb):
            if short == 0:
                break
            for j in (i - d, i + d):
                if 0 <= j < nb and short:
                    extra = min(short, counts[j] - take[j])
                    take[j] += extra
                    short -= extra
    return take


def curate_uniform(records: Sequence[MotionRecord], bins: Sequence[float] = DEFAULT_BINS,
                   n: int = 2000, seed: int = 0) -> list[str]:
    edges = list(bins)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise InvalidInputError(f"bin edges must be increasing, got {edges}")
    ids = [r.video_id for r in records]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("video ids must be unique")
    members: list[list[str]] = [[] for _ in range(len(edges) - 1)]
    for r in sorted(records, key=lambda r: r.video_id):
        members[bin_index(r.score, edges)].append(r.video_id)
    take = allocate_quotas([len(m) for m in members], n)
    rng = np.random.default_rng(seed)
    chosen = []
    for m, k in zip(members, take):
        if k:
            chosen.extend(m[i] for i in rng.choice(len(m), size=k, replace=False))
    return sorted(chosen)
