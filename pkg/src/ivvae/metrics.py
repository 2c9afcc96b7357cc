"""Reconstruction quality metrics.

Videos are ``[C, T, H, W]`` or ``[B, C, T, H, W]`` arrays (numpy or torch)
on the [0, 1] scale; :func:`evaluate` accepts model-scale [-1, 1] videos and
rescales them first.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidFrameCountError, ShapeError, UndefinedMetricError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
# per-frame PSNR cap used only when some (not all) frames match exactly
PSNR_FRAME_CAP = 100.0


def _to_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _pair(x, y):
    x, y = _to_numpy(x), _to_numpy(y)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 4:
        x, y = x[None], y[None]
    if x.ndim != 5:
        raise ShapeError(f"expected [C,T,H,W] or [B,C,T,H,W], got {x.shape}")
    return x, y


def luma(v: np.ndarray) -> np.ndarray:
    """``[B, C, T, H, W]`` -> ``[B, T, H, W]``; single-channel input passes through."""
    if v.shape[1] == 1:
        return v[:, 0]
    if v.shape[1] != 3:
        raise ShapeError(f"expected 1 or 3 channels, got {v.shape[1]}")
    return np.tensordot(LUMA_WEIGHTS, v, axes=([0], [1]))


def psnr_frames(x, y) -> np.ndarray:
    """PSNR in dB of every frame, shape ``[B, T]`` (inf for exact frames)."""
    x, y = _pair(x, y)
    mse = ((x - y) ** 2).mean(axis=(1, 3, 4))
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(1.0 / mse)


def psnr(x, y) -> float:
    """Mean over frames of per-frame PSNR; ``inf`` when every frame matches."""
    frames = psnr_frames(x, y)
    if np.all(np.isinf(frames)):
        return math.inf
    return float(np.minimum(frames, PSNR_FRAME_CAP).mean())


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Valid-mode separable filtering over the last two axes."""
    rows = sliding_window_view(img, g.size, axis=-1) @ g
    return sliding_window_view(rows, g.size, axis=-2) @ g


def ssim_frames(x, y) -> np.ndarray:
    """Luma SSIM of every frame, shape ``[B, T]``."""
    x, y = _pair(x, y)
    a, b = luma(x), luma(y)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"frames {a.shape[-2:]} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    var_a = _filter(a * a, g) - mu_a ** 2
    var_b = _filter(b * b, g) - mu_b ** 2
    cov = _filter(a * b, g) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return s.mean(axis=(-2, -1))


def ssim(x, y) -> float:
    return float(ssim_frames(x, y).mean())


def info_preservation(x, y) -> float:
    """``1 - sum|x - y| / sum|x|`` over all elements."""
    x, y = _to_numpy(x), _to_numpy(y)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    denom = np.abs(x).sum()
    if denom == 0:
        raise UndefinedMetricError("information preservation is undefined for an all-zero reference")
    return float(1.0 - np.abs(x - y).sum() / denom)


def position_indices(T: int, t_c: int = 4) -> list[list[int]]:
    """Frame indices at each within-group position (frame 0 excluded)."""
    if T < 1 + t_c or (T - 1) % t_c:
        raise InvalidFrameCountError(f"frame count {T} is not 1 + {t_c}*G with G >= 1")
    return [list(range(1 + p, T, t_c)) for p in range(t_c)]


def per_position_ssim(x, y, t_c: int = 4) -> list[float]:
    frames = ssim_frames(x, y)
    return [float(frames[:, idx].mean()) for idx in position_indices(frames.shape[1], t_c)]


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    info_preservation: float
    per_position_ssim: Optional[list]
    sample_count: int
    psnr_mode: str = "mean of per-frame dB"
    value_scale: str = "[0, 1]"
    fvd: Optional[float] = None
    lpips: Optional[float] = None
    video_id: Optional[str] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.psnr):
            d["psnr"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        if d.get("psnr") == "inf":
            d["psnr"] = math.inf
        return cls(**d)


def to_unit_range(v):
    return (_to_numpy(v) + 1.0) / 2.0


def evaluate(x, y, t_c: int = 4, signed: bool = True, video_id: Optional[str] = None) -> MetricsReport:
    """All metrics for one reference/reconstruction pair.  ``signed`` videos
    are on the [-1, 1] model scale and are mapped to [0, 1] first."""
    if signed:
        x, y = to_unit_range(x), to_unit_range(y)
    x, y = _pair(x, y)
    T = x.shape[2]
    pps = per_position_ssim(x, y, t_c) if T > t_c and (T - 1) % t_c == 0 else None
    return MetricsReport(
        psnr=psnr(x, y), ssim=ssim(x, y), info_preservation=info_preservation(x, y),
        per_position_ssim=pps, sample_count=x.shape[0], video_id=video_id,
    )


def aggregate(reports: Iterable[MetricsReport]) -> MetricsReport:
    reports = list(reports)
    if not reports:
        raise UndefinedMetricError("no reports to aggregate")
    w = np.array([r.sample_count for r in reports], dtype=np.float64)

    def mean(vals):
        return float(np.average(np.asarray(vals, dtype=np.float64), weights=w))

    pps = None
    if all(r.per_position_ssim is not None for r in reports):
        pps = list(np.average(np.array([r.per_position_ssim for r in reports]), axis=0, weights=w))
        pps = [float(v) for v in pps]
    return MetricsReport(
        psnr=mean([r.psnr for r in reports]), ssim=mean([r.ssim for r in reports]),
        info_preservation=mean([r.info_preservation for r in reports]),
        per_position_ssim=pps, sample_count=int(w.sum()), video_id="aggregate",
    )


def write_report(path, reports: list[MetricsReport]):
    """JSON document with one record per video plus the aggregate."""
    doc = {"videos": [r.to_dict() for r in reports], "aggregate": aggregate(reports).to_dict()}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
    return doc


def read_report(path) -> tuple[list[MetricsReport], MetricsReport]:
    with open(path) as f:
        doc = json.load(f)
    return [MetricsReport.from_dict(d) for d in doc["videos"]], MetricsReport.from_dict(doc["aggregate"])
