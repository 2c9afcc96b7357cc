"""Losses and the training loops (image VAE, then video VAE)."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import LatentPosterior, ModelConfig, VideoVAE
from .errors import ConfigurationError, ShapeError
from .io import LossLog, checkpoint_from_model

DEFAULT_MAE_WEIGHT = 1.0
DEFAULT_KL_WEIGHT = 1e-6


@dataclass
class TrainConfig:
    stage: str = "video"  # image | video
    steps: int = 1000
    batch: int = 1
    resolution: tuple = (64, 64)
    frames: int = 17
    lr: float = 1e-4
    loss_weights: Optional[dict] = None  # mae / kl / perceptual; None -> defaults
    seed: int = 0
    deterministic: bool = False
    adversarial_weight: float = 0.0

    def __post_init__(self):
        self.resolution = tuple(self.resolution)
        self.validate()

    def validate(self):
        if self.stage not in ("image", "video"):
            raise ConfigurationError(f"stage must be image or video, got {self.stage!r}")
        if self.stage == "image" and self.frames != 1:
            raise ConfigurationError("image training uses frames == 1")
        if self.stage == "video" and (self.frames - 1) % 4:
            raise ConfigurationError(f"video frames must be 1 (mod 4), got {self.frames}")
        if self.steps < 0 or self.batch < 1 or self.lr <= 0:
            raise ConfigurationError("steps >= 0, batch >= 1 and lr > 0 required")
        for k, v in (self.loss_weights or {}).items():
            if k not in ("mae", "kl", "perceptual"):
                raise ConfigurationError(f"unknown loss weight {k!r}")
            if v < 0:
                raise ConfigurationError(f"loss weight {k} must be non-negative")
        if self.adversarial_weight < 0:
            raise ConfigurationError("adversarial weight must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def weights(self, extractor=None) -> dict:
        w = {"mae": DEFAULT_MAE_WEIGHT, "kl": DEFAULT_KL_WEIGHT,
             "perceptual": 1.0 if extractor is not None else 0.0}
        w.update(self.loss_weights or {})
        return w


def load_yaml_config(path) -> dict:
    """YAML file with optional ``model:`` and ``train:`` sections."""
    import yaml

    with open(path) as f:
        doc = yaml.safe_load(f) or {}
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: expected a mapping")
    return doc


# --------------------------------------------------------------------------
# Losses


def mae_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return (x - y).abs().mean()


def kl_loss(p: LatentPosterior) -> torch.Tensor:
    # expm1 keeps e^v - 1 - v from cancelling below zero for small v
    return 0.5 * (p.mean.pow(2) + torch.expm1(p.logvar) - p.logvar).mean()


class RandomConvExtractor(nn.Module):
    """Frozen, seeded random convolution stack; a stand-in feature network
    for the perceptual term.  Maps ``[N, 3, H, W]`` to a list of features."""

    def __init__(self, widths=(8, 16), seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers, c = [], 3
        for w in widths:
            conv = nn.Conv2d(c, w, 3, padding=1, stride=1 if not layers else 2)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / (9 * c)) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            c = w
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for conv in self.layers:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


def _frames(v: torch.Tensor) -> torch.Tensor:
    b, c, t, h, w = v.shape
    return v.permute(0, 2, 1, 3, 4).reshape(b * t, c, h, w)


def perceptual_loss(x, y, extractor) -> torch.Tensor:
    """Mean squared feature distance, per frame, averaged over layers."""
    if extractor is None:
        raise ConfigurationError("perceptual loss needs a feature extractor")
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() == 4:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    fx, fy = extractor(_frames(x)), extractor(_frames(y))
    return torch.stack([(a - b).pow(2).mean() for a, b in zip(fx, fy)]).mean()


def loss_terms(x, y, p: LatentPosterior, weights: dict, extractor=None,
               adversarial: Optional[Callable] = None, adversarial_weight: float = 0.0) -> dict:
    """Weighted loss and its parts (``mae``, ``kl``, ``perceptual``, ``total``)."""
    mae = mae_loss(x, y)
    kl = kl_loss(p)
    if weights.get("perceptual", 0.0) > 0:
        perc = perceptual_loss(x, y, extractor)
    else:
        perc = torch.zeros((), dtype=mae.dtype, device=mae.device)
    total = weights["mae"] * mae + weights["kl"] * kl + weights.get("perceptual", 0.0) * perc
    if adversarial_weight > 0:
        if adversarial is None:
            raise ConfigurationError("adversarial weight set without an adversarial hook")
        total = total + adversarial_weight * adversarial(x, y)
    return {"mae": mae, "kl": kl, "perceptual": perc, "total": total}


def total_loss(x, y, p: LatentPosterior, cfg: TrainConfig, extractor=None) -> torch.Tensor:
    return loss_terms(x, y, p, cfg.weights(extractor), extractor)["total"]


# --------------------------------------------------------------------------
# Training loops


@dataclass
class TrainResult:
    model: VideoVAE
    history: list  # one dict of floats per step

    def checkpoint(self, meta: Optional[dict] = None):
        return checkpoint_from_model(self.model, meta)

    def losses(self, key: str = "total") -> np.ndarray:
        return np.array([h[key] for h in self.history])


def set_determinism(seed: int, deterministic: bool):
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _train(model: VideoVAE, data, cfg: TrainConfig, extractor=None, log_path=None,
           adversarial: Optional[Callable] = None, on_step: Optional[Callable] = None) -> TrainResult:
    set_determinism(cfg.seed, cfg.deterministic)
    weights = cfg.weights(extractor)
    if weights["perceptual"] > 0 and extractor is None:
        raise ConfigurationError("perceptual weight > 0 but no extractor is registered")
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    log = LossLog(log_path) if log_path else None
    history = []
    model.train()
    for step in range(cfg.steps):
        x = data.next_batch(cfg.batch).to(dtype)
        if tuple(x.shape[2:]) != (cfg.frames, *cfg.resolution):
            raise ShapeError(f"batch {tuple(x.shape)} does not match frames/resolution of the config")
        y, post = model(x, generator=gen)
        terms = loss_terms(x, y, post, weights, extractor, adversarial, cfg.adversarial_weight)
        opt.zero_grad(set_to_none=True)
        terms["total"].backward()
        opt.step()
        row = {"step": step, **{k: float(v.detach()) for k, v in terms.items()}}
        history.append(row)
        if log:
            log.append(row)
        if on_step:
            on_step(row)
    model.eval()
    return TrainResult(model, history)


def train_image_vae(data, cfg: TrainConfig, model_config: Optional[ModelConfig] = None,
                    model: Optional[VideoVAE] = None, **kw) -> TrainResult:
    if cfg.stage != "image":
        raise ConfigurationError("train_image_vae needs stage == image")
    if model is None:
        torch.manual_seed(cfg.seed)
        model = VideoVAE(model_config or ModelConfig(variant="image", z=4))
    if model.config.variant != "image":
        raise ConfigurationError("train_image_vae trains an image-variant model")
    return _train(model, data, cfg, **kw)


def train_video_vae(data, init: VideoVAE, cfg: TrainConfig, **kw) -> TrainResult:
    if cfg.stage != "video":
        raise ConfigurationError("train_video_vae needs stage == video")
    if init.config.variant == "image":
        raise ConfigurationError("initialize a video variant first (inflate or KTC init)")
    return _train(init, data, cfg, **kw)


def smoothed(values, window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


# --------------------------------------------------------------------------
# Gradient check


def gradient_check(model: VideoVAE, x: torch.Tensor, n_coords: int = 100, h: float = 1e-6,
                   seed: int = 0, extractor=None, weights: Optional[dict] = None) -> dict:
    """Compare autograd parameter gradients of the total loss with central
    differences at ``n_coords`` random coordinates (run in float64)."""
    model = model.double()
    x = x.double()
    if weights is None:
        weights = TrainConfig(frames=x.shape[2] if (x.shape[2] - 1) % 4 == 0 else 1,
                              stage="video" if (x.shape[2] - 1) % 4 == 0 else "image").weights(extractor)
    if extractor is not None:
        extractor = extractor.double()
    noise_seed = seed + 1

    def loss():
        g = torch.Generator().manual_seed(noise_seed)
        y, post = model(x, generator=g)
        return loss_terms(x, y, post, weights, extractor)["total"]

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=n_coords, replace=False)
    bounds = np.cumsum(sizes)
    analytic, numeric = [], []
    with torch.no_grad():
        for f in flat:
            i = int(np.searchsorted(bounds, f, side="right"))
            j = int(f - (bounds[i - 1] if i else 0))
            p = params[i].view(-1)
            g = params[i].grad.view(-1)[j].item()
            old = p[j].item()
            p[j] = old + h
            lp = loss().item()
            p[j] = old - h
            lm = loss().item()
            p[j] = old
            analytic.append(g)
            numeric.append((lp - lm) / (2 * h))
    a, n = np.array(analytic), np.array(numeric)
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return {"analytic": a, "numeric": n, "rel_error": rel, "max_rel_error": float(rel.max())}
