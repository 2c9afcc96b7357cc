"""Desk-scale training experiments behind the two trend checks.

* Frame-position balance: train a causal and a group-causal single-branch
  model from scratch and compare how evenly SSIM is spread over the four
  positions of a frame group.
* Initialization: train an image VAE with Z/2 and one with Z latent
  channels; start an iv-vae from the first (KTC init) and a causal video
  model from the second (same-Z inflation); compare smoothed training loss.

Both take hours to days on a CPU at the stated step counts.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .autoencoder import ModelConfig, VideoVAE
from .data import SyntheticVideos
from .ktc import inflate_image_vae, init_ktc_from_image_vae
from .metrics import per_position_ssim, to_unit_range
from .streaming import single_reconstruct
from .training import TrainConfig, smoothed, train_image_vae, train_video_vae


def evaluate_positions(model: VideoVAE, clips: torch.Tensor) -> list[float]:
    recon = single_reconstruct(clips, model)
    return per_position_ssim(to_unit_range(clips), to_unit_range(recon))


def position_balance_run(variant: str, seed: int, steps: int, base_channels: int = 16,
                         size=(64, 64), frames: int = 17, batch: int = 1, eval_clips: int = 8,
                         z: int = 8, on_step: Optional[Callable] = None) -> dict:
    torch.manual_seed(seed)
    model = VideoVAE(ModelConfig(variant=variant, z=z, base_channels=base_channels))
    cfg = TrainConfig(stage="video", steps=steps, batch=batch, resolution=size, frames=frames, seed=seed)
    result = train_video_vae(SyntheticVideos(frames, size, seed=seed), model, cfg, on_step=on_step)
    held_out = SyntheticVideos(frames, size, seed=10_000 + seed).next_batch(eval_clips)
    pos = evaluate_positions(result.model, held_out)
    return {"variant": variant, "seed": seed, "per_position": pos, "std": float(np.std(pos)),
            "final_loss": float(smoothed(result.losses())[-1]) if steps else None}


def position_balance(seeds: Sequence[int] = (0, 1, 2), steps: int = 20_000, **kw) -> dict:
    """Seed-averaged std of the per-position SSIM for each variant."""
    out = {}
    for variant in ("baseline-causal", "baseline-gc"):
        runs = [position_balance_run(variant, s, steps, **kw) for s in seeds]
        out[variant] = {"runs": runs, "mean_std": float(np.mean([r["std"] for r in runs]))}
    return out


def init_comparison_run(seed: int, steps: int, image_steps: int, z: int = 8, base_channels: int = 16,
                        size=(64, 64), frames: int = 17, batch: int = 1, window: int = 100) -> dict:
    image_cfg = TrainConfig(stage="image", steps=image_steps, batch=batch, resolution=size, frames=1, seed=seed)
    video_cfg = TrainConfig(stage="video", steps=steps, batch=batch, resolution=size, frames=frames, seed=seed)
    out = {}
    for name, variant, init in (
        ("ktc", "iv-vae", init_ktc_from_image_vae),  # image VAE with Z/2
        ("inflate", "baseline-causal", inflate_image_vae),  # image VAE with Z
    ):
        cfg = ModelConfig(variant=variant, z=z, base_channels=base_channels)
        image = train_image_vae(SyntheticVideos(1, size, seed=seed), image_cfg,
                                model_config=cfg.image_config()).model
        model = init(image, cfg)
        result = train_video_vae(SyntheticVideos(frames, size, seed=seed + 1), model, video_cfg)
        out[name] = float(smoothed(result.losses(), window)[-1])
    return out


def init_comparison(seeds: Sequence[int] = (0, 1, 2), steps: int = 20_000, image_steps: int = 5_000,
                    **kw) -> dict:
    runs = [init_comparison_run(s, steps, image_steps, **kw) for s in seeds]
    return {"runs": runs,
            "ktc": float(np.mean([r["ktc"] for r in runs])),
            "inflate": float(np.mean([r["inflate"] for r in runs]))}
