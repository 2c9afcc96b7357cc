"""Keyframe-based temporal compression: the dual 2D/3D unit, output frame
selection, and initialization of a video model from a trained image VAE."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .convops import (
    Context,
    FeatureMap,
    FrameGrouping,
    RMSNorm,
    TemporalConv,
    _as_batched,
    frame_conv,
    group_conv,
    inflate_conv2d,
    rms_normalize,
    selector_weight,
)
from .errors import IncompatibleCheckpointError, ShapeError


class DualConv(nn.Module):
    """Per-frame 2D convolution and (group-causal) 3D convolution in
    parallel, each producing half of ``c_out``; outputs concatenated as
    ``[2D | 3D]``.

    With ``mode3d='2d'`` the second branch is also per-frame (the stage after
    a frame group has been merged into one compressed frame).
    """

    def __init__(self, c_in, c_out, k=3, k_t=3, mode3d="gc", s_stride=1, split_in=True):
        super().__init__()
        if c_out % 2:
            raise ShapeError(f"dual convolution needs an even output width, got {c_out}")
        self.split_in = split_in
        self.conv2d = TemporalConv(c_in, c_out // 2, (1, k, k), "2d", s_stride=s_stride)
        kt = 1 if mode3d == "2d" else k_t
        self.conv3d = TemporalConv(c_in, c_out // 2, (kt, k, k), mode3d, s_stride=s_stride)

    def forward(self, x, ctx: Context):
        return torch.cat([self.conv2d(x, ctx), self.conv3d(x, ctx)], dim=1)


class KTCUnit(nn.Module):
    """Dual convolution followed by a separate RMS norm per branch."""

    def __init__(self, c_in, c_out, k=3, k_t=3, mode3d="gc"):
        super().__init__()
        self.conv = DualConv(c_in, c_out, k, k_t, mode3d)
        self.norm = RMSNorm(c_out, groups=2)

    def forward(self, x, ctx: Context):
        return self.norm(self.conv(x, ctx))


@dataclass
class KtcUnitParams:
    conv2d_weights: torch.Tensor  # [Cout/2, Cin, kh, kw]
    gcconv3d_weights: torch.Tensor  # [Cout/2, Cin, kt, kh, kw]
    norm2d_gain: torch.Tensor
    norm3d_gain: torch.Tensor
    stage: str = "full-3d"  # full-3d | compressed-2d
    conv2d_bias: Optional[torch.Tensor] = None
    gcconv3d_bias: Optional[torch.Tensor] = None

    def __post_init__(self):
        half = self.conv2d_weights.shape[0]
        if self.gcconv3d_weights.shape[0] != half:
            raise ShapeError("both branches must output C_out/2 channels")
        if self.norm2d_gain.numel() != half or self.norm3d_gain.numel() != half:
            raise ShapeError("norm gains must have C_out/2 entries")
        if self.stage not in ("full-3d", "compressed-2d"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage == "compressed-2d" and self.gcconv3d_weights.shape[2] != 1:
            raise ShapeError("compressed-2d stage needs a k_t == 1 kernel in the 3D branch")


def ktc_unit_forward(fm: FeatureMap, params: KtcUnitParams) -> FeatureMap:
    x, squeeze = _as_batched(fm.data)
    w2 = params.conv2d_weights.unsqueeze(2)
    if x.shape[1] != w2.shape[1]:
        raise ShapeError(f"unit expects {w2.shape[1]} channels, got {x.shape[1]}")
    a = frame_conv(x, w2, params.conv2d_bias)
    if params.stage == "compressed-2d":
        b = frame_conv(x, params.gcconv3d_weights, params.gcconv3d_bias)
    else:
        b, _, _ = group_conv(x, params.gcconv3d_weights, params.gcconv3d_bias, fm.grouping.lengths)
    y = torch.cat([rms_normalize(a, params.norm2d_gain), rms_normalize(b, params.norm3d_gain)], dim=1)
    return FeatureMap(y[0] if squeeze else y, fm.grouping)


# --------------------------------------------------------------------------
# Output selection


def keyframe_indices(lengths: Sequence[int]) -> list[int]:
    out, s = [], 0
    for n in lengths:
        out.append(s)
        s += n
    return out


def select_frames(out2d: torch.Tensor, out3d: torch.Tensor, lengths: Sequence[int], time_dim: int = 2):
    if out2d.shape != out3d.shape:
        raise ShapeError(f"branch outputs differ in shape: {tuple(out2d.shape)} vs {tuple(out3d.shape)}")
    t = out2d.shape[time_dim]
    if sum(lengths) != t:
        raise ShapeError(f"grouping covers {sum(lengths)} frames, outputs have {t}")
    mask = torch.zeros(t, dtype=torch.bool, device=out2d.device)
    mask[keyframe_indices(lengths)] = True
    view = [1] * out2d.dim()
    view[time_dim] = t
    return torch.where(mask.view(view), out2d, out3d)


def select_output_frames(out2d: torch.Tensor, out3d: torch.Tensor, grouping: FrameGrouping) -> torch.Tensor:
    """Keyframes (first frame of every group) from the 2D branch, all other
    frames from the 3D branch.  Videos are ``[C, T, H, W]`` or batched."""
    time_dim = 1 if out2d.dim() == 4 else 2
    return select_frames(out2d, out3d, grouping.lengths, time_dim)


# --------------------------------------------------------------------------
# Initialization from an image VAE


def _tap_for(conv: TemporalConv, placement: str) -> int:
    kt = conv.kernel[0]
    if placement == "auto":
        # the tap that sees the output frame itself
        return kt - 1 if conv.mode == "causal" else kt // 2
    return kt - 1 if placement == "tail" else kt // 2


def _inflate(w_img: torch.Tensor, conv: TemporalConv, placement: str) -> torch.Tensor:
    w2d = w_img[:, :, 0]
    kt = conv.kernel[0]
    if kt == 1:
        return w2d.unsqueeze(2).clone()
    tap = _tap_for(conv, placement)
    return inflate_conv2d(w2d, kt, "tail" if tap == kt - 1 else "center")


def _block_diag(w: torch.Tensor, split_in: bool) -> torch.Tensor:
    co, ci = w.shape[:2]
    if split_in:
        out = w.new_zeros(2 * co, 2 * ci, *w.shape[2:])
        out[:co, :ci] = w
        out[co:, ci:] = w
    else:
        out = w.new_zeros(2 * co, ci, *w.shape[2:])
        out[:co] = w
        out[co:] = w
    return out


def _copy_conv(dst: TemporalConv, src: TemporalConv, placement: str, dual: bool, split_in: bool = True):
    w = _inflate(src.weight.data, dst, placement)
    if dual:
        w = _block_diag(w, split_in)
    _assign(dst.weight, w)
    if dst.bias is not None:
        b = src.bias.data
        _assign(dst.bias, torch.cat([b, b]) if dual else b)


def _assign(param: torch.nn.Parameter, value: torch.Tensor):
    if param.shape != value.shape:
        raise IncompatibleCheckpointError(
            f"parameter shape {tuple(param.shape)} cannot take image weights of shape {tuple(value.shape)}"
        )
    param.data.copy_(value.to(param.dtype))


def _copy_dual(dst: DualConv, src: TemporalConv, placement: str):
    w = src.weight.data
    zeros = w.new_zeros(w.shape)
    w2 = torch.cat([w, zeros], dim=1) if dst.split_in else w
    w3 = _inflate(w, dst.conv3d, placement)
    w3 = torch.cat([torch.zeros_like(w3), w3], dim=1) if dst.split_in else w3
    _assign(dst.conv2d.weight, w2)
    _assign(dst.conv3d.weight, w3)
    if src.bias is not None:
        _assign(dst.conv2d.bias, src.bias.data)
        _assign(dst.conv3d.bias, src.bias.data)


def _image_modules(image_model) -> dict:
    return dict(image_model.named_modules())


def _check_image_config(image_cfg, cfg, z_expected: int):
    if image_cfg.variant != "image":
        raise IncompatibleCheckpointError(f"expected an image VAE, got variant {image_cfg.variant!r}")
    if image_cfg.z != z_expected:
        raise IncompatibleCheckpointError(
            f"image VAE has {image_cfg.z} latent channels; {z_expected} required"
        )
    for field in ("base_channels", "channel_multipliers", "attention_count", "pac_rates",
                  "enc_res_blocks", "dec_res_blocks", "channel_shrink"):
        if getattr(image_cfg, field) != getattr(cfg, field):
            raise IncompatibleCheckpointError(
                f"image VAE {field}={getattr(image_cfg, field)!r} does not match {getattr(cfg, field)!r}"
            )


def _init_temporal_layers(model):
    """Selector init for temporal down/up layers; see ``TemporalDown`` /
    ``TemporalUp`` for the tap choices."""
    from .autoencoder import TemporalDown, TemporalUp

    for m in model.modules():
        if isinstance(m, (TemporalDown, TemporalUp)):
            conv = m.conv
            c = conv.weight.shape[0]
            taps = m.selector_taps(c)
            conv.weight.data.copy_(selector_weight(c, conv.kernel[0], taps, dtype=conv.weight.dtype))
            conv.bias.data.zero_()


def _load_checkpoint_model(ckpt):
    from .autoencoder import VideoVAE

    if isinstance(ckpt, VideoVAE):
        return ckpt
    from .io import Checkpoint, model_from_checkpoint

    if isinstance(ckpt, Checkpoint):
        return model_from_checkpoint(ckpt)
    raise TypeError(f"cannot read an image VAE from {type(ckpt).__name__}")


@torch.no_grad()
def init_ktc_from_image_vae(ckpt, config):
    """Build an iv-vae model whose two branches both start as copies of an
    image VAE with ``Z/2`` latent channels.

    At step 0 the 2D branch reconstructs every keyframe and the 3D branch the
    third frame of each group, each with the image VAE's fidelity.
    """
    from .autoencoder import VideoVAE

    if config.variant != "iv-vae":
        raise IncompatibleCheckpointError("KTC initialization targets the iv-vae variant")
    image = _load_checkpoint_model(ckpt)
    _check_image_config(image.config, config, config.z // 2)
    model = VideoVAE(config).to(next(image.parameters()).dtype)
    src = _image_modules(image)
    placement = config.inflation_placement
    for name, m in model.named_modules():
        if isinstance(m, DualConv):
            _copy_dual(m, src[name], placement)
        elif isinstance(m, TemporalConv):
            if name not in src:
                continue  # temporal resampling layers
            if isinstance(_parent(model, name), DualConv):
                continue
            _copy_conv(m, src[name], placement, dual=True, split_in=getattr(m, "split_in", True))
        elif isinstance(m, RMSNorm):
            g = src[name].weight.data
            _assign(m.weight, torch.cat([g, g]))
    _init_temporal_layers(model)
    return model


@torch.no_grad()
def inflate_image_vae(ckpt, config):
    """Same-Z inflation of an image VAE into a single-branch video model
    (baseline-causal or baseline-gc)."""
    from .autoencoder import VideoVAE

    if config.variant not in ("baseline-causal", "baseline-gc"):
        raise IncompatibleCheckpointError("inflation targets a single-branch video variant")
    image = _load_checkpoint_model(ckpt)
    _check_image_config(image.config, config, config.z)
    model = VideoVAE(config).to(next(image.parameters()).dtype)
    src = _image_modules(image)
    for name, m in model.named_modules():
        if isinstance(m, TemporalConv) and name in src:
            _copy_conv(m, src[name], config.inflation_placement, dual=False)
        elif isinstance(m, RMSNorm):
            _assign(m.weight, src[name].weight.data)
    _init_temporal_layers(model)
    return model


def _parent(model, name):
    if "." not in name:
        return model
    return model.get_submodule(name.rsplit(".", 1)[0])
