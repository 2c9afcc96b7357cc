"""Encoder/decoder assembly.

All variants share one layer plan; only the convolution unit differs:

==================  ==========================================================
``image``           per-frame 2D convolutions (the image VAE)
``baseline-causal`` causal 3D convolutions everywhere
``baseline-gc``     group causal 3D convolutions everywhere
``iv-vae``          KTC dual units (2D + GCConv halves); 2D + 2D once a frame
                    group has been merged into one compressed frame
==================  ==========================================================

Because the module trees line up name-for-name, a trained image VAE can be
copied into any video variant (see :mod:`ivvae.ktc`).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .convops import (
    Context,
    FeatureMap,
    RMSNorm,
    TemporalConv,
    _as_batched,
    duplicate_frames,
    frame_conv,
    make_frame_grouping,
    rms_normalize,
)
from .errors import ConfigurationError, InvalidInputError, ShapeError
from .ktc import DualConv, KTCUnit, select_frames

VARIANTS = ("iv-vae", "baseline-causal", "baseline-gc", "image")
LOGVAR_RANGE = (-30.0, 20.0)
# encoder transitions (level i -> i+1) that also halve time
TEMPORAL_LEVELS = (1, 2)


@dataclass
class ModelConfig:
    variant: str = "iv-vae"
    z: int = 8
    base_channels: int = 64
    channel_multipliers: tuple = (1, 2, 4, 4)
    t_c: int = 4
    attention_count: Optional[int] = None
    pac_rates: Optional[tuple] = None
    inflation_placement: str = "auto"  # auto | tail | center
    enc_res_blocks: int = 2
    dec_res_blocks: Optional[int] = None
    channel_shrink: bool = True
    temporal_kernel: int = 3

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        if self.attention_count is None:
            self.attention_count = 7 if self.variant == "iv-vae" else 2
        if self.pac_rates is None:
            self.pac_rates = (1, 2, 4) if self.variant == "iv-vae" else ()
        self.pac_rates = tuple(self.pac_rates)
        if self.dec_res_blocks is None:
            self.dec_res_blocks = 2 if self.variant == "iv-vae" else 3
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.t_c != 4:
            raise ConfigurationError("only t_c = 4 is supported")
        if len(self.channel_multipliers) != 4:
            raise ConfigurationError("spatial compression must be 8 (four channel multipliers)")
        if self.variant == "iv-vae" and self.z % 2:
            raise ConfigurationError("iv-vae needs an even latent channel count")
        if self.z < 1 or self.base_channels < 1:
            raise ConfigurationError("z and base_channels must be positive")
        if self.inflation_placement not in ("auto", "tail", "center"):
            raise ConfigurationError(f"bad inflation placement {self.inflation_placement!r}")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigurationError("temporal kernel must be odd")
        if self.attention_count < 0 or self.enc_res_blocks < 1 or self.dec_res_blocks < 1:
            raise ConfigurationError("block counts must be positive")
        if any(r < 1 for r in self.pac_rates):
            raise ConfigurationError("PAC rates must be >= 1")

    @property
    def spatial_factor(self) -> int:
        return 2 ** (len(self.channel_multipliers) - 1)

    @property
    def temporal_factor(self) -> int:
        return 1 if self.variant == "image" else self.t_c

    @property
    def branches(self) -> int:
        return 2 if self.variant == "iv-vae" else 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["pac_rates"] = list(self.pac_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def image_config(self) -> "ModelConfig":
        """Config of the image VAE this video model is initialized from."""
        z = self.z // 2 if self.variant == "iv-vae" else self.z
        return dataclasses.replace(self, variant="image", z=z)


@dataclass
class LatentPosterior:
    mean: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ShapeError("mean and logvar must have the same shape")

    @property
    def shape(self):
        return tuple(self.mean.shape)


# --------------------------------------------------------------------------
# Layer factory


class _Layers:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.dual = cfg.variant == "iv-vae"
        self.branches = cfg.branches
        self.kt = cfg.temporal_kernel

    def width(self, mult: int) -> int:
        return self.cfg.base_channels * mult * self.branches

    def mode(self, stage: str) -> str:
        v = self.cfg.variant
        if v == "image":
            return "2d"
        if v == "baseline-causal":
            return "causal"
        if v == "baseline-gc":
            return "gc"
        return "gc" if stage == "full" else "2d"

    @property
    def temporal_mode(self) -> str:
        return "causal" if self.cfg.variant == "baseline-causal" else "gc"

    def conv(self, c_in, c_out, stage, k=3, s_stride=1, split_in=True):
        mode = self.mode(stage)
        if self.dual:
            return DualConv(c_in, c_out, k, self.kt, mode, s_stride, split_in)
        kt = 1 if mode == "2d" else self.kt
        return TemporalConv(c_in, c_out, (kt, k, k), mode, s_stride=s_stride)

    def full(self, c_in, c_out, k=1, dilation=1):
        """Per-frame convolution over all channels (both branches)."""
        return TemporalConv(c_in, c_out, (1, k, k), "2d", dilation=dilation)

    def norm(self, c):
        return RMSNorm(c, groups=self.branches)

    def unit(self, c_in, c_out, stage):
        if self.dual:
            return KTCUnit(c_in, c_out, 3, self.kt, self.mode(stage))
        return ConvUnit(self.conv(c_in, c_out, stage), self.norm(c_out))


# --------------------------------------------------------------------------
# Blocks


class ConvUnit(nn.Module):
    def __init__(self, conv, norm):
        super().__init__()
        self.conv = conv
        self.norm = norm

    def forward(self, x, ctx):
        return self.norm(self.conv(x, ctx))


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, stage, layers: _Layers):
        super().__init__()
        self.unit1 = layers.unit(c_in, c_out, stage)
        self.act = nn.SiLU()
        self.unit2 = layers.unit(c_out, c_out, stage)
        self.skip = layers.full(c_in, c_out) if c_in != c_out else None

    def forward(self, x, ctx):
        h = self.unit2(self.act(self.unit1(x, ctx)), ctx)
        return (x if self.skip is None else self.skip(x, ctx)) + h


class TemporalDown(nn.Module):
    """Temporal-stride-2 convolution (kernel ``k_t x 1 x 1``) over all channels.

    ``index`` is 0 for the first temporal downsample and 1 for the second;
    it only matters for the selector initialization.
    """

    def __init__(self, c, layers: _Layers, index: int):
        super().__init__()
        self.index = index
        self.branches = layers.branches
        self.conv = TemporalConv(c, c, (layers.kt, 1, 1), layers.temporal_mode, t_stride=2)

    def selector_taps(self, c):
        kt = self.conv.kernel[0]
        if self.conv.mode == "causal":
            return [kt - 1] * c  # most recent frame of each window
        p = kt // 2
        if self.branches == 2 and self.index == 1:
            # 2D half keeps the keyframe (group frame 0); 3D half keeps frame 2
            return [p] * (c // 2) + [p + 1] * (c - c // 2)
        return [p] * c

    def forward(self, x, ctx):
        return self.conv(x, ctx)


class FrameDuplicate(nn.Module):
    def forward(self, x, ctx):
        x, ctx.lengths = duplicate_frames(x, ctx.lengths, ctx.at_start)
        return x


class TemporalUp(nn.Module):
    def __init__(self, c, layers: _Layers):
        super().__init__()
        self.dup = FrameDuplicate()
        self.conv = TemporalConv(c, c, (layers.kt, 1, 1), layers.temporal_mode)

    def selector_taps(self, c):
        kt = self.conv.kernel[0]
        return [kt - 1 if self.conv.mode == "causal" else kt // 2] * c

    def forward(self, x, ctx):
        return self.conv(self.dup(x, ctx), ctx)


class NearestUp(nn.Module):
    def forward(self, x, ctx=None):
        return x.repeat_interleave(2, dim=3).repeat_interleave(2, dim=4)


class SpatialUp(nn.Module):
    def __init__(self, c_in, c_out, stage, layers: _Layers):
        super().__init__()
        self.up = NearestUp()
        self.conv = layers.conv(c_in, c_out, stage)

    def forward(self, x, ctx):
        return self.conv(self.up(x), ctx)


def pac_forward(fm: FeatureMap, kernels, biases, rates, fuse_weight, fuse_bias=None, branches: int = 1) -> FeatureMap:
    """Parallel atrous convolutions: one spatially dilated convolution per
    rate, outputs concatenated on channels and fused by a 1x1 convolution.

    ``kernels`` are ``[W, C, 1, k, k]``; ``fuse_weight`` is ``[C, W*len(rates), 1, 1, 1]``.
    With ``branches == 2`` the concatenation groups the first halves of all
    rate outputs before the second halves.
    """
    x, squeeze = _as_batched(fm.data)
    outs = [frame_conv(x, w, b, dilation=r) for w, b, r in zip(kernels, biases, rates)]
    if branches > 1:
        parts = [o.chunk(branches, dim=1) for o in outs]
        outs = [p[i] for i in range(branches) for p in parts]
    y = frame_conv(torch.cat(outs, dim=1), fuse_weight, fuse_bias)
    return FeatureMap(y[0] if squeeze else y, fm.grouping)


class PAC(nn.Module):
    def __init__(self, c, rates, layers: _Layers):
        super().__init__()
        width = c // 2
        self.rates = tuple(rates)
        self.branches = layers.branches
        self.convs = nn.ModuleList(layers.full(c, width, k=3, dilation=r) for r in rates)
        self.fuse = layers.full(width * len(rates), c)

    def forward(self, x, ctx):
        outs = [conv(x, ctx) for conv in self.convs]
        if self.branches > 1:
            parts = [o.chunk(self.branches, dim=1) for o in outs]
            outs = [p[i] for i in range(self.branches) for p in parts]
        return self.fuse(torch.cat(outs, dim=1), ctx)


def _attend(h, q_w, q_b, k_w, k_b, v_w, v_b, heads):
    b, c, t, hh, ww = h.shape
    d = c // heads

    def split(w, bias):
        y = frame_conv(h, w, bias)
        return y.reshape(b, heads, d, t, hh * ww).permute(0, 3, 1, 4, 2)  # B,T,heads,HW,d

    q, k, v = split(q_w, q_b), split(k_w, k_b), split(v_w, v_b)
    attn = torch.softmax(q @ k.transpose(-1, -2) * d ** -0.5, dim=-1)
    out = attn @ v
    return out.permute(0, 2, 4, 1, 3).reshape(b, c, t, hh, ww)


def spatial_attention(fm: FeatureMap, params: dict, heads: int = 1) -> FeatureMap:
    """Self-attention over the h*w positions of every time slice separately,
    with a residual connection.

    ``params`` keys: ``gain``, ``q``, ``k``, ``v``, ``proj`` (``[C, C]``
    matrices) and optional ``q_bias`` ... ``proj_bias``.
    """
    x, squeeze = _as_batched(fm.data)

    def w(name):
        m = params[name]
        return m.reshape(m.shape[0], m.shape[1], 1, 1, 1)

    h = rms_normalize(x, params.get("gain"), groups=heads)
    out = _attend(h, w("q"), params.get("q_bias"), w("k"), params.get("k_bias"),
                  w("v"), params.get("v_bias"), heads)
    y = x + frame_conv(out, w("proj"), params.get("proj_bias"))
    return FeatureMap(y[0] if squeeze else y, fm.grouping)


class SpatialAttention(nn.Module):
    def __init__(self, c, layers: _Layers):
        super().__init__()
        self.heads = layers.branches
        self.norm = layers.norm(c)
        self.q = layers.full(c, c)
        self.k = layers.full(c, c)
        self.v = layers.full(c, c)
        self.proj = layers.full(c, c)

    def forward(self, x, ctx):
        h = self.norm(x)
        out = _attend(h, self.q.weight, self.q.bias, self.k.weight, self.k.bias,
                      self.v.weight, self.v.bias, self.heads)
        return x + self.proj(out, ctx)


def _split_attention(n: int) -> tuple[int, int]:
    enc = n // 2
    return enc, n - enc


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig, layers: _Layers):
        super().__init__()
        ch = [layers.width(m) for m in cfg.channel_multipliers]
        video = cfg.variant != "image"
        self.conv_in = layers.conv(3, ch[0], "full", split_in=False)
        self.levels = nn.ModuleList()
        c, stage, n_down = ch[0], "full", 0
        for i, c_out in enumerate(ch):
            level = nn.Module()
            level.blocks = nn.ModuleList(
                ResBlock(c if j == 0 else c_out, c_out, stage, layers) for j in range(cfg.enc_res_blocks)
            )
            c = c_out
            if i < len(ch) - 1:
                level.down = layers.conv(c, c, stage, s_stride=2)
                if video and i in TEMPORAL_LEVELS:
                    level.tdown = TemporalDown(c, layers, n_down)
                    n_down += 1
                if i + 1 >= TEMPORAL_LEVELS[-1] + 1:
                    stage = "compressed"
            self.levels.append(level)
        n_attn, _ = _split_attention(cfg.attention_count)
        self.mid1 = ResBlock(c, c, stage, layers)
        self.pac = PAC(c, cfg.pac_rates, layers) if cfg.pac_rates else None
        self.attn = nn.ModuleList(SpatialAttention(c, layers) for _ in range(n_attn))
        self.mid2 = ResBlock(c, c, stage, layers)
        self.norm_out = layers.norm(c)
        self.act = nn.SiLU()
        self.conv_out = layers.conv(c, 2 * cfg.z, stage)
        self.branches = layers.branches

    def forward(self, x, ctx):
        h = self.conv_in(x, ctx)
        for level in self.levels:
            for block in level.blocks:
                h = block(h, ctx)
            if hasattr(level, "down"):
                h = level.down(h, ctx)
            if hasattr(level, "tdown"):
                h = level.tdown(h, ctx)
        h = self.mid1(h, ctx)
        if self.pac is not None:
            h = self.pac(h, ctx)
        for attn in self.attn:
            h = attn(h, ctx)
        h = self.mid2(h, ctx)
        h = self.conv_out(self.act(self.norm_out(h)), ctx)
        if self.branches == 2:
            a, b = h.chunk(2, dim=1)
            ma, la = a.chunk(2, dim=1)
            mb, lb = b.chunk(2, dim=1)
            return torch.cat([ma, mb], dim=1), torch.cat([la, lb], dim=1)
        return h.chunk(2, dim=1)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, layers: _Layers):
        super().__init__()
        ch = [layers.width(m) for m in cfg.channel_multipliers]
        video = cfg.variant != "image"
        top = len(ch) - 1
        stage = "compressed"
        c = ch[top]
        self.conv_in = layers.conv(cfg.z, c, stage)
        _, n_attn = _split_attention(cfg.attention_count)
        self.mid1 = ResBlock(c, c, stage, layers)
        self.attn = nn.ModuleList(SpatialAttention(c, layers) for _ in range(n_attn))
        self.mid2 = ResBlock(c, c, stage, layers)
        self.levels = nn.ModuleList()
        for i in range(top, -1, -1):
            level = nn.Module()
            level.blocks = nn.ModuleList(
                ResBlock(c if j == 0 else ch[i], ch[i], stage, layers) for j in range(cfg.dec_res_blocks)
            )
            c = ch[i]
            if i > 0:
                if video and (i - 1) in TEMPORAL_LEVELS:
                    level.tup = TemporalUp(c, layers)
                    stage = "full"
                elif i - 1 < TEMPORAL_LEVELS[0]:
                    stage = "full"
                c_next = ch[i - 1] if cfg.channel_shrink else c
                level.up = SpatialUp(c, c_next, stage, layers)
                c = c_next
            self.levels.append(level)
        self.norm_out = layers.norm(c)
        self.act = nn.SiLU()
        self.conv_out = layers.conv(c, 3 * layers.branches, stage)
        self.branches = layers.branches

    def forward(self, z, ctx, return_branches: bool = False):
        h = self.conv_in(z, ctx)
        h = self.mid1(h, ctx)
        for attn in self.attn:
            h = attn(h, ctx)
        h = self.mid2(h, ctx)
        for level in self.levels:
            for block in level.blocks:
                h = block(h, ctx)
            if hasattr(level, "tup"):
                h = level.tup(h, ctx)
            if hasattr(level, "up"):
                h = level.up(h, ctx)
        h = self.conv_out(self.act(self.norm_out(h)), ctx)
        if self.branches == 2:
            out2d, out3d = h.chunk(2, dim=1)
            out = select_frames(out2d, out3d, ctx.lengths)
            return (out, out2d, out3d) if return_branches else out
        return (h, h, h) if return_branches else h


# --------------------------------------------------------------------------
# Model


class VideoVAE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        layers = _Layers(config)
        self.encoder = Encoder(config, layers)
        self.decoder = Decoder(config, layers)
        for name, m in self.named_modules():
            if isinstance(m, TemporalConv):
                m.layer_id = name

    @property
    def is_video(self) -> bool:
        return self.config.variant != "image"

    def temporal_layers(self) -> list[TemporalConv]:
        return [m for m in self.modules() if isinstance(m, TemporalConv) and m.front_padding > 0]

    def check_input(self, x: torch.Tensor):
        if x.dim() != 5 or x.shape[1] != 3:
            raise InvalidInputError(f"expected video [B,3,T,H,W], got {tuple(x.shape)}")
        s = self.config.spatial_factor
        if x.shape[3] % s or x.shape[4] % s:
            raise InvalidInputError(f"height and width must be divisible by {s}, got {tuple(x.shape[3:])}")
        t = x.shape[2]
        if self.is_video and (t - 1) % self.config.t_c:
            raise InvalidInputError(f"frame count {t} is not 1 (mod {self.config.t_c})")

    def _context(self, t: int) -> Context:
        if not self.is_video:
            return Context([1] * t)
        return Context(list(make_frame_grouping(t, self.config.t_c).lengths))

    def encode_tensor(self, x: torch.Tensor, ctx: Optional[Context] = None):
        if ctx is None:
            self.check_input(x)
            ctx = self._context(x.shape[2])
        mean, logvar = self.encoder(x, ctx)
        return mean, logvar.clamp(*LOGVAR_RANGE)

    def decode_tensor(self, z: torch.Tensor, ctx: Optional[Context] = None, return_branches: bool = False):
        if z.dim() != 5 or z.shape[1] != self.config.z:
            raise InvalidInputError(f"expected latent [B,{self.config.z},T,h,w], got {tuple(z.shape)}")
        if ctx is None:
            ctx = Context([1] * z.shape[2])
        return self.decoder(z, ctx, return_branches)

    def forward(self, x, generator: Optional[torch.Generator] = None, sample: bool = True):
        mean, logvar = self.encode_tensor(x)
        if sample:
            eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
            z = mean + torch.exp(0.5 * logvar) * eps
        else:
            z = mean
        return self.decode_tensor(z), LatentPosterior(mean, logvar)


def build_model(config: ModelConfig) -> VideoVAE:
    return VideoVAE(config)


def parameter_count(config_or_model) -> int:
    if isinstance(config_or_model, nn.Module):
        return sum(p.numel() for p in config_or_model.parameters())
    with torch.device("meta"):
        model = VideoVAE(config_or_model)
    return sum(p.numel() for p in model.parameters())


# --------------------------------------------------------------------------
# Unbatched convenience API


def _batched(x):
    if x.dim() == 4:
        return x.unsqueeze(0), True
    return x, False


def encode(x: torch.Tensor, model: VideoVAE) -> LatentPosterior:
    """Posterior of a ``[3, T, H, W]`` (or batched) video."""
    xb, squeeze = _batched(x)
    if xb.abs().max() > 1 + 1e-6:
        raise InvalidInputError("video values must lie in [-1, 1]")
    mean, logvar = model.encode_tensor(xb)
    if squeeze:
        mean, logvar = mean[0], logvar[0]
    return LatentPosterior(mean, logvar)


def decode(z: torch.Tensor, model: VideoVAE) -> torch.Tensor:
    zb, squeeze = _batched(z)
    out = model.decode_tensor(zb)
    return out[0] if squeeze else out


def sample_posterior(p: LatentPosterior, seed: int) -> torch.Tensor:
    g = torch.Generator(device="cpu").manual_seed(int(seed))
    eps = torch.randn(p.mean.shape, generator=g, dtype=p.mean.dtype)
    return p.mean + torch.exp(0.5 * p.logvar.clamp(*LOGVAR_RANGE)) * eps.to(p.mean.device)


# --------------------------------------------------------------------------
# Analytic activation accounting


def _leaf_modules(module):
    """Layers for activation accounting: leaf modules, with a dual
    convolution counted as one layer (its concatenated output)."""
    out, inside = [], set()
    for m in module.modules():
        if id(m) in inside:
            continue
        if isinstance(m, DualConv):
            out.append(m)
            inside.update(id(c) for c in m.modules())
        elif not list(m.children()):
            out.append(m)
    return out


def activation_profile(fn, module) -> dict:
    """Run ``fn()`` and account the activations of every leaf layer of
    ``module``.

    ``total`` sums all layer outputs; ``peak`` is the largest single output;
    ``peak_live`` is the largest input + output pair of one layer, i.e. the
    memory that must be resident while that layer runs.  Attention score
    matrices are not materialized layers and are not counted.
    """
    totals = {"total": 0, "peak": 0, "peak_live": 0, "calls": 0}

    def hook(_m, inp, out):
        n = out.numel()
        n_in = sum(t.numel() for t in inp if isinstance(t, torch.Tensor))
        totals["total"] += n
        totals["peak"] = max(totals["peak"], n)
        totals["peak_live"] = max(totals["peak_live"], n + n_in)
        totals["calls"] += 1

    handles = [m.register_forward_hook(hook) for m in _leaf_modules(module)]
    try:
        with torch.no_grad():
            fn()
    finally:
        for h in handles:
            h.remove()
    return totals


def decoder_activation_elements(config: ModelConfig, frames: int = 17, height: int = 480, width: int = 848) -> dict:
    """Decoder activation element counts for one video, computed on the meta
    device (shapes only, no arithmetic)."""
    s = config.spatial_factor
    if height % s or width % s:
        raise InvalidInputError(f"resolution must be divisible by {s}")
    t_lat = 1 + (frames - 1) // config.temporal_factor
    with torch.device("meta"):
        model = VideoVAE(config)
        z = torch.empty(1, config.z, t_lat, height // s, width // s)
    return activation_profile(lambda: model.decode_tensor(z), model.decoder)
