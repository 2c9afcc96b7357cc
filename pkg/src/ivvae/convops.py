"""Temporal convolution operators: frame grouping, group-causal and causal
3D convolution, 2D->3D weight inflation, RMS normalization and temporal
resampling.

Tensors inside the network are ``[B, C, T, H, W]``.  The functional API
(``gcconv3d_forward`` and friends) works on :class:`FeatureMap`, whose data
may be unbatched ``[C, T, H, W]`` or batched.

Streaming support lives here too: every temporal layer can take its front
padding from a ``history`` tensor (the trailing frames of the previous chunk)
instead of replicating the first frame.  See :mod:`ivvae.streaming`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    InvalidFrameCountError,
    InvalidGroupingError,
    InvalidKernelError,
    ShapeError,
    StaleCacheError,
)

RMS_EPS = 1e-6
MODES = ("gc", "causal", "2d")


# --------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class FrameGrouping:
    lengths: tuple[int, ...]
    t_c: int = 4

    def __post_init__(self):
        lengths = tuple(int(n) for n in self.lengths)
        object.__setattr__(self, "lengths", lengths)
        if not lengths or lengths[0] != 1:
            raise InvalidGroupingError(f"first group must have length 1, got {lengths}")
        if any(n < 1 for n in lengths):
            raise InvalidGroupingError(f"group lengths must be positive: {lengths}")
        if len(set(lengths[1:])) > 1:
            raise InvalidGroupingError(f"non-first groups must be equal length: {lengths}")

    @property
    def total(self) -> int:
        return sum(self.lengths)

    def starts(self) -> list[int]:
        out, s = [], 0
        for n in self.lengths:
            out.append(s)
            s += n
        return out

    def __len__(self) -> int:
        return len(self.lengths)


@dataclass(frozen=True)
class ConvSpec3D:
    kernel: tuple[int, int, int] = (3, 3, 3)
    temporal_stride: int = 1
    spatial_stride: int = 1
    spatial_dilation: int = 1
    padding_mode: str = "group-causal"  # group-causal | causal | standard-2d

    def __post_init__(self):
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise InvalidKernelError(f"kernel sizes must be positive and odd: {self.kernel}")
        if self.padding_mode not in ("group-causal", "causal", "standard-2d"):
            raise ValueError(f"unknown padding mode {self.padding_mode!r}")
        if self.padding_mode == "standard-2d" and self.kernel[0] != 1:
            raise InvalidKernelError("standard-2d convolution needs k_t == 1")


@dataclass
class FeatureMap:
    data: torch.Tensor
    grouping: FrameGrouping

    def __post_init__(self):
        t = self.data.shape[-3]
        if self.grouping.total != t:
            raise InvalidGroupingError(
                f"grouping covers {self.grouping.total} frames but data has {t}"
            )


@dataclass
class Context:
    """Per-call state threaded through the network.

    ``lengths`` are the group lengths of the current chunk at the current
    stage; temporal resampling layers rewrite them.  ``at_start`` says whether
    the chunk begins at absolute frame 0 (its first group is the standalone
    image frame).  ``cache`` maps layer-id -> trailing frames in streaming
    mode and is ``None`` for single-step processing.
    """

    lengths: list[int]
    at_start: bool = True
    cache: Optional[dict] = None

    @classmethod
    def for_frames(cls, t: int, t_c: int = 4) -> "Context":
        return cls(list(make_frame_grouping(t, t_c).lengths))


# --------------------------------------------------------------------------
# Grouping


def make_frame_grouping(T: int, t_c: int = 4) -> FrameGrouping:
    if T < 1 or (T - 1) % t_c != 0:
        raise InvalidFrameCountError(
            f"frame count {T} is not 1 (mod {t_c}); pad or trim the clip"
        )
    return FrameGrouping((1,) + (t_c,) * ((T - 1) // t_c), t_c)


def _starts(lengths: Sequence[int]) -> list[int]:
    out, s = [], 0
    for n in lengths:
        out.append(s)
        s += n
    return out


def _as_batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 4:
        return x.unsqueeze(0), True
    if x.dim() == 5:
        return x, False
    raise ShapeError(f"expected [C,T,H,W] or [B,C,T,H,W], got {tuple(x.shape)}")


def _front_history(x: torch.Tensor, p: int, history: Optional[torch.Tensor]) -> torch.Tensor:
    """The ``p`` frames preceding ``x`` in the timeline."""
    if p == 0:
        return x[:, :, :0]
    if history is None:
        return x[:, :, :1].expand(-1, -1, p, -1, -1)
    if history.shape[2] != p or history.shape[:2] != x.shape[:2] or history.shape[3:] != x.shape[3:]:
        raise StaleCacheError(
            f"cached history {tuple(history.shape)} does not fit input {tuple(x.shape)} (P={p})"
        )
    return history


def _pad_groups(x, lengths, p_front, p_back, history):
    """Group-causal padding.  Returns (padded groups, new history).

    Front padding of a group is the ``p_front`` frames preceding it in the
    timeline (replicated first frame before time 0, or ``history``); back
    padding is ``p_back`` zero frames.
    """
    ext = torch.cat([_front_history(x, p_front, history), x], dim=2)
    out = []
    for s, n in zip(_starts(lengths), lengths):
        parts = [ext[:, :, s:s + p_front + n]]
        if p_back:
            parts.append(x.new_zeros(x.shape[0], x.shape[1], p_back, *x.shape[3:]))
        out.append(torch.cat(parts, dim=2) if len(parts) > 1 else parts[0])
    new_hist = ext[:, :, ext.shape[2] - p_front:] if p_front else None
    return out, new_hist


def group_causal_pad(fm: FeatureMap, k_t: int) -> list[torch.Tensor]:
    """Pad every frame group of ``fm`` for a valid convolution of temporal
    size ``k_t``; each group of length L becomes L + k_t - 1 frames."""
    if k_t < 1 or k_t % 2 == 0:
        raise InvalidKernelError(f"k_t must be odd and positive, got {k_t}")
    x, squeeze = _as_batched(fm.data)
    groups, _ = _pad_groups(x, fm.grouping.lengths, k_t // 2, (k_t + 1) // 2 - 1, None)
    return [g[0] for g in groups] if squeeze else groups


# --------------------------------------------------------------------------
# Core convolutions (batched tensors)


def _check_weight(x, weight):
    if weight.dim() != 5:
        raise ShapeError(f"3D kernel must be [Cout,Cin,kt,kh,kw], got {tuple(weight.shape)}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel expects {weight.shape[1]} input channels, got {x.shape[1]}")
    if weight.shape[2] % 2 == 0:
        raise InvalidKernelError("temporal kernel size must be odd")


def _out_lengths(lengths, at_start, t_stride):
    out = []
    for i, n in enumerate(lengths):
        if t_stride == 1 or (at_start and i == 0):
            out.append(n)
        elif n % t_stride:
            raise InvalidGroupingError(
                f"group length {n} is not divisible by temporal stride {t_stride}"
            )
        else:
            out.append(n // t_stride)
    return out


def _conv3d(x, weight, bias, stride, padding, dilation):
    """``F.conv3d``, except that float32 CPU inputs go straight to oneDNN;
    PyTorch otherwise picks a much slower reference kernel for batch 1."""
    if x.dtype == torch.float32 and x.device.type == "cpu" and torch.backends.mkldnn.is_available():
        return torch.mkldnn_convolution(x.contiguous(), weight.contiguous(), bias, padding, stride, dilation, 1)
    return F.conv3d(x, weight, bias, stride=stride, padding=padding, dilation=dilation)


def group_conv(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor],
    lengths: Sequence[int],
    *,
    at_start: bool = True,
    history: Optional[torch.Tensor] = None,
    t_stride: int = 1,
    s_stride: int = 1,
    dilation: int = 1,
):
    """Group causal convolution.  Returns ``(y, out_lengths, new_history)``.

    The standalone image group (first group of a chunk that starts at frame
    0) is always convolved with temporal stride 1.
    """
    _check_weight(x, weight)
    if sum(lengths) != x.shape[2]:
        raise InvalidGroupingError(f"lengths {list(lengths)} do not cover T={x.shape[2]}")
    k_t, k_h, k_w = weight.shape[2:]
    p = k_t // 2
    out_lengths = _out_lengths(lengths, at_start, t_stride)
    groups, new_hist = _pad_groups(x, lengths, p, p, history)
    pad_hw = (dilation * (k_h // 2), dilation * (k_w // 2))

    strides = [1 if (at_start and i == 0) else t_stride for i in range(len(groups))]
    results: list[Optional[torch.Tensor]] = [None] * len(groups)
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, g in enumerate(groups):
        buckets.setdefault((g.shape[2], strides[i]), []).append(i)
    b = x.shape[0]
    for (_, st), idx in buckets.items():
        stacked = torch.cat([groups[i] for i in idx], dim=0)
        y = _conv3d(
            stacked, weight, bias,
            stride=(st, s_stride, s_stride),
            padding=(0,) + pad_hw,
            dilation=(1, dilation, dilation),
        )
        for j, i in enumerate(idx):
            results[i] = y[j * b:(j + 1) * b]
    return torch.cat(results, dim=2), out_lengths, new_hist


def causal_conv(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor],
    lengths: Sequence[int],
    *,
    at_start: bool = True,
    history: Optional[torch.Tensor] = None,
    t_stride: int = 1,
    s_stride: int = 1,
    dilation: int = 1,
):
    """Causal convolution: ``k_t - 1`` front frames (replicated first frame or
    ``history``).  With temporal stride s, outputs are the windows ending at
    absolute times 0, s, 2s, ...  Returns ``(y, out_lengths, new_history)``."""
    _check_weight(x, weight)
    if sum(lengths) != x.shape[2]:
        raise InvalidGroupingError(f"lengths {list(lengths)} do not cover T={x.shape[2]}")
    k_t, k_h, k_w = weight.shape[2:]
    p = k_t - 1
    out_lengths = _out_lengths(lengths, at_start, t_stride)
    ext = torch.cat([_front_history(x, p, history), x], dim=2)
    # chunks after the first begin at absolute time 1 (mod s)
    start = 0 if at_start else t_stride - 1
    y = _conv3d(
        ext[:, :, start:], weight, bias,
        stride=(t_stride, s_stride, s_stride),
        padding=(0, dilation * (k_h // 2), dilation * (k_w // 2)),
        dilation=(1, dilation, dilation),
    )
    new_hist = ext[:, :, ext.shape[2] - p:] if p else None
    return y, out_lengths, new_hist


def frame_conv(x, weight, bias, *, s_stride=1, dilation=1):
    """Per-frame 2D convolution with a ``[Cout, Cin, 1, kh, kw]`` kernel."""
    _check_weight(x, weight)
    if weight.shape[2] != 1:
        raise InvalidKernelError("per-frame convolution needs k_t == 1")
    k_h, k_w = weight.shape[3:]
    return _conv3d(
        x, weight, bias,
        stride=(1, s_stride, s_stride),
        padding=(0, dilation * (k_h // 2), dilation * (k_w // 2)),
        dilation=(1, dilation, dilation),
    )


def duplicate_frames(x: torch.Tensor, lengths: Sequence[int], at_start: bool, factor: int = 2):
    """Nearest-frame temporal upsampling of every non-image group."""
    if at_start:
        head, rest = x[:, :, :1], x[:, :, 1:]
        new = [lengths[0]] + [n * factor for n in lengths[1:]]
        if rest.shape[2] == 0:
            return head, new
        return torch.cat([head, rest.repeat_interleave(factor, dim=2)], dim=2), new
    return x.repeat_interleave(factor, dim=2), [n * factor for n in lengths]


# --------------------------------------------------------------------------
# Functional API over FeatureMap


def _spec_pad(spec: ConvSpec3D, weight):
    if tuple(weight.shape[2:]) != tuple(spec.kernel):
        raise ShapeError(f"kernel {tuple(weight.shape[2:])} does not match spec {spec.kernel}")


def _wrap(y, lengths, squeeze, t_c):
    return FeatureMap(y[0] if squeeze else y, FrameGrouping(tuple(lengths), t_c))


def gcconv3d_forward(fm: FeatureMap, weight, bias=None, spec: ConvSpec3D = ConvSpec3D()) -> FeatureMap:
    if spec.padding_mode != "group-causal":
        raise ValueError("gcconv3d_forward needs padding_mode='group-causal'")
    _spec_pad(spec, weight)
    x, squeeze = _as_batched(fm.data)
    y, lengths, _ = group_conv(
        x, weight, bias, fm.grouping.lengths,
        t_stride=spec.temporal_stride, s_stride=spec.spatial_stride,
        dilation=spec.spatial_dilation,
    )
    return _wrap(y, lengths, squeeze, fm.grouping.t_c)


def causal_conv3d_forward(fm: FeatureMap, weight, bias=None, spec: ConvSpec3D = ConvSpec3D(padding_mode="causal")) -> FeatureMap:
    if spec.padding_mode != "causal":
        raise ValueError("causal_conv3d_forward needs padding_mode='causal'")
    _spec_pad(spec, weight)
    x, squeeze = _as_batched(fm.data)
    y, lengths, _ = causal_conv(
        x, weight, bias, fm.grouping.lengths,
        t_stride=spec.temporal_stride, s_stride=spec.spatial_stride,
        dilation=spec.spatial_dilation,
    )
    return _wrap(y, lengths, squeeze, fm.grouping.t_c)


def inflate_conv2d(w2d: torch.Tensor, k_t: int, placement: str = "tail") -> torch.Tensor:
    """Embed a 2D kernel ``[Cout, Cin, kh, kw]`` at one temporal tap of a
    ``k_t`` kernel, zeros elsewhere.  ``tail`` -> tap k_t-1, ``center`` -> tap
    (k_t-1)/2."""
    if k_t < 1 or k_t % 2 == 0:
        raise InvalidKernelError(f"k_t must be odd and positive, got {k_t}")
    if w2d.dim() != 4:
        raise ShapeError(f"2D kernel must be [Cout,Cin,kh,kw], got {tuple(w2d.shape)}")
    if placement == "tail":
        tap = k_t - 1
    elif placement == "center":
        tap = (k_t - 1) // 2
    else:
        raise ValueError(f"placement must be 'tail' or 'center', got {placement!r}")
    w3d = w2d.new_zeros(w2d.shape[0], w2d.shape[1], k_t, *w2d.shape[2:])
    w3d[:, :, tap] = w2d
    return w3d


def rms_normalize(x: torch.Tensor, gain: Optional[torch.Tensor], eps: float = RMS_EPS,
                  groups: int = 1, dim: int = 1) -> torch.Tensor:
    c = x.shape[dim]
    if c % groups:
        raise ShapeError(f"{c} channels cannot be split into {groups} norm groups")
    shape = list(x.shape)
    split = shape[:dim] + [groups, c // groups] + shape[dim + 1:]
    xs = x.reshape(split)
    # Reduce over a contiguous last axis: a strided reduction changes its
    # summation order with the spatial extent, which would make chunked and
    # one-shot runs differ in the last bit.
    ms = xs.movedim(dim + 1, -1).contiguous().pow(2).mean(-1, keepdim=True).movedim(-1, dim + 1)
    xs = xs * torch.rsqrt(ms + eps)
    y = xs.reshape(shape)
    if gain is not None:
        if gain.numel() != c:
            raise ShapeError(f"gain has {gain.numel()} entries for {c} channels")
        view = [1] * len(shape)
        view[dim] = c
        y = y * gain.reshape(view)
    return y


def rmsnorm(fm, gain, eps: float = RMS_EPS):
    """RMS-normalize over the channel axis only (axis 0 of an unbatched
    ``[C, T, H, W]`` map), then scale by ``gain``."""
    if isinstance(fm, FeatureMap):
        x, squeeze = _as_batched(fm.data)
        y = rms_normalize(x, gain, eps)
        return FeatureMap(y[0] if squeeze else y, fm.grouping)
    return rms_normalize(fm, gain, eps, dim=0)


def temporal_downsample(fm: FeatureMap, weight, bias=None, variant: str = "gcconv") -> FeatureMap:
    """Halve every non-first group with a temporal-stride-2 convolution."""
    x, squeeze = _as_batched(fm.data)
    conv = {"gcconv": group_conv, "causal": causal_conv}[variant]
    y, lengths, _ = conv(x, weight, bias, fm.grouping.lengths, t_stride=2)
    return _wrap(y, lengths, squeeze, fm.grouping.t_c)


def temporal_upsample(fm: FeatureMap, weight, bias=None, variant: str = "gcconv") -> FeatureMap:
    """Double every non-first group by frame duplication, then convolve."""
    x, squeeze = _as_batched(fm.data)
    x, lengths = duplicate_frames(x, fm.grouping.lengths, at_start=True)
    conv = {"gcconv": group_conv, "causal": causal_conv}[variant]
    y, lengths, _ = conv(x, weight, bias, lengths)
    return _wrap(y, lengths, squeeze, fm.grouping.t_c)


def selector_weight(channels: int, k_t: int = 3, taps=None, dtype=None) -> torch.Tensor:
    """One-hot temporal kernel ``[C, C, k_t, 1, 1]`` with identity channel map.

    ``taps`` gives the selected tap for each channel (an int applies to all).
    """
    w = torch.zeros(channels, channels, k_t, 1, 1, dtype=dtype)
    if taps is None:
        taps = k_t - 1
    if isinstance(taps, int):
        taps = [taps] * channels
    for c, t in enumerate(taps):
        w[c, c, t, 0, 0] = 1.0
    return w


# --------------------------------------------------------------------------
# Modules


class RMSNorm(nn.Module):
    """Channel RMS norm, optionally computed independently over ``groups``
    equal channel slices (one per KTC branch)."""

    def __init__(self, channels: int, groups: int = 1, eps: float = RMS_EPS):
        super().__init__()
        self.groups = groups
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))

    def forward(self, x, ctx=None):
        return rms_normalize(x, self.weight, self.eps, self.groups)


class TemporalConv(nn.Module):
    """3D convolution whose temporal behavior is set by ``mode``.

    ``gc``      group causal padding, groups convolved independently
    ``causal``  front-only padding
    ``2d``      per-frame convolution (k_t must be 1)

    The weight is always stored 5-D, so a ``2d`` layer of an image model has
    the same parameter shapes as its inflated counterpart minus the time tap.
    """

    def __init__(self, c_in, c_out, kernel=(3, 3, 3), mode="gc", t_stride=1,
                 s_stride=1, dilation=1, bias=True):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if isinstance(kernel, int):
            kernel = (kernel, kernel, kernel)
        if mode == "2d" and (kernel[0] != 1 or t_stride != 1):
            raise InvalidKernelError("2d mode requires k_t == 1 and no temporal stride")
        if any(k % 2 == 0 for k in kernel):
            raise InvalidKernelError(f"kernel sizes must be odd: {kernel}")
        self.mode = mode
        self.kernel = tuple(kernel)
        self.t_stride = t_stride
        self.s_stride = s_stride
        self.dilation = dilation
        self.weight = nn.Parameter(torch.empty(c_out, c_in, *kernel))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        self.layer_id: Optional[str] = None
        nn.init.kaiming_uniform_(self.weight, a=5 ** 0.5)
        if self.bias is not None:
            fan_in = c_in * kernel[0] * kernel[1] * kernel[2]
            nn.init.uniform_(self.bias, -fan_in ** -0.5, fan_in ** -0.5)

    @property
    def front_padding(self) -> int:
        """P_t: frames of history this layer needs."""
        return {"gc": self.kernel[0] // 2, "causal": self.kernel[0] - 1, "2d": 0}[self.mode]

    def extra_repr(self):
        c_out, c_in = self.weight.shape[:2]
        return (f"{c_in}, {c_out}, kernel={self.kernel}, mode={self.mode}, "
                f"t_stride={self.t_stride}, s_stride={self.s_stride}, dilation={self.dilation}")

    def forward(self, x, ctx: Context):
        if self.mode == "2d":
            return frame_conv(x, self.weight, self.bias, s_stride=self.s_stride, dilation=self.dilation)
        history = None
        if ctx.cache is not None and not ctx.at_start:
            if self.layer_id not in ctx.cache:
                raise StaleCacheError(f"no cached frames for layer {self.layer_id!r}")
            history = ctx.cache[self.layer_id]
        fn = group_conv if self.mode == "gc" else causal_conv
        y, lengths, new_hist = fn(
            x, self.weight, self.bias, ctx.lengths,
            at_start=ctx.at_start, history=history, t_stride=self.t_stride,
            s_stride=self.s_stride, dilation=self.dilation,
        )
        if ctx.cache is not None and new_hist is not None:
            ctx.cache[self.layer_id] = new_hist.detach()
        if self.t_stride != 1:
            ctx.lengths = lengths
        return y
