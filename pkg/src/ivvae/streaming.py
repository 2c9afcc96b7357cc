"""Chunked reconstruction of long videos.

The cache mode keeps, per temporal convolution, the last ``P_t`` frames of
the timeline that layer convolved; the next chunk uses them as its front
padding, so chunked processing reproduces single-step processing.  The
overlap mode is the approximate comparison baseline.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import torch

from .autoencoder import LatentPosterior, LOGVAR_RANGE, VideoVAE, activation_profile
from .convops import Context, make_frame_grouping
from .errors import InvalidFrameCountError, InvalidInputError, StaleCacheError


@dataclass
class CacheState:
    entries: dict = field(default_factory=dict)
    frames_consumed: int = 0
    # (batch, spatial dims) of the stream; a chunk of another shape is stale
    signature: Optional[tuple] = None

    def reset(self):
        self.entries.clear()
        self.frames_consumed = 0
        self.signature = None

    def check_layers(self, model: VideoVAE, part: str):
        """Every temporal layer of ``part`` (encoder/decoder) must hold exactly
        its front padding worth of frames."""
        for m in getattr(model, part).modules():
            if getattr(m, "layer_id", None) is None or m.front_padding == 0:
                continue
            entry = self.entries.get(m.layer_id)
            if entry is None:
                raise StaleCacheError(f"cache has no entry for layer {m.layer_id!r}")
            if entry.shape[2] != m.front_padding:
                raise StaleCacheError(
                    f"layer {m.layer_id!r} caches {entry.shape[2]} frames, needs {m.front_padding}"
                )


@dataclass
class ChunkRecord:
    index: int
    frames: int
    seconds: float


def chunk_video(T: int, t_c: int = 4) -> list[int]:
    return list(make_frame_grouping(T, t_c).lengths)


def _batched(x):
    return (x.unsqueeze(0), True) if x.dim() == 4 else (x, False)


def _begin_chunk(cache: CacheState, n: int, signature: tuple, t_c: int, start: Optional[int]) -> bool:
    if start is not None and start != cache.frames_consumed:
        raise StaleCacheError(
            f"chunk starts at frame {start} but the cache has consumed {cache.frames_consumed}"
        )
    if cache.frames_consumed == 0:
        if cache.entries:
            raise StaleCacheError("cache holds entries but has consumed no frames")
        if n < 1 or (n - 1) % t_c:
            raise InvalidFrameCountError(f"first chunk length {n} is not 1 (mod {t_c})")
        cache.signature = signature
        return True
    if signature != cache.signature:
        raise StaleCacheError(f"chunk shape {signature} does not match the stream {cache.signature}")
    if n < 1 or n % t_c:
        raise InvalidFrameCountError(f"chunk length {n} is not a multiple of {t_c}")
    return False


def _first_lengths(n: int, t_c: int, at_start: bool) -> list[int]:
    if at_start:
        return list(make_frame_grouping(n, t_c).lengths)
    return [t_c] * (n // t_c)


def encode_chunk(x: torch.Tensor, model: VideoVAE, cache: CacheState, start: Optional[int] = None):
    """Encode one chunk ``[B,3,t,H,W]`` continuing the stream in ``cache``."""
    t_c = model.config.temporal_factor
    if x.dim() != 5 or x.shape[1] != 3:
        raise InvalidInputError(f"expected chunk [B,3,t,H,W], got {tuple(x.shape)}")
    at_start = _begin_chunk(cache, x.shape[2], (x.shape[0], *x.shape[3:]), t_c, start)
    if not at_start:
        cache.check_layers(model, "encoder")
    ctx = Context(_first_lengths(x.shape[2], t_c, at_start), at_start, cache.entries)
    mean, logvar = model.encoder(x, ctx)
    cache.frames_consumed += x.shape[2]
    return mean, logvar.clamp(*LOGVAR_RANGE)


def decode_chunk(z: torch.Tensor, model: VideoVAE, cache: CacheState, start: Optional[int] = None):
    """Decode latent steps ``[B,Z,t,h,w]``; ``frames_consumed`` counts latent steps."""
    if z.dim() != 5 or z.shape[1] != model.config.z:
        raise InvalidInputError(f"expected latent [B,{model.config.z},t,h,w], got {tuple(z.shape)}")
    at_start = _begin_chunk(cache, z.shape[2], (z.shape[0], *z.shape[3:]), 1, start)
    if not at_start:
        cache.check_layers(model, "decoder")
    ctx = Context([1] * z.shape[2], at_start, cache.entries)
    out = model.decoder(z, ctx)
    cache.frames_consumed += z.shape[2]
    return out


def encode_streaming(chunks: Iterable[torch.Tensor], model: VideoVAE, cache: Optional[CacheState] = None,
                     on_chunk: Optional[Callable[[ChunkRecord], None]] = None) -> list[LatentPosterior]:
    cache = CacheState() if cache is None else cache
    out = []
    with torch.no_grad():
        for i, c in enumerate(chunks):
            t0 = time.perf_counter()
            xb, squeeze = _batched(c)
            mean, logvar = encode_chunk(xb, model, cache)
            if squeeze:
                mean, logvar = mean[0], logvar[0]
            out.append(LatentPosterior(mean, logvar))
            if on_chunk:
                on_chunk(ChunkRecord(i, xb.shape[2], time.perf_counter() - t0))
    return out


def decode_streaming(slices: Iterable[torch.Tensor], model: VideoVAE, cache: Optional[CacheState] = None,
                     on_chunk: Optional[Callable[[ChunkRecord], None]] = None) -> list[torch.Tensor]:
    cache = CacheState() if cache is None else cache
    out = []
    with torch.no_grad():
        for i, z in enumerate(slices):
            t0 = time.perf_counter()
            zb, squeeze = _batched(z)
            y = decode_chunk(zb, model, cache)
            out.append(y[0] if squeeze else y)
            if on_chunk:
                on_chunk(ChunkRecord(i, y.shape[2], time.perf_counter() - t0))
    return out


def split_video(x: torch.Tensor, t_c: int = 4) -> list[torch.Tensor]:
    """Split a ``[..., 3, T, H, W]`` video into cache-mode chunks."""
    tdim = x.dim() - 3
    out, s = [], 0
    for n in chunk_video(x.shape[tdim], t_c):
        out.append(x.narrow(tdim, s, n))
        s += n
    return out


def stream_reconstruct(x: torch.Tensor, model: VideoVAE,
                       on_chunk: Optional[Callable[[ChunkRecord], None]] = None) -> torch.Tensor:
    """Cache-mode reconstruction from posterior means: every input chunk is
    encoded, and its latent steps decoded, as soon as it arrives."""
    xb, squeeze = _batched(x)
    model.check_input(xb)
    enc, dec = CacheState(), CacheState()
    outs = []
    with torch.no_grad():
        for i, c in enumerate(split_video(xb, model.config.temporal_factor)):
            t0 = time.perf_counter()
            mean, _ = encode_chunk(c, model, enc)
            outs.append(decode_chunk(mean, model, dec))
            if on_chunk:
                on_chunk(ChunkRecord(i, c.shape[2], time.perf_counter() - t0))
    y = torch.cat(outs, dim=2)
    return y[0] if squeeze else y


def single_reconstruct(x: torch.Tensor, model: VideoVAE) -> torch.Tensor:
    xb, squeeze = _batched(x)
    with torch.no_grad():
        mean, _ = model.encode_tensor(xb)
        y = model.decode_tensor(mean)
    return y[0] if squeeze else y


def overlap_clips(T: int, clip_len: int, t_c: int = 4) -> list[tuple[int, int]]:
    """``(start, stop)`` of clips that share one frame with their predecessor."""
    if clip_len < 1 or (clip_len - 1) % t_c:
        raise InvalidFrameCountError(f"clip length {clip_len} is not 1 (mod {t_c})")
    make_frame_grouping(T, t_c)
    if clip_len >= T:
        return [(0, T)]
    step = clip_len - 1
    clips, s = [], 0
    while s < T - 1:
        clips.append((s, min(s + clip_len, T)))
        s += step
    return clips


def overlap_reconstruct(x: torch.Tensor, model: VideoVAE, clip_len: int,
                        on_chunk: Optional[Callable[[ChunkRecord], None]] = None) -> torch.Tensor:
    """Clip-wise single-step reconstruction; each clip after the first
    re-encodes the previous clip's last frame as its history frame and drops
    it from the output."""
    xb, squeeze = _batched(x)
    model.check_input(xb)
    outs = []
    for i, (a, b) in enumerate(overlap_clips(xb.shape[2], clip_len, model.config.temporal_factor)):
        t0 = time.perf_counter()
        y = single_reconstruct(xb[:, :, a:b], model)
        outs.append(y if i == 0 else y[:, :, 1:])
        if on_chunk:
            on_chunk(ChunkRecord(i, b - a, time.perf_counter() - t0))
    y = torch.cat(outs, dim=2)
    return y[0] if squeeze else y


def frame_passes(T: int, mode: str, clip_len: Optional[int] = None, t_c: int = 4) -> int:
    """Input frames pushed through the encoder for a whole reconstruction."""
    if mode in ("single", "cache"):
        make_frame_grouping(T, t_c)
        return T
    if mode == "overlap":
        return sum(b - a for a, b in overlap_clips(T, clip_len, t_c))
    raise ValueError(f"unknown mode {mode!r}")


def decode_activation_profile(z: torch.Tensor, model: VideoVAE, chunked: bool) -> dict:
    """Activation accounting of one-shot vs latent-step-by-step decoding
    (peaks are per layer call, so chunking lowers them)."""
    zb, _ = _batched(z)
    if chunked:
        def run():
            cache = CacheState()
            for t in range(zb.shape[2]):
                decode_chunk(zb[:, :, t:t + 1], model, cache)
    else:
        def run():
            model.decode_tensor(zb)
    return activation_profile(run, model.decoder)
