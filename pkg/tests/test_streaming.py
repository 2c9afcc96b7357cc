import pytest
import torch
from hypothesis import given, strategies as st

from ivvae.errors import InvalidFrameCountError, StaleCacheError
from ivvae.streaming import (
    CacheState,
    chunk_video,
    decode_activation_profile,
    decode_chunk,
    decode_streaming,
    encode_chunk,
    encode_streaming,
    frame_passes,
    overlap_clips,
    overlap_reconstruct,
    single_reconstruct,
    split_video,
    stream_reconstruct,
)

from conftest import VIDEO_VARIANTS, tiny_model


def video(T, h=16, w=16, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, 3, T, h, w, generator=g, dtype=dtype) * 2 - 1


@pytest.fixture(scope="module", params=VIDEO_VARIANTS)
def model64(request):
    return tiny_model(request.param, dtype=torch.float64)


def test_chunk_video_examples():
    assert chunk_video(49) == [1] + [4] * 12
    assert chunk_video(1) == [1]
    assert chunk_video(17) == [1, 4, 4, 4, 4]
    with pytest.raises(InvalidFrameCountError):
        chunk_video(16)


def test_encode_streaming_equals_single_step(model64):
    x = video(17)
    posts = encode_streaming(split_video(x), model64)
    with torch.no_grad():
        mean, logvar = model64.encode_tensor(x)
    assert torch.equal(torch.cat([p.mean for p in posts], 2), mean)
    assert torch.equal(torch.cat([p.logvar for p in posts], 2), logvar)


def test_decode_streaming_equals_one_shot(model64):
    z = torch.randn(1, 4, 13, 2, 2, dtype=torch.float64)
    outs = decode_streaming([z[:, :, t:t + 1] for t in range(13)], model64)
    with torch.no_grad():
        ref = model64.decode_tensor(z)
    assert torch.equal(torch.cat(outs, 2), ref)
    with torch.no_grad():
        assert torch.equal(outs[0], model64.decode_tensor(z[:, :, :1]))


def test_single_chunk_is_single_step(model64):
    x = video(9)
    posts = encode_streaming([x], model64)
    with torch.no_grad():
        assert torch.equal(posts[0].mean, model64.encode_tensor(x)[0])


def test_stream_reconstruct_bitwise_float64(model64):
    x = video(17)
    assert torch.equal(stream_reconstruct(x, model64), single_reconstruct(x, model64))


@pytest.mark.parametrize("variant", VIDEO_VARIANTS)
def test_stream_reconstruct_float32(variant):
    model = tiny_model(variant)
    x = video(17, dtype=torch.float32)
    err = (stream_reconstruct(x, model) - single_reconstruct(x, model)).abs().max().item()
    assert err <= 1e-5


def test_uneven_chunks_also_match(model64):
    x = video(17)
    chunks = [x[:, :, :9], x[:, :, 9:13], x[:, :, 13:]]
    posts = encode_streaming(chunks, model64)
    with torch.no_grad():
        assert torch.equal(torch.cat([p.mean for p in posts], 2), model64.encode_tensor(x)[0])


@given(k=st.integers(1, 4), seed=st.integers(0, 100))
def test_chunk_prefix_property(k, seed):
    model = tiny_model("baseline-causal", dtype=torch.float64)
    x = video(17, seed=seed)
    y = x.clone()
    cut = 1 + 4 * (k - 1)
    y[:, :, cut:] = torch.rand_like(y[:, :, cut:])
    a = encode_streaming(split_video(x), model)
    b = encode_streaming(split_video(y), model)
    for i in range(k):
        assert torch.equal(a[i].mean, b[i].mean)


def test_cache_holds_front_padding_per_layer(model64):
    cache = CacheState()
    encode_chunk(video(1), model64, cache)
    cache.check_layers(model64, "encoder")
    assert cache.frames_consumed == 1
    for m in model64.encoder.modules():
        if getattr(m, "layer_id", None) and m.front_padding:
            assert cache.entries[m.layer_id].shape[2] == m.front_padding


def test_stale_cache_errors(model64):
    cache = CacheState()
    encode_chunk(video(5), model64, cache)
    with pytest.raises(StaleCacheError):
        encode_chunk(video(4), model64, cache, start=9)
    with pytest.raises(StaleCacheError):
        encode_chunk(video(4, h=24, w=24), model64, cache)
    # a cache from a decoder stream lacks the encoder layers
    dec = CacheState()
    decode_chunk(torch.randn(1, 4, 1, 2, 2, dtype=torch.float64), model64, dec)
    with pytest.raises(StaleCacheError):
        encode_chunk(video(4), model64, dec)
    broken = CacheState(entries={"x": torch.zeros(1)})
    with pytest.raises(StaleCacheError):
        encode_chunk(video(1), model64, broken)
    cache.reset()
    encode_chunk(video(1), model64, cache)


def test_chunk_length_rules(model64):
    with pytest.raises(InvalidFrameCountError):
        encode_chunk(video(4), model64, CacheState())
    cache = CacheState()
    encode_chunk(video(1), model64, cache)
    with pytest.raises(InvalidFrameCountError):
        encode_chunk(video(3), model64, cache)


# -------------------------------------------------------------- overlap


def test_overlap_clips_49_by_5():
    clips = overlap_clips(49, 5)
    assert len(clips) == 12
    assert all(b - a == 5 for a, b in clips)
    assert all(clips[i + 1][0] == clips[i][1] - 1 for i in range(11))
    assert clips[-1][1] == 49


def test_frame_pass_counts():
    assert frame_passes(49, "cache") == 49
    assert frame_passes(49, "overlap", 5) == 60
    with pytest.raises(InvalidFrameCountError):
        overlap_clips(49, 4)


@given(g=st.integers(1, 20), c=st.integers(1, 5))
def test_overlap_work_accounting(g, c):
    T, clip = 1 + 4 * g, 1 + 4 * c
    n = len(overlap_clips(T, clip))
    assert frame_passes(T, "overlap", clip) == T + n - 1 >= T
    assert frame_passes(T, "cache") == T


def test_overlap_full_clip_is_single_step(model64):
    x = video(9)
    assert torch.equal(overlap_reconstruct(x, model64, 9), single_reconstruct(x, model64))


def test_overlap_output_length(model64):
    x = video(17)
    assert overlap_reconstruct(x, model64, 5).shape == x.shape


def test_chunked_decode_lowers_peak_activations():
    model = tiny_model("iv-vae")
    z = torch.randn(1, 4, 5, 4, 4)
    one = decode_activation_profile(z, model, chunked=False)
    chunked = decode_activation_profile(z, model, chunked=True)
    assert chunked["peak_live"] < one["peak_live"]
