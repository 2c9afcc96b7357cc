import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from ivvae.convops import (
    ConvSpec3D,
    Context,
    FeatureMap,
    FrameGrouping,
    TemporalConv,
    causal_conv,
    causal_conv3d_forward,
    gcconv3d_forward,
    group_causal_pad,
    group_conv,
    inflate_conv2d,
    make_frame_grouping,
    rmsnorm,
    selector_weight,
    temporal_downsample,
    temporal_upsample,
)
from ivvae.errors import (
    InvalidFrameCountError,
    InvalidGroupingError,
    InvalidKernelError,
    ShapeError,
)

from oracles import causal_oracle, conv2d_frame, gcconv_oracle


def fmap(c, lengths, h=5, w=6, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return FeatureMap(torch.randn(c, sum(lengths), h, w, generator=g, dtype=dtype),
                      FrameGrouping(tuple(lengths)))


def kernel(co, ci, kt, k=3, seed=1, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(co, ci, kt, k, k, generator=g, dtype=dtype)


# -------------------------------------------------------------- grouping


@pytest.mark.parametrize("T,expected", [(17, [1, 4, 4, 4, 4]), (1, [1]), (9, [1, 4, 4])])
def test_make_frame_grouping_examples(T, expected):
    assert list(make_frame_grouping(T, 4).lengths) == expected


@pytest.mark.parametrize("T", [0, 2, 4, 16, 18])
def test_make_frame_grouping_rejects_bad_counts(T):
    with pytest.raises(InvalidFrameCountError):
        make_frame_grouping(T, 4)


@given(st.integers(0, 30))
def test_grouping_covers_frames(g):
    fg = make_frame_grouping(1 + 4 * g)
    assert fg.lengths[0] == 1 and fg.total == 1 + 4 * g
    assert set(fg.lengths[1:]) <= {4}


def test_grouping_invariants_enforced():
    with pytest.raises(InvalidGroupingError):
        FrameGrouping((2, 4))
    with pytest.raises(InvalidGroupingError):
        FrameGrouping((1, 4, 2))
    with pytest.raises(InvalidGroupingError):
        FeatureMap(torch.zeros(1, 6, 2, 2), FrameGrouping((1, 4)))


def test_conv_spec_validation():
    with pytest.raises(InvalidKernelError):
        ConvSpec3D(kernel=(2, 3, 3))
    with pytest.raises(InvalidKernelError):
        ConvSpec3D(kernel=(3, 3, 3), padding_mode="standard-2d")
    ConvSpec3D(kernel=(1, 3, 3), padding_mode="standard-2d")


# -------------------------------------------------------------- padding


def test_group_causal_pad_k3_example():
    fm = fmap(2, [1, 4])
    x = fm.data
    g0, g1 = group_causal_pad(fm, 3)
    z = torch.zeros_like(x[:, 0])
    assert torch.equal(g0, torch.stack([x[:, 0], x[:, 0], z], 1))
    assert torch.equal(g1, torch.stack([x[:, 0], x[:, 1], x[:, 2], x[:, 3], x[:, 4], z], 1))


def test_group_causal_pad_k1_unchanged():
    fm = fmap(2, [1, 4, 4])
    groups = group_causal_pad(fm, 1)
    assert torch.equal(torch.cat(groups, 1), fm.data)


def test_group_causal_pad_front_from_previous_group():
    fm = fmap(2, [1, 4, 4])
    g2 = group_causal_pad(fm, 3)[2]
    assert torch.equal(g2[:, 0], fm.data[:, 4])


@given(st.sampled_from([1, 3, 5, 7]), st.integers(0, 3))
def test_group_causal_pad_lengths(kt, g):
    fm = fmap(1, [1] + [4] * g, h=2, w=2)
    groups = group_causal_pad(fm, kt)
    assert [t.shape[1] for t in groups] == [n + kt - 1 for n in fm.grouping.lengths]


def test_group_causal_pad_rejects_even_kernel():
    with pytest.raises(InvalidKernelError):
        group_causal_pad(fmap(1, [1]), 2)


# -------------------------------------------------------------- convolutions vs oracle


@given(kt=st.sampled_from([1, 3, 5]), g=st.integers(0, 3), seed=st.integers(0, 10_000))
def test_gcconv_matches_definition(kt, g, seed):
    lengths = [1] + [4] * g
    fm = fmap(2, lengths, seed=seed)
    w = kernel(3, 2, kt, seed=seed + 1)
    b = torch.randn(3, dtype=torch.float64)
    y = gcconv3d_forward(fm, w, b, ConvSpec3D(kernel=(kt, 3, 3)))
    ref = gcconv_oracle(fm.data.numpy(), w.numpy(), b.numpy(), lengths)
    np.testing.assert_allclose(y.data.numpy(), ref, atol=1e-12)
    assert y.grouping == fm.grouping


@given(kt=st.sampled_from([1, 3, 5]), T=st.integers(1, 9), seed=st.integers(0, 10_000))
def test_causal_conv_matches_definition(kt, T, seed):
    x = torch.randn(2, T, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    w = kernel(3, 2, kt, seed=seed)
    b = torch.randn(3, dtype=torch.float64)
    y, lengths, _ = causal_conv(x[None], w, b, [1] * T)
    np.testing.assert_allclose(y[0].numpy(), causal_oracle(x.numpy(), w.numpy(), b.numpy()), atol=1e-12)
    assert lengths == [1] * T


def test_gcconv_strided_matches_definition():
    lengths = [1, 4, 4]
    fm = fmap(2, lengths)
    w = kernel(2, 2, 3, k=1)
    y, out_lengths, _ = group_conv(fm.data[None], w, None, lengths, t_stride=2)
    ref = gcconv_oracle(fm.data.numpy(), w.numpy(), None, lengths, t_stride=2)
    assert out_lengths == [1, 2, 2]
    np.testing.assert_allclose(y[0].numpy(), ref, atol=1e-12)


def test_causal_strided_matches_definition():
    x = torch.randn(2, 9, 3, 3, dtype=torch.float64)
    w = kernel(2, 2, 3, k=1)
    y, out_lengths, _ = causal_conv(x[None], w, None, [1, 4, 4], t_stride=2)
    assert out_lengths == [1, 2, 2]
    np.testing.assert_allclose(y[0].numpy(), causal_oracle(x.numpy(), w.numpy(), None, t_stride=2), atol=1e-12)


def test_history_replaces_front_padding():
    lengths = [4, 4]
    x = torch.randn(2, 8, 3, 3, dtype=torch.float64)
    hist = torch.randn(2, 1, 3, 3, dtype=torch.float64)
    w = kernel(2, 2, 3)
    y, _, new_hist = group_conv(x[None], w, None, lengths, at_start=False, history=hist[None])
    ref = gcconv_oracle(x.numpy(), w.numpy(), None, lengths, history=hist.numpy(), at_start=False)
    np.testing.assert_allclose(y[0].numpy(), ref, atol=1e-12)
    assert torch.equal(new_hist[0], x[:, -1:])


def test_zero_weights_give_zero_output():
    fm = fmap(2, [1, 4])
    y = gcconv3d_forward(fm, torch.zeros(3, 2, 3, 3, 3, dtype=torch.float64))
    assert torch.count_nonzero(y.data) == 0


def test_channel_mismatch_is_shape_error():
    with pytest.raises(ShapeError):
        gcconv3d_forward(fmap(2, [1, 4]), kernel(3, 5, 3))
    with pytest.raises(ShapeError):
        causal_conv3d_forward(fmap(2, [1, 4]), kernel(3, 5, 3), spec=ConvSpec3D(padding_mode="causal"))


# -------------------------------------------------------------- causality properties


@given(j=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_group_causality_of_stack(j, seed):
    lengths = [1, 4, 4, 4]
    fm = fmap(2, lengths, seed=seed)
    w1, w2 = kernel(3, 2, 3, seed=seed), kernel(2, 3, 3, seed=seed + 7)

    def run(data):
        h = gcconv3d_forward(FeatureMap(data, fm.grouping), w1)
        return gcconv3d_forward(FeatureMap(torch.tanh(h.data), fm.grouping), w2).data

    start = sum(lengths[:j])
    pert = fm.data.clone()
    pert[:, start:start + lengths[j]] += torch.randn_like(pert[:, start:start + lengths[j]])
    a, b = run(fm.data), run(pert)
    assert torch.equal(a[:, :start], b[:, :start])
    assert not torch.equal(a[:, start:], b[:, start:])


@given(t=st.integers(0, 7), seed=st.integers(0, 10_000))
def test_causal_causality(t, seed):
    x = torch.randn(1, 2, 9, 3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    w = kernel(2, 2, 3, seed=seed)
    y0, _, _ = causal_conv(x, w, None, [1] * 9)
    x2 = x.clone()
    x2[:, :, t + 1:] += 1.0
    y1, _, _ = causal_conv(x2, w, None, [1] * 9)
    assert torch.equal(y0[:, :, :t + 1], y1[:, :, :t + 1])


@pytest.mark.parametrize("layers,reached", [(2, 2), (3, 1)])
def test_within_group_interaction(layers, reached):
    # each k_t=3 layer reaches one frame further back inside the group
    lengths = [1, 4]
    fm = fmap(2, lengths, seed=3)
    ws = [kernel(2, 2, 3, seed=4 + i) for i in range(layers)]

    def run(data):
        h = FeatureMap(data, fm.grouping)
        for w in ws:
            h = gcconv3d_forward(h, w)
        return h.data

    pert = fm.data.clone()
    pert[:, 4] += 1.0  # last frame of the 4-frame group
    a, b = run(fm.data), run(pert)
    assert not torch.equal(a[:, reached], b[:, reached])
    assert torch.equal(a[:, :reached], b[:, :reached])


def test_static_video_stays_static_under_causal_conv():
    frame = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    x = frame.repeat(1, 9, 1, 1)[None]
    y, _, _ = causal_conv(x, kernel(3, 2, 3), None, [1] * 9)
    for t in range(1, 9):
        assert torch.allclose(y[:, :, t], y[:, :, 0], atol=1e-12)


# -------------------------------------------------------------- inflation


def test_inflate_examples():
    w2 = torch.randn(3, 2, 3, 3)
    tail = inflate_conv2d(w2, 3, "tail")
    assert torch.equal(tail[:, :, 2], w2) and not tail[:, :, :2].any()
    center = inflate_conv2d(w2, 3, "center")
    assert torch.equal(center[:, :, 1], w2) and not center[:, :, 0].any() and not center[:, :, 2].any()
    for p in ("tail", "center"):
        assert torch.equal(inflate_conv2d(w2, 1, p)[:, :, 0], w2)


def test_inflate_rejects_even_kt():
    with pytest.raises(InvalidKernelError):
        inflate_conv2d(torch.randn(1, 1, 3, 3), 2)


def per_frame_oracle(x, w2, b):
    return np.stack([conv2d_frame(x[:, t], w2, b) for t in range(x.shape[1])], axis=1)


@given(seed=st.integers(0, 10_000))
def test_tail_inflated_causal_equals_per_frame(seed):
    fm = fmap(3, [1, 4, 4], seed=seed)
    w2 = torch.randn(2, 3, 3, 3, dtype=torch.float64)
    b = torch.randn(2, dtype=torch.float64)
    y = causal_conv3d_forward(fm, inflate_conv2d(w2, 3, "tail"), b)
    np.testing.assert_allclose(y.data.numpy(), per_frame_oracle(fm.data.numpy(), w2.numpy(), b.numpy()),
                               rtol=1e-5, atol=1e-10)


@given(seed=st.integers(0, 10_000))
def test_center_inflated_gcconv_equals_per_frame(seed):
    fm = fmap(3, [1, 4, 4], seed=seed)
    w2 = torch.randn(2, 3, 3, 3, dtype=torch.float64)
    y = gcconv3d_forward(fm, inflate_conv2d(w2, 3, "center"))
    np.testing.assert_allclose(y.data.numpy(), per_frame_oracle(fm.data.numpy(), w2.numpy(), None),
                               rtol=1e-5, atol=1e-10)


def test_tail_inflated_gcconv_reads_the_next_frame():
    # With one previous frame in front and one zero frame behind, the last tap
    # of a group-causal window sits on the frame after the output frame.
    fm = fmap(1, [1, 4], seed=2)
    w2 = torch.randn(1, 1, 3, 3, dtype=torch.float64)
    y = gcconv3d_forward(fm, inflate_conv2d(w2, 3, "tail")).data.numpy()
    x = fm.data.numpy()
    np.testing.assert_allclose(y[:, 1], conv2d_frame(x[:, 2], w2.numpy()), atol=1e-12)
    np.testing.assert_allclose(y[:, 4], 0.0, atol=1e-12)


# -------------------------------------------------------------- RMS norm


def test_rmsnorm_examples():
    x = torch.tensor([3.0, 4.0], dtype=torch.float64).reshape(2, 1, 1, 1)
    y = rmsnorm(FeatureMap(x, FrameGrouping((1,))), torch.ones(2, dtype=torch.float64)).data
    np.testing.assert_allclose(y.ravel(), np.array([3.0, 4.0]) / math.sqrt(12.5 + 1e-6))
    unit = torch.tensor([1.0, 1.0], dtype=torch.float64).reshape(2, 1, 1, 1)
    y = rmsnorm(FeatureMap(unit, FrameGrouping((1,))), torch.ones(2, dtype=torch.float64)).data
    np.testing.assert_allclose(y.ravel(), [1 / math.sqrt(1 + 1e-6)] * 2)


@given(t=st.integers(0, 4), scale=st.floats(0.1, 10.0))
def test_rmsnorm_temporal_locality(t, scale):
    fm = fmap(4, [1, 4])
    gain = torch.rand(4, dtype=torch.float64)
    x2 = fm.data.clone()
    x2[:, t] *= scale
    a = rmsnorm(fm, gain).data
    b = rmsnorm(FeatureMap(x2, fm.grouping), gain).data
    others = [s for s in range(5) if s != t]
    assert torch.equal(a[:, others], b[:, others])


def test_rmsnorm_zero_input_is_finite():
    y = rmsnorm(FeatureMap(torch.zeros(3, 1, 2, 2), FrameGrouping((1,))), torch.ones(3)).data
    assert torch.isfinite(y).all() and not y.any()


# -------------------------------------------------------------- temporal resampling


def test_temporal_downsample_grouping():
    fm = fmap(2, [1, 4, 4])
    out = temporal_downsample(fm, kernel(2, 2, 3, k=1))
    assert list(out.grouping.lengths) == [1, 2, 2]
    out = temporal_downsample(fm, kernel(2, 2, 3, k=1), variant="causal")
    assert list(out.grouping.lengths) == [1, 2, 2]


def test_temporal_downsample_rejects_odd_groups():
    with pytest.raises(InvalidGroupingError):
        temporal_downsample(fmap(2, [1, 1, 1]), kernel(2, 2, 3, k=1))


def test_temporal_downsample_selector_picks_frames():
    fm = fmap(2, [1, 4, 4])
    # centre tap of a group-causal window at stride 2 sits on group frames 0 and 2
    out = temporal_downsample(fm, selector_weight(2, 3, taps=1, dtype=torch.float64)).data
    assert torch.equal(out, fm.data[:, [0, 1, 3, 5, 7]])
    # last tap of a causal window sits on absolute frames 0, 2, 4, ...
    out = temporal_downsample(fm, selector_weight(2, 3, taps=2, dtype=torch.float64), variant="causal").data
    assert torch.equal(out, fm.data[:, [0, 2, 4, 6, 8]])


def test_temporal_upsample_grouping_and_replication():
    fm = fmap(2, [1, 1, 1, 1, 1])
    w = selector_weight(2, 3, taps=1, dtype=torch.float64)
    out = temporal_upsample(fm, w)
    assert list(out.grouping.lengths) == [1, 2, 2, 2, 2]
    assert torch.equal(out.data, fm.data[:, [0, 1, 1, 2, 2, 3, 3, 4, 4]])
    out2 = temporal_upsample(out, w)
    assert list(out2.grouping.lengths) == [1, 4, 4, 4, 4] and out2.data.shape[1] == 17


@given(g=st.integers(0, 4))
def test_resampling_conserves_frames(g):
    fm = fmap(1, [1] + [4] * g, h=2, w=2)
    w = kernel(1, 1, 3, k=1)
    down = temporal_downsample(fm, w)
    assert down.grouping.total == 1 + 2 * g == down.data.shape[1]
    up = temporal_upsample(down, w)
    assert up.grouping.total == fm.grouping.total == up.data.shape[1]


# -------------------------------------------------------------- module


def test_temporal_conv_module_front_padding():
    assert TemporalConv(2, 2, (3, 3, 3), "gc").front_padding == 1
    assert TemporalConv(2, 2, (3, 3, 3), "causal").front_padding == 2
    assert TemporalConv(2, 2, (1, 3, 3), "2d").front_padding == 0
    with pytest.raises(InvalidKernelError):
        TemporalConv(2, 2, (3, 3, 3), "2d")


def test_temporal_conv_module_matches_functional():
    conv = TemporalConv(2, 3, (3, 3, 3), "gc").double()
    fm = fmap(2, [1, 4, 4])
    y = conv(fm.data[None], Context([1, 4, 4]))
    ref = gcconv3d_forward(fm, conv.weight.data, conv.bias.data).data
    assert torch.equal(y[0], ref)
