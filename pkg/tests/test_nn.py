import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mirnetv2 import tensor as T
from mirnetv2.nn import (
    ConvParams,
    ResampleParams,
    activation,
    avg_pool2x,
    bilinear_up2x,
    conv2d,
    downsample2x,
    upsample2x,
)
from mirnetv2.tensor import ShapeError, Tape, Tensor

from oracles import conv2d_loop, fd_grad, pool_loop, rel_err, upsample_loop


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def identity_proj(c):
    return ConvParams(t64(np.eye(c).reshape(c, c, 1, 1)))


# ---------------------------------------------------------------------------
# conv2d

def test_identity_1x1_kernel():
    x = t64(np.random.default_rng(0).standard_normal((2, 4, 5, 6)))
    assert np.array_equal(conv2d(x, identity_proj(4)).data, x.data)


def test_ones_kernel_hand_values():
    out = conv2d(t64(np.ones((1, 1, 3, 3))), ConvParams(t64(np.ones((1, 1, 3, 3))), padding=1)).data[0, 0]
    assert out.tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]


def test_grouped_equals_two_independent_convs():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 6, 7, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    full = conv2d(t64(x), ConvParams(t64(w), t64(b), padding=1, groups=2)).data
    lo = conv2d(t64(x[:, :3]), ConvParams(t64(w[:2]), t64(b[:2]), padding=1)).data
    hi = conv2d(t64(x[:, 3:]), ConvParams(t64(w[2:]), t64(b[2:]), padding=1)).data
    assert np.array_equal(full, np.concatenate([lo, hi], axis=1))


@given(
    n=st.integers(1, 2), groups=st.sampled_from([1, 2, 3]), cig=st.integers(1, 3), cog=st.integers(1, 2),
    k=st.sampled_from([1, 3]), stride=st.integers(1, 2), pad=st.integers(0, 1),
    h=st.integers(3, 7), w=st.integers(3, 7), bias=st.booleans(), seed=st.integers(0, 10_000),
)
def test_conv_matches_scalar_loop(n, groups, cig, cog, k, stride, pad, h, w, bias, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, groups * cig, h, w))
    wt = rng.standard_normal((groups * cog, cig, k, k))
    b = rng.standard_normal(groups * cog) if bias else None
    p = ConvParams(t64(wt), None if b is None else t64(b), stride=stride, padding=pad, groups=groups)
    out = conv2d(t64(x), p).data
    ref = conv2d_loop(x, wt, b, stride, pad, groups)
    assert out.shape == ref.shape
    assert np.allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k,stride,pad,groups,bias", [
    (3, 1, 1, 1, True), (3, 1, 1, 2, True), (3, 2, 1, 1, False), (1, 1, 0, 2, False), (3, 1, 0, 1, True),
])
def test_conv_gradients(k, stride, pad, groups, bias):
    rng = np.random.default_rng(4)
    x = t64(rng.standard_normal((2, 4, 5, 6)), True)
    w = t64(rng.standard_normal((4, 4 // groups, k, k)), True)
    b = t64(rng.standard_normal(4), True) if bias else None
    p = ConvParams(w, b, stride=stride, padding=pad, groups=groups)
    r = Tensor(rng.standard_normal(conv2d(x, p).shape))
    loss = lambda: T.total(T.mul(conv2d(x, p), r))
    with Tape() as tape:
        val = loss()
    g = tape.backward(val)
    for leaf in [x, w] + ([b] if bias else []):
        assert rel_err(g[leaf], fd_grad(lambda: loss().item(), leaf.data), floor=1e-8) < 1e-6


def test_conv_param_count():
    for cin, cout, k, g, bias in [(8, 8, 3, 2, True), (80, 80, 3, 1, False), (12, 6, 1, 3, True)]:
        p = ConvParams(t64(np.zeros((cout, cin // g, k, k))), t64(np.zeros(cout)) if bias else None, groups=g)
        assert p.num_params() == cout * (cin // g) * k * k + (cout if bias else 0)
        assert p.in_channels == cin


def test_fewer_groups_means_more_params():
    g1 = ConvParams(t64(np.zeros((80, 80, 3, 3))), groups=1)
    g2 = ConvParams(t64(np.zeros((80, 40, 3, 3))), groups=2)
    assert g1.num_params() > g2.num_params()


def test_conv_errors():
    with pytest.raises(ShapeError):
        ConvParams(t64(np.zeros((3, 2, 3, 3))), groups=2)  # C_out not divisible
    with pytest.raises(ShapeError):
        ConvParams(t64(np.zeros((2, 2, 5, 5))))  # k not in {1, 3}
    with pytest.raises(ShapeError):
        conv2d(t64(np.zeros((1, 3, 4, 4))), ConvParams(t64(np.zeros((2, 2, 1, 1)))))
    with pytest.raises(ShapeError):
        conv2d(t64(np.zeros((1, 3, 4, 4))), ConvParams(t64(np.zeros((2, 1, 1, 1))), groups=2))
    with pytest.raises(ShapeError):
        conv2d(t64(np.zeros((1, 1, 2, 2))), ConvParams(t64(np.zeros((1, 1, 3, 3)))))


# ---------------------------------------------------------------------------
# resampling

def test_down_constant():
    out = downsample2x(t64(np.full((1, 3, 4, 6), 0.7)), ResampleParams("down2x", identity_proj(3)))
    assert out.shape == (1, 3, 2, 3) and np.allclose(out.data, 0.7, rtol=1e-15)


def test_pool_block_means():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out = avg_pool2x(t64(x)).data
    assert out[0, 0].tolist() == [[2.5, 4.5], [10.5, 12.5]]
    assert np.array_equal(out, pool_loop(x))
    assert out.mean() == x.mean()


def test_down_odd_extent_error():
    with pytest.raises(ShapeError):
        downsample2x(t64(np.zeros((1, 2, 5, 4))), ResampleParams("down2x", identity_proj(2)))


def test_up_constant():
    out = upsample2x(t64(np.full((1, 2, 3, 2), -1.25)), ResampleParams("up2x", identity_proj(2)))
    assert out.shape == (1, 2, 6, 4) and np.all(out.data == -1.25)


def test_up_row_example():
    out = bilinear_up2x(t64(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))).data
    assert out[0, 0, 0].tolist() == [0.0, 0.25, 0.75, 1.0]


@given(h=st.integers(1, 5), w=st.integers(1, 5), seed=st.integers(0, 1000))
def test_up_matches_sample_center_oracle(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, h, w))
    assert np.allclose(bilinear_up2x(t64(x)).data, upsample_loop(x), rtol=1e-12, atol=1e-12)


@given(h=st.integers(1, 4), w=st.integers(1, 4), c=st.floats(-5, 5))
def test_down_up_round_trip(h, w, c):
    x = t64(np.full((1, 2, 2 * h, 2 * w), c))
    up = upsample2x(downsample2x(x, ResampleParams("down2x", identity_proj(2))),
                    ResampleParams("up2x", identity_proj(2)))
    assert up.shape == x.shape
    down = downsample2x(upsample2x(x, ResampleParams("up2x", identity_proj(2))),
                        ResampleParams("down2x", identity_proj(2)))
    assert np.allclose(down.data, x.data, rtol=1e-14, atol=1e-14)


def test_projection_commutes_with_bilinear():
    rng = np.random.default_rng(8)
    x = t64(rng.standard_normal((2, 5, 3, 4)))
    p = ConvParams(t64(rng.standard_normal((3, 5, 1, 1))))
    ours = upsample2x(x, ResampleParams("up2x", p)).data
    other = conv2d(bilinear_up2x(x), p).data
    assert np.allclose(ours, other, rtol=1e-12, atol=1e-12)


def test_resample_params_contract():
    with pytest.raises(ValueError):
        ResampleParams("sideways", identity_proj(2))
    with pytest.raises(ShapeError):
        ResampleParams("up2x", ConvParams(t64(np.zeros((2, 2, 3, 3)))))
    with pytest.raises(ValueError):
        upsample2x(t64(np.zeros((1, 2, 2, 2))), ResampleParams("down2x", identity_proj(2)))


@pytest.mark.parametrize("op", [avg_pool2x, bilinear_up2x])
def test_resample_gradients(op):
    rng = np.random.default_rng(6)
    x = t64(rng.standard_normal((2, 3, 4, 6)), True)
    r = Tensor(rng.standard_normal(op(x).shape))
    loss = lambda: T.total(T.mul(op(x), r))
    with Tape() as tape:
        val = loss()
    g = tape.backward(val)[x]
    assert rel_err(g, fd_grad(lambda: loss().item(), x.data), floor=1e-8) < 1e-6


# ---------------------------------------------------------------------------
# activation

def test_relu_examples():
    assert np.all(activation(t64(-np.arange(1.0, 5.0))).data == 0)
    assert activation(t64([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_relu_gradient_mask_matches_fd():
    x = t64(np.array([-1.5, -0.2, 0.4, 2.0, 0.0]), True)
    with Tape() as tape:
        loss = T.total(activation(x))
    g = tape.backward(loss)[x]
    assert g[-1] == 0.0  # subgradient at the kink
    x4 = t64(x.data[:4], True)
    num = fd_grad(lambda: T.total(activation(x4)).item(), x4.data)
    assert np.allclose(g[:4], num, rtol=1e-9)


def test_unknown_activation():
    with pytest.raises(ValueError):
        activation(t64([1.0]), "gelu")
