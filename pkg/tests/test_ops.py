import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rstt import ops
from rstt.autograd import Tape, Tensor, backward
from rstt.errors import DimensionError
from rstt.resample import bicubic_downsample, bicubic_weights, cubic_kernel, trilinear_resize


# -- matmul -------------------------------------------------------------------

def test_matmul_identity_and_zeros(rng):
    A = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(ops.matmul(np.eye(3), A).data, A)
    np.testing.assert_array_equal(ops.matmul(np.zeros((2, 3)), rng.standard_normal((3, 4))).data,
                                  np.zeros((2, 4)))


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 2))
    ref = np.zeros((4, 2))
    for i in range(4):
        for j in range(2):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(ops.matmul(a, b).data, ref, atol=1e-6)


def test_matmul_broadcast_batch(rng):
    a, b = rng.standard_normal((2, 1, 3, 4)), rng.standard_normal((5, 4, 2))
    assert ops.matmul(a, b).shape == (2, 5, 3, 2)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(np.ones((2, 3)), np.ones((4, 5)))


# -- softmax / layer norm / gelu ---------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(ops.softmax(np.zeros(4)).data, [0.25] * 4)


def test_softmax_closed_form():
    e = np.exp(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(ops.softmax(np.array([1.0, 2.0, 3.0])).data, e / e.sum(), rtol=1e-12)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-30, 30)),
       st.floats(-50, 50))
def test_softmax_sums_to_one_and_shift_invariant(x, c):
    p = ops.softmax(x, axis=-1).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(ops.softmax(x + c, axis=-1).data, p, atol=1e-9)


def test_softmax_axis_error():
    with pytest.raises(DimensionError):
        ops.softmax(np.zeros((2, 3)), axis=2)


def test_layer_norm_constant_token_is_zero():
    out = ops.layer_norm(np.full((2, 8), 3.0), np.ones(8), np.zeros(8)).data
    np.testing.assert_array_equal(out, np.zeros((2, 8)))


def test_layer_norm_zero_gamma_gives_beta(rng):
    b = rng.standard_normal(6)
    out = ops.layer_norm(rng.standard_normal((3, 6)), np.zeros(6), b).data
    np.testing.assert_array_equal(out, np.broadcast_to(b, (3, 6)))


def test_layer_norm_statistics(rng):
    x = rng.standard_normal((5, 96)).astype(np.float64) * 3 + 1
    out = ops.layer_norm(x, np.ones(96), np.zeros(96)).data
    assert np.all(np.abs(out.mean(-1)) < 1e-6)
    assert np.all(np.abs(out.var(-1) - 1) < 1e-4)


def test_gelu_values():
    assert ops.gelu(np.array([0.0])).item() == 0.0
    assert abs(ops.gelu(np.array([10.0])).item() - 10.0) < 1e-6
    ref = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    assert ops.gelu(np.array([1.0])).item() == pytest.approx(ref, abs=1e-15)


def test_gelu_float32_close_to_float64(rng):
    x = rng.standard_normal(1000)
    np.testing.assert_allclose(ops.gelu(x.astype(np.float32)).data, ops.gelu(x).data, atol=1e-6)


def test_mlp_shapes(rng):
    C = 8
    out = ops.mlp(rng.standard_normal((3, C)), rng.standard_normal((C, 4 * C)), np.zeros(4 * C),
                  rng.standard_normal((4 * C, C)), np.zeros(C))
    assert out.shape == (3, C)


# -- convolutions ---------------------------------------------------------------

def conv_oracle(x, w, b, stride, pad):
    B, C, H, W = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, co, ho, wo))
    for n in range(B):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


def test_conv_1x1_identity(rng):
    x = rng.standard_normal((1, 1, 5, 5))
    np.testing.assert_array_equal(ops.conv2d(x, np.ones((1, 1, 1, 1))).data, x)


def test_conv_zero_weights_gives_bias(rng):
    out = ops.conv2d(rng.standard_normal((2, 3, 6, 6)), np.zeros((4, 3, 3, 3)), np.arange(4.0), pad=1).data
    np.testing.assert_array_equal(out, np.broadcast_to(np.arange(4.0)[None, :, None, None], (2, 4, 6, 6)))


@pytest.mark.parametrize("stride,pad,H,W", [(2, 1, 7, 6), (1, 1, 5, 4), (2, 0, 8, 8), (1, 0, 4, 5)])
def test_conv_matches_nested_loops(rng, stride, pad, H, W):
    x = rng.standard_normal((2, 3, H, W))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = ops.conv2d(x, w, b, stride=stride, pad=pad).data
    ref = conv_oracle(x, w, b, stride, pad)
    assert out.shape == ref.shape == (2, 4, (H + 2 * pad - 3) // stride + 1, (W + 2 * pad - 3) // stride + 1)
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        ops.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((3, 4, 3, 3)))


def test_conv_transpose_ones_kernel_tiles():
    x = np.arange(6.0).reshape(1, 1, 2, 3)
    out = ops.conv_transpose2d(x, np.ones((1, 1, 2, 2)), stride=2).data
    np.testing.assert_array_equal(out[0, 0], np.kron(x[0, 0], np.ones((2, 2))))


def test_conv_transpose_zero_input_gives_bias(rng):
    out = ops.conv_transpose2d(np.zeros((1, 3, 4, 5)), rng.standard_normal((3, 2, 2, 2)),
                               np.array([1.5, -2.0]), stride=2).data
    assert out.shape == (1, 2, 8, 10)
    np.testing.assert_array_equal(out[0, 0], 1.5)
    np.testing.assert_array_equal(out[0, 1], -2.0)


def test_conv2d_input_gradient_equals_transposed_conv(rng, f64):
    x = Tensor(rng.standard_normal((1, 6, 6, 2)), requires_grad=True)
    w = rng.standard_normal((3, 2, 3, 3))
    g = rng.standard_normal((1, 3, 3, 3))
    with Tape() as tape:
        loss = ops.sum(ops.mul(ops.conv2d_nhwc(x, w, stride=2, pad=1), g))
    backward(loss, tape)
    adj = ops.conv_transpose2d_nhwc(g, w, stride=2, pad=1, output_padding=1).data
    np.testing.assert_allclose(x.grad, adj, atol=1e-12)


def test_conv_transpose_matches_scatter_oracle(rng):
    x = rng.standard_normal((1, 2, 3, 2))
    w = rng.standard_normal((2, 3, 2, 2))
    ref = np.zeros((1, 3, 6, 4))
    for c in range(2):
        for i in range(3):
            for j in range(2):
                ref[0, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2] += x[0, c, i, j] * w[c]
    np.testing.assert_allclose(ops.conv_transpose2d(x, w, stride=2).data, ref, atol=1e-12)


# -- pixel shuffle ----------------------------------------------------------------

def test_pixel_shuffle_index_law():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)
    np.testing.assert_array_equal(ops.pixel_shuffle(x, 2).data[0, 0], [[1, 2], [3, 4]])


def test_pixel_shuffle_r1_identity(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_array_equal(ops.pixel_shuffle(x, 1).data, x)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
def test_pixel_shuffle_inverse_is_exact(c, r, H, W):
    x = np.random.default_rng(c * 100 + r).standard_normal((2, c * r * r, H, W))
    y = ops.pixel_shuffle(x, r).data
    assert y.shape == (2, c, H * r, W * r)
    np.testing.assert_array_equal(ops.pixel_unshuffle(y, r), x)


def test_pixel_shuffle_divisibility():
    with pytest.raises(DimensionError):
        ops.pixel_shuffle(np.zeros((1, 6, 2, 2)), 2)


# -- resampling -------------------------------------------------------------------

def trilinear_oracle(x, T2, H2, W2):
    T, C, H, W = x.shape

    def coord(d, n_in, n_out):
        s = d * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
        i0 = min(int(math.floor(s)), n_in - 1)
        return i0, min(i0 + 1, n_in - 1), s - i0

    out = np.zeros((T2, C, H2, W2))
    for t in range(T2):
        t0, t1, ft = coord(t, T, T2)
        for i in range(H2):
            y0, y1, fy = coord(i, H, H2)
            for j in range(W2):
                x0, x1, fx = coord(j, W, W2)
                acc = 0
                for ti, wt in ((t0, 1 - ft), (t1, ft)):
                    for yi, wy in ((y0, 1 - fy), (y1, fy)):
                        for xi, wx in ((x0, 1 - fx), (x1, fx)):
                            acc = acc + wt * wy * wx * x[ti, :, yi, xi]
                out[t, :, i, j] = acc
    return out


def test_trilinear_equal_size_copy(rng):
    x = rng.standard_normal((4, 3, 5, 6)).astype(np.float32)
    y = trilinear_resize(x, 4, 5, 6).data
    np.testing.assert_array_equal(y, x)
    assert not np.shares_memory(y, x)


def test_trilinear_temporal_midpoint(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    y = trilinear_resize(x, 3, 4, 4).data
    np.testing.assert_allclose(y[1], (x[0] + x[1]) / 2, atol=1e-15)
    np.testing.assert_array_equal(y[0], x[0])
    np.testing.assert_array_equal(y[2], x[1])


def test_trilinear_matches_per_sample_oracle(rng):
    x = rng.standard_normal((4, 2, 3, 5))
    np.testing.assert_allclose(trilinear_resize(x, 7, 12, 20).data, trilinear_oracle(x, 7, 12, 20), atol=1e-6)


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(2, 9))
def test_trilinear_reproduces_linear_ramps(a, b, n_out):
    x = (a + b * np.arange(4.0))[:, None, None, None] * np.ones((4, 1, 2, 2))
    y = trilinear_resize(x, n_out, 2, 2).data[:, 0, 0, 0]
    t = np.arange(n_out) * 3 / (n_out - 1)
    np.testing.assert_allclose(y, a + b * t, atol=1e-9)


def test_cubic_kernel_partition_of_unity():
    for u in np.linspace(0, 1, 7):
        assert cubic_kernel(np.arange(-2, 3) - u).sum() == pytest.approx(1.0)


def test_bicubic_constant_image():
    out = bicubic_downsample(np.full((3, 16, 12), 0.7, dtype=np.float32))
    assert out.shape == (3, 4, 3)
    np.testing.assert_allclose(out, 0.7, atol=1e-6)


def test_bicubic_ramp_keeps_slope():
    x = np.tile(np.arange(32.0), (1, 32, 1))
    out = bicubic_downsample(x, 4)[0]
    interior = np.diff(out[:, 2:-2], axis=1)
    np.testing.assert_allclose(interior, 4.0, atol=1e-9)


def bicubic_oracle(img, factor):
    H, W = img.shape

    def taps(n):
        mat = np.zeros((n // factor, n))
        for i in range(n // factor):
            u = (i + 0.5) * factor - 0.5
            ws, idx = [], []
            for j in range(int(np.floor(u)) - 2 * factor, int(np.floor(u)) + 2 * factor + 1):
                ws.append(float(cubic_kernel(np.array((u - j) / factor))))
                jj = j % (2 * n)
                idx.append(jj if jj < n else 2 * n - 1 - jj)
            ws = np.array(ws) / np.sum(ws)
            for w, jj in zip(ws, idx):
                mat[i, jj] += w
        return mat

    return taps(H) @ img @ taps(W).T


def test_bicubic_matches_kernel_sum_oracle(rng):
    x = rng.uniform(0, 1, (1, 16, 20))
    np.testing.assert_allclose(bicubic_downsample(x, 4)[0], bicubic_oracle(x[0], 4), atol=1e-12)


def test_bicubic_inverts_nearest_upsampling(rng):
    img = rng.uniform(0, 1, (8, 8))
    up = np.kron(img, np.ones((4, 4)))[None]
    down = bicubic_downsample(up, 4)[0]
    pad = np.pad(img, 1, mode="symmetric")
    lo = np.min([pad[i:i + 8, j:j + 8] for i in range(3) for j in range(3)], axis=0)
    hi = np.max([pad[i:i + 8, j:j + 8] for i in range(3) for j in range(3)], axis=0)
    # cubic lobes may overshoot the local range slightly
    slack = 0.1 * (hi - lo)
    assert np.all(down >= lo - slack - 1e-12) and np.all(down <= hi + slack + 1e-12)


def test_bicubic_rows_normalized():
    np.testing.assert_allclose(bicubic_weights(40, 4).sum(axis=1), 1.0, atol=1e-12)


def test_bicubic_divisibility():
    with pytest.raises(DimensionError):
        bicubic_downsample(np.zeros((3, 10, 8)))


def test_reflect_pad_matches_numpy(rng):
    x = rng.standard_normal((2, 3, 5))
    out = ops.reflect_pad(x, (4, 13), (1, 2)).data
    np.testing.assert_array_equal(out, np.pad(x, ((0, 0), (0, 4), (0, 13)), mode="reflect"))



def test_gelu_same_values_on_and_off_tape(rng):
    x = Tensor(rng.standard_normal((4, 5)).astype(np.float32), requires_grad=True)
    off = ops.gelu(x).data
    with Tape() as tape:
        on = ops.gelu(x)
        loss = ops.sum(on)
    np.testing.assert_array_equal(on.data, off)
    backward(loss, tape)
    assert x.grad is not None
