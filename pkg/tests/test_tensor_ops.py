import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from acdmar import backend, tensor_ops as T
from acdmar.tensor_ops import DimensionError
from oracles import (conv2d_naive, conv_same_naive, corr_same_naive, synthesize_naive,
                     weighted_combine_naive)

BACKENDS = [b for b in ("python", "compiled") if b == "python" or backend.compiled_kernels]


@pytest.fixture(params=[(b, path) for b in BACKENDS for path in ("gemm", "direct")],
                ids=lambda p: f"{p[0]}-{p[1]}")
def impl(request, monkeypatch):
    """Run a test once per kernel backend and per lowering strategy."""
    name, path = request.param
    kern = backend.python_kernels if name == "python" else backend.compiled_kernels
    monkeypatch.setattr(T, "kernels", kern)
    monkeypatch.setattr(T, "_use_gemm", lambda xs, ws: path == "gemm")
    return request.param


def test_conv_same_delta_is_identity(impl, rng):
    img = rng.standard_normal((7, 9))
    delta = np.zeros((5, 5))
    delta[2, 2] = 1.0
    np.testing.assert_array_equal(T.conv_same(delta, img), img)


def test_conv_same_zero_image(impl, rng):
    assert not T.conv_same(rng.standard_normal((3, 3)), np.zeros((6, 6))).any()


def test_conv_same_ones(impl):
    out = T.conv_same(np.ones((3, 3)), np.ones((3, 3)))
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0


def test_conv_same_is_flipped(impl):
    # an off-centre tap moves the image towards the tap's mirror
    f = np.zeros((3, 3))
    f[0, 0] = 1.0
    img = np.zeros((5, 5))
    img[2, 2] = 1.0
    out = T.conv_same(f, img)
    assert out[1, 1] == 1.0 and out.sum() == 1.0


def test_conv_same_oracle(impl, rng):
    f = rng.standard_normal((5, 5))
    img = rng.standard_normal((8, 11))
    np.testing.assert_allclose(T.conv_same(f, img), conv_same_naive(f, img), atol=1e-12)


def test_conv2d_oracle(impl, rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    np.testing.assert_allclose(T.conv2d(x, w), conv2d_naive(x, w), atol=1e-12)


def test_conv2d_grads_are_adjoints(impl, rng):
    x = rng.standard_normal((2, 3, 8, 7))
    w = rng.standard_normal((5, 3, 5, 5))
    gy = rng.standard_normal((2, 5, 8, 7))
    lhs = np.vdot(T.conv2d(x, w), gy)
    assert np.isclose(lhs, np.vdot(x, T.conv2d_input_grad(gy, w)), rtol=1e-12, atol=1e-10)
    assert np.isclose(lhs, np.vdot(w, T.conv2d_weight_grad(x, gy, (5, 5))), rtol=1e-12, atol=1e-10)


def test_conv_bank_sum_oracle(impl, rng):
    bank = rng.standard_normal((3, 3, 3))
    codes = rng.standard_normal((3, 6, 6))
    ref = sum(conv_same_naive(bank[n], codes[n]) for n in range(3))
    np.testing.assert_allclose(T.conv_bank_sum(bank, codes), ref, atol=1e-12)


def test_conv_bank_sum_single_channel_and_zero(impl, rng):
    bank = rng.standard_normal((1, 5, 5))
    codes = rng.standard_normal((1, 9, 9))
    np.testing.assert_allclose(T.conv_bank_sum(bank, codes), T.conv_same(bank[0], codes[0]),
                               atol=1e-14)
    assert not T.conv_bank_sum(bank, np.zeros_like(codes)).any()


def test_conv_transpose_bank_oracle_and_delta(impl, rng):
    bank = rng.standard_normal((4, 3, 3))
    R = rng.standard_normal((8, 8))
    out = T.conv_transpose_bank(bank, R)
    for n in range(4):
        np.testing.assert_allclose(out[n], corr_same_naive(bank[n], R), atol=1e-12)
    delta = np.zeros((3, 5, 5))
    delta[:, 2, 2] = 1.0
    np.testing.assert_array_equal(T.conv_transpose_bank(delta, R), np.stack([R] * 3))
    assert not T.conv_transpose_bank(bank, np.zeros((8, 8))).any()


def test_adjoint_identity_100_trials(impl):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        N = int(rng.integers(1, 5))
        p = int(rng.choice([1, 3, 5]))
        H, W = (int(v) for v in rng.integers(3, 9, size=2))
        B = rng.standard_normal((N, p, p))
        M = rng.standard_normal((N, H, W))
        R = rng.standard_normal((H, W))
        lhs = np.vdot(T.conv_bank_sum(B, M), R)
        rhs = np.vdot(M, T.conv_transpose_bank(B, R))
        worst = max(worst, abs(lhs - rhs))
    assert worst < 1e-10


def test_depthwise_conv(impl, rng):
    D = rng.standard_normal((4, 9, 9))
    plane = rng.standard_normal((12, 12))
    out = T.depthwise_conv(D, plane)
    for i in range(4):
        np.testing.assert_allclose(out[i], conv_same_naive(D[i], plane), atol=1e-12)
    delta = np.zeros((3, 3, 3))
    delta[:, 1, 1] = 1
    np.testing.assert_array_equal(T.depthwise_conv(delta, plane), np.stack([plane] * 3))
    np.testing.assert_allclose(T.depthwise_conv(D[:1], plane)[0], T.conv_same(D[0], plane),
                               atol=1e-14)


def test_mode3_unfold_examples():
    t = np.zeros((2, 2, 2))
    t[0] = [[1, 2], [3, 4]]
    assert T.mode3_unfold(t)[0].tolist() == [1, 2, 3, 4]
    fiber = np.arange(5.0).reshape(5, 1, 1)
    np.testing.assert_array_equal(T.mode3_unfold(fiber), np.arange(5.0)[:, None])


@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6))
def test_mode3_round_trip(C, H, W):
    t = np.random.default_rng(C * 100 + H * 10 + W).standard_normal((C, H, W))
    back = T.mode3_fold(T.mode3_unfold(t), H, W)
    assert back.shape == t.shape and np.array_equal(back, t)


def test_weighted_combine(rng):
    D = rng.standard_normal((4, 3, 3))
    K = rng.standard_normal((4, 2))
    np.testing.assert_allclose(T.weighted_combine(D, K), weighted_combine_naive(D, K), atol=1e-12)
    onehot = np.zeros((4, 1))
    onehot[2, 0] = 1
    np.testing.assert_array_equal(T.weighted_combine(D, onehot)[0], D[2])
    twin = np.repeat(K[:, :1], 2, axis=1)
    out = T.weighted_combine(D, twin)
    np.testing.assert_array_equal(out[0], out[1])


def test_weighted_combine_bilinear(rng):
    D1, D2 = rng.standard_normal((2, 3, 5, 5))
    K1, K2 = rng.standard_normal((2, 3, 2))
    a, b = 1.7, -0.3
    np.testing.assert_allclose(T.weighted_combine(a * D1 + b * D2, K1),
                               a * T.weighted_combine(D1, K1) + b * T.weighted_combine(D2, K1),
                               atol=1e-12)
    np.testing.assert_allclose(T.weighted_combine(D1, a * K1 + b * K2),
                               a * T.weighted_combine(D1, K1) + b * T.weighted_combine(D1, K2),
                               atol=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**16))
def test_conv_bank_sum_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((3, 3, 3))
    M1, M2 = rng.standard_normal((2, 3, 7, 7))
    lhs = T.conv_bank_sum(B, a * M1 + b * M2)
    rhs = a * T.conv_bank_sum(B, M1) + b * T.conv_bank_sum(B, M2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_dimension_errors(rng):
    with pytest.raises(DimensionError):
        T.conv_bank_sum(rng.standard_normal((2, 3, 3)), rng.standard_normal((3, 5, 5)))
    with pytest.raises(DimensionError):
        T.weighted_combine(rng.standard_normal((4, 3, 3)), rng.standard_normal((3, 2)))
    with pytest.raises(DimensionError):
        T.conv2d(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((1, 3, 3, 3)))
    with pytest.raises(DimensionError):
        T.conv_same(np.ones((2, 2)), np.ones((4, 4)))


def test_synthesis_oracle_shared(rng):
    # the oracle module itself: synthesis equals the sum of per-atom convolutions
    D = rng.standard_normal((3, 3, 3))
    K = rng.standard_normal((3, 2))
    M = rng.standard_normal((2, 5, 5))
    filt = weighted_combine_naive(D, K)
    ref = conv_same_naive(filt[0], M[0]) + conv_same_naive(filt[1], M[1])
    np.testing.assert_allclose(synthesize_naive(D, K, M), ref, atol=1e-13)
