import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from laneseg import tensor as T
from laneseg.errors import DimensionError
from oracles import conv2d_loops, numeric_grad, rel_error, REL_TOL


def conv(w, b=None, pad=1):
    w = np.asarray(w, dtype=np.float64)
    return T.ConvParams(w, np.zeros(w.shape[0]) if b is None else np.asarray(b, float), padding=pad)


# ---------------------------------------------------------------- conv2d


def test_identity_kernel_returns_input(rng):
    x = rng.normal(size=(1, 1, 3, 3))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(T.conv2d(x, conv(k)), x)


def test_impulse_with_ones_kernel_gives_ones():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 1
    out = T.conv2d(x, conv(np.ones((1, 1, 3, 3))))
    np.testing.assert_array_equal(out, np.ones((1, 1, 3, 3)))


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_loop_reference(rng, stride, pad):
    x = rng.normal(size=(1, 2, 5, 5)).astype(np.float32)
    w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    b = rng.normal(size=3).astype(np.float32)
    p = T.ConvParams(w, b, stride=stride, padding=pad)
    out = T.conv2d(x, p)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, conv2d_loops(x, w, b, stride, pad), atol=1e-5)


def test_conv_channel_mismatch_names_axis(rng):
    with pytest.raises(DimensionError) as e:
        T.conv2d(rng.normal(size=(1, 3, 4, 4)), conv(np.ones((1, 2, 3, 3))))
    assert e.value.axis == "c"


def test_conv_nonpositive_output_rejected():
    with pytest.raises(DimensionError):
        T.conv2d(np.zeros((1, 1, 2, 2)), conv(np.ones((1, 1, 3, 3)), pad=0))


def test_conv_superposition_without_bias(rng):
    p = conv(rng.normal(size=(2, 3, 3, 3)))
    x, y = rng.normal(size=(2, 1, 3, 6, 6))
    a, b = 1.7, -0.4
    np.testing.assert_allclose(T.conv2d(a * x + b * y, p), a * T.conv2d(x, p) + b * T.conv2d(y, p), atol=1e-5)


def test_conv_backward_zero_grad(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    p = conv(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    gx, gw, gb = T.conv2d_backward(x, p, np.zeros((1, 3, 4, 4)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_scalar_output_weight_grad_is_window(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    p = conv(rng.normal(size=(1, 2, 3, 3)), pad=0)
    _, gw, gb = T.conv2d_backward(x, p, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(gw[0], x[0])
    assert gb[0] == 1


def test_conv_backward_shape_mismatch(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    with pytest.raises(DimensionError):
        T.conv2d_backward(x, conv(np.ones((3, 2, 3, 3))), np.zeros((1, 3, 5, 4)))


@pytest.mark.parametrize("kernel,pad,stride", [((3, 3), 1, 1), ((3, 1), (1, 0), 1), ((1, 5), (0, 2), 1), ((3, 3), 1, 2)])
def test_conv_backward_finite_differences(rng, kernel, pad, stride):
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2) + kernel)
    p = T.ConvParams(w, rng.normal(size=3), stride=stride, padding=pad)
    R = rng.normal(size=T.conv2d(x, p).shape)
    f = lambda: float((R * T.conv2d(x, p)).sum())
    gx, gw, gb = T.conv2d_backward(x, p, R)
    assert rel_error(gx, numeric_grad(f, x)) < REL_TOL
    assert rel_error(gw, numeric_grad(f, w)) < REL_TOL
    assert rel_error(gb, numeric_grad(f, p.bias)) < REL_TOL


# ---------------------------------------------------------------- pooling / upsampling


def test_maxpool_window():
    out, idx = T.maxpool2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out.item() == 4 and idx.item() == 3


def test_maxpool_constant_picks_first():
    out, idx = T.maxpool2(np.full((1, 2, 4, 4), 3.0))
    assert (out == 3).all() and (idx == 0).all()


def test_maxpool_odd_rejected():
    with pytest.raises(DimensionError) as e:
        T.maxpool2(np.zeros((1, 1, 4, 5)))
    assert e.value.axis == "w"


def test_maxpool_backward_routes_to_argmax(rng):
    x = rng.normal(size=(2, 3, 6, 4))
    out, idx = T.maxpool2(x)
    R = rng.normal(size=out.shape)
    g = T.maxpool2_backward(R, idx)
    mask = g != 0
    assert mask.sum() == out.size
    np.testing.assert_allclose(g[mask].sum(), R.sum())
    f = lambda: float((R * T.maxpool2(x)[0]).sum())
    assert rel_error(g, numeric_grad(f, x)) < REL_TOL


def test_upsample_values():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    np.testing.assert_array_equal(T.upsample_nearest2(x)[0, 0], expected)


def test_upsample_backward_all_ones_gives_fours():
    g = T.upsample_nearest2_backward(np.ones((1, 2, 6, 8)))
    assert g.shape == (1, 2, 3, 4)
    assert (g == 4).all()


def test_upsample_backward_finite_differences(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    R = rng.normal(size=(1, 2, 6, 6))
    f = lambda: float((R * T.upsample_nearest2(x)).sum())
    assert rel_error(T.upsample_nearest2_backward(R), numeric_grad(f, x)) < REL_TOL


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_upsample_then_pool_is_identity(n, c, h, w, seed):
    x = np.random.default_rng(seed).normal(size=(n, c, h, w)).astype(np.float32)
    out, _ = T.maxpool2(T.upsample_nearest2(x))
    np.testing.assert_array_equal(out, x)


# ---------------------------------------------------------------- batchnorm


def test_batchnorm_training_normalizes(rng):
    x = rng.normal(3.0, 2.0, size=(4, 3, 5, 5)).astype(np.float32)
    out, new, _ = T.batchnorm(x, T.BatchNormParams.fresh(3), training=True)
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-3
    # running stats: 0.9 * 0 + 0.1 * batch mean
    np.testing.assert_allclose(new.running_mean, 0.1 * x.astype(np.float64).mean(axis=(0, 2, 3)), rtol=1e-5)


def test_batchnorm_constant_channel_gives_beta():
    x = np.full((2, 2, 3, 3), 7.0)
    p = T.BatchNormParams.fresh(2, dtype=np.float64)
    p.beta[:] = 5
    out, _, _ = T.batchnorm(x, p, training=True)
    np.testing.assert_allclose(out, 5.0, atol=1e-6)


def test_batchnorm_inference_uses_running_stats():
    p = T.BatchNormParams(np.array([2.0]), np.array([1.0]), np.array([3.0]), np.array([4.0]), eps=1e-5)
    x = np.full((1, 1, 1, 1), 5.0)
    out, new, _ = T.batchnorm(x, p, training=False)
    assert new is p
    np.testing.assert_allclose(out.item(), 2.0 * 2.0 / np.sqrt(4.0 + 1e-5) + 1.0)


def test_batchnorm_channel_mismatch():
    with pytest.raises(DimensionError):
        T.batchnorm(np.zeros((1, 3, 2, 2)), T.BatchNormParams.fresh(2), True)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_backward_finite_differences(rng, training):
    x = rng.normal(size=(3, 2, 4, 4))
    p = T.BatchNormParams(rng.normal(size=2), rng.normal(size=2), rng.normal(size=2), rng.uniform(0.5, 2, size=2))
    R = rng.normal(size=x.shape)
    f = lambda: float((R * T.batchnorm(x, p, training)[0]).sum())
    _, _, cache = T.batchnorm(x, p, training)
    gx, gg, gb = T.batchnorm_backward(R, cache)
    assert rel_error(gx, numeric_grad(f, x)) < REL_TOL
    assert rel_error(gg, numeric_grad(f, p.gamma)) < REL_TOL
    assert rel_error(gb, numeric_grad(f, p.beta)) < REL_TOL


# ---------------------------------------------------------------- relu


def test_relu_values():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(T.relu(x), [0, 0, 2])
    np.testing.assert_array_equal(T.relu_backward(x, np.ones(3)), [0, 0, 1])


def test_relu_all_negative(rng):
    x = -np.abs(rng.normal(size=(1, 2, 3, 3))) - 0.1
    assert not T.relu(x).any()
    assert not T.relu_backward(x, np.ones_like(x)).any()


def test_relu_finite_differences(rng):
    x = rng.normal(size=(2, 2, 3, 3))
    x[np.abs(x) < 0.01] = 0.5
    R = rng.normal(size=x.shape)
    f = lambda: float((R * T.relu(x)).sum())
    assert rel_error(T.relu_backward(x, R), numeric_grad(f, x)) < REL_TOL


def test_operations_are_deterministic(rng):
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    p = T.ConvParams(rng.normal(size=(4, 3, 3, 3)).astype(np.float32), np.zeros(4, np.float32), padding=1)
    assert T.conv2d(x, p).tobytes() == T.conv2d(x.copy(), p).tobytes()
    bn = T.BatchNormParams.fresh(3)
    assert T.batchnorm(x, bn, True)[0].tobytes() == T.batchnorm(x.copy(), bn, True)[0].tobytes()
