import numpy as np
import pytest
from scipy.signal import correlate2d

from laneseg import network, tensor as T
from laneseg.errors import DimensionError, StateError
from oracles import model_gradient_check, numeric_grad, rel_error, REL_TOL


def conv(w, b=None):
    w = np.asarray(w, dtype=np.float64)
    return T.ConvParams(w, np.zeros(w.shape[0]) if b is None else b, padding=(w.shape[2] // 2, w.shape[3] // 2))


def gcn_params(rng, c_in, c_out, k, bias=False):
    def mk(ci, co, kh, kw):
        return conv(rng.normal(size=(co, ci, kh, kw)), rng.normal(size=co) if bias else None)

    return network.GcnBlockParams(
        branch_a=(mk(c_in, c_out, k, 1), mk(c_out, c_out, 1, k)),
        branch_b=(mk(c_in, c_out, 1, k), mk(c_out, c_out, k, 1)),
    )


def test_gcn_zero_weights_zero_output(rng):
    p = gcn_params(rng, 3, 4, 3)
    zeroed = network.GcnBlockParams(*[tuple(conv(np.zeros_like(c.weights)) for c in br) for br in (p.branch_a, p.branch_b)])
    assert not network.gcn_block(rng.normal(size=(1, 3, 6, 6)), zeroed).any()


def test_gcn_preserves_size(rng):
    p = gcn_params(rng, 8, 5, 7)
    assert network.gcn_block(rng.normal(size=(1, 8, 16, 16)), p).shape == (1, 5, 16, 16)


@pytest.mark.parametrize("k", [3, 7])
def test_separable_branch_equals_outer_product_kernel(rng, k):
    u, v = rng.normal(size=k), rng.normal(size=k)
    col = conv(u.reshape(1, 1, k, 1))
    row = conv(v.reshape(1, 1, 1, k))
    x = np.zeros((1, 1, 2 * k + 1, 2 * k + 1))
    x[0, 0, k, k] = 1.0
    sep = T.conv2d(T.conv2d(x, col), row)[0, 0]
    dense = correlate2d(x[0, 0], np.outer(u, v), mode="same")
    assert np.abs(sep - dense).max() < 1e-5


def test_gcn_is_sum_of_branches(rng):
    p = gcn_params(rng, 2, 3, 5)
    x = rng.normal(size=(2, 2, 9, 9))
    a = T.conv2d(T.conv2d(x, p.branch_a[0]), p.branch_a[1])
    b = T.conv2d(T.conv2d(x, p.branch_b[0]), p.branch_b[1])
    np.testing.assert_allclose(network.gcn_block(x, p), a + b, atol=1e-12)


def test_gcn_rejects_even_k(rng):
    with pytest.raises(DimensionError):
        gcn_params(rng, 2, 2, 4)


def test_gcn_backward_finite_differences(rng):
    p = gcn_params(rng, 2, 3, 3, bias=True)
    x = rng.normal(size=(1, 2, 5, 5))
    R = rng.normal(size=(1, 3, 5, 5))
    f = lambda: float((R * network.gcn_block(x, p)).sum())
    _, cache = network.gcn_block_forward(x, p)
    gx, grads = network.gcn_block_backward(R, p, cache)
    assert rel_error(gx, numeric_grad(f, x)) < REL_TOL
    assert rel_error(grads["b1"][0], numeric_grad(f, p.branch_b[0].weights)) < REL_TOL
    assert rel_error(grads["a2"][1], numeric_grad(f, p.branch_a[1].bias)) < REL_TOL


def br_params(rng, c, zero=False, post_relu=False):
    mk = (lambda: conv(np.zeros((c, c, 3, 3)))) if zero else (lambda: conv(rng.normal(size=(c, c, 3, 3)), rng.normal(size=c)))
    return network.BrBlockParams(mk(), mk(), post_relu=post_relu)


def test_br_zero_weights_is_identity(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    np.testing.assert_array_equal(network.br_block(x, br_params(rng, 3, zero=True)), x)


def test_br_zero_input_zero_output(rng):
    p = br_params(rng, 3)
    p = network.BrBlockParams(conv(p.w1.weights), conv(p.w2.weights))
    assert not network.br_block(np.zeros((1, 3, 4, 4)), p).any()


def test_br_residual_matches_composition(rng):
    p = br_params(rng, 2)
    x = rng.normal(size=(1, 2, 6, 6))
    F = T.conv2d(np.maximum(T.conv2d(x, p.w1), 0), p.w2)
    assert np.abs(network.br_block(x, p) - x - F).max() < 1e-5


@pytest.mark.parametrize("post_relu", [False, True])
def test_br_backward_finite_differences(rng, post_relu):
    p = br_params(rng, 2, post_relu=post_relu)
    x = rng.normal(size=(1, 2, 4, 4))
    R = rng.normal(size=x.shape)
    f = lambda: float((R * network.br_block(x, p)).sum())
    _, cache = network.br_block_forward(x, p)
    gx, grads = network.br_block_backward(R, p, cache)
    assert rel_error(gx, numeric_grad(f, x)) < REL_TOL
    assert rel_error(grads["w1"][0], numeric_grad(f, p.w1.weights)) < REL_TOL


# ---------------------------------------------------------------- full model


def test_forward_shape_default_model(rng):
    p = network.build_model(rng=rng)
    x = rng.uniform(size=(1, 3, 64, 64)).astype(np.float32)
    out, _, _ = network.forward(x, p, training=False)
    assert out.shape == (1, 3, 64, 64) and out.dtype == np.float32


def test_forward_rejects_indivisible_input(rng):
    p = network.build_model(rng=rng)
    with pytest.raises(DimensionError) as e:
        network.forward(np.zeros((1, 3, 64, 40), np.float32), p)
    assert e.value.axis == "w"


def test_inference_is_bit_identical(rng):
    p = network.build_model((4, 8), 3, rng=rng)
    x = rng.uniform(size=(2, 3, 16, 16)).astype(np.float32)
    assert network.predict(x, p).tobytes() == network.predict(x, p).tobytes()


def test_training_forward_updates_running_stats_only(rng):
    p = network.build_model((4, 8), 3, rng=rng)
    x = rng.uniform(size=(2, 3, 16, 16)).astype(np.float32)
    _, new, _ = network.forward(x, p, training=True)
    assert not np.array_equal(new.encoder[0][1].running_mean, p.encoder[0][1].running_mean)
    np.testing.assert_array_equal(new.encoder[0][0].weights, p.encoder[0][0].weights)


def test_encoder_filters_must_not_decrease(rng):
    with pytest.raises(Exception):
        network.build_model((8, 4), 3, rng=rng)


def test_decoder_mirrors_encoder():
    assert network.decoder_channels([8, 16, 20, 32]) == [20, 16, 8, 8]


def test_backward_without_forward():
    with pytest.raises(StateError):
        network.backward(None, np.zeros((1, 3, 8, 8)))


def _tiny(rng):
    p = network.build_model((4, 4), 3, rng=rng)
    x = rng.uniform(size=(2, 3, 8, 8)).astype(np.float32)
    return p, x


def test_backward_zero_grad_gives_zero(rng):
    p, x = _tiny(rng)
    out, _, cache = network.forward(x, p, training=True)
    grads = network.backward(cache, np.zeros_like(out))
    assert all(not g.any() for g in grads.values())
    assert list(grads) == list(p.named_arrays(trainable_only=True))


def test_backward_is_linear_in_loss_scale(rng):
    p, x = _tiny(rng)
    out, _, cache = network.forward(x, p, training=True)
    g = rng.normal(size=out.shape).astype(np.float32)
    one = network.backward(cache, g)
    two = network.backward(cache, 2 * g)
    for k in one:
        np.testing.assert_array_equal(two[k], 2 * one[k])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_model_gradients_match_finite_differences(seed):
    worst, checked, _ = model_gradient_check(seed)
    assert checked >= 30
    assert worst < REL_TOL


def test_full_model_gradients_with_post_relu():
    worst, checked, _ = model_gradient_check(5, post_relu=True)
    assert checked >= 30 and worst < REL_TOL


def test_named_arrays_roundtrip(rng):
    p, _ = _tiny(rng)
    arrays = {k: v + 1 for k, v in p.named_arrays().items()}
    q = p.with_arrays(arrays)
    for k, v in q.named_arrays().items():
        np.testing.assert_array_equal(v, arrays[k])
