import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epcdiff.engine import (AdamState, Tape, Tensor, abs_, adam_step, add_channel, backward,
                            concat_channels, conv3, dense, group_norm, laplacian, mean,
                            resample, silu, slice_channels, spatial_gradient, square, tanh,
                            tsum)
from epcdiff.gradcheck import gradient_error


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand(rng, *shape, scale=1.0, grad=True):
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=grad)


# -- conv3 -------------------------------------------------------------------

def test_conv3_zero_input_gives_zero(rng):
    x = Tensor(np.zeros((1, 2, 3, 4, 4)))
    w = rand(rng, 3, 2, 3, 3, 3)
    assert np.all(conv3(x, w).data == 0.0)


def test_conv3_box_sum_window():
    x = Tensor(np.ones((1, 1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 1, 3, 3)))
    out = conv3(x, w, pad=1)
    # direct summation over the in-plane 3x3 window of a zero-padded ones block
    expected = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            expected[i, j] = sum(1.0 for di in (-1, 0, 1) for dj in (-1, 0, 1)
                                 if 0 <= i + di < 3 and 0 <= j + dj < 3)
    # kernel depth 1 with pad 1 grows the depth axis to 3; middle plane is the 2-D result
    np.testing.assert_array_equal(out.data[0, 0, 1], expected)
    assert out.data[0, 0, 1, 1, 1] == 9.0
    assert out.data[0, 0, 1, 0, 0] == 4.0


def test_conv3_identity_kernel(rng):
    x = rand(rng, 2, 3, 4, 5, 6)
    w = np.zeros((3, 3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(conv3(x, Tensor(w)).data, x.data)


def test_conv3_output_shape_with_stride(rng):
    x = rand(rng, 1, 2, 7, 8, 9)
    w = rand(rng, 4, 2, 3, 3, 3)
    out = conv3(x, w, stride=2, pad=1)
    assert out.shape == (1, 4, (7 + 2 - 3) // 2 + 1, (8 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)


def test_conv3_channel_mismatch_names_shapes(rng):
    with pytest.raises(ValueError, match=r"\(1, 2, 3, 3, 3\).*\(4, 3, 3, 3, 3\)"):
        conv3(rand(rng, 1, 2, 3, 3, 3), rand(rng, 4, 3, 3, 3, 3))


def test_conv3_linearity(rng):
    x, y = rand(rng, 1, 2, 4, 6, 6), rand(rng, 1, 2, 4, 6, 6)
    w = rand(rng, 3, 2, 3, 3, 3)
    lhs = conv3(Tensor(2.5 * x.data - 0.7 * y.data), w).data
    rhs = 2.5 * conv3(x, w).data - 0.7 * conv3(y, w).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-13)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv3_gradients(rng, stride, pad):
    x = rand(rng, 2, 2, 4, 5, 5, scale=3)
    w = rand(rng, 3, 2, 3, 3, 3)
    b = rand(rng, 3)
    err = gradient_error(lambda: square(conv3(x, w, b, stride=stride, pad=pad)).sum(), [x, w, b])
    assert err < 1e-6


# -- activations and normalisation -------------------------------------------

def test_silu_values():
    x = Tensor(np.array([0.0, 1.0, 40.0]))
    y = silu(x).data
    assert y[0] == 0.0
    assert y[1] == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-15)
    assert y[1] == pytest.approx(0.731059, abs=1e-6)
    assert y[2] == pytest.approx(40.0, rel=1e-15)


def test_silu_extreme_inputs_finite():
    y = silu(Tensor(np.array([-1e4, 1e4]))).data
    assert np.all(np.isfinite(y))


def test_group_norm_constant_input_is_zero():
    x = Tensor(np.full((1, 4, 2, 3, 3), 7.0))
    out = group_norm(x, 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_group_norm_gamma_zero_gives_beta(rng):
    x = rand(rng, 2, 4, 2, 3, 3)
    beta = np.array([0.5, -1.0, 2.0, 3.0])
    out = group_norm(x, 2, Tensor(np.zeros(4)), Tensor(beta))
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta[None, :, None, None, None], x.shape))


def test_group_norm_two_values():
    x = Tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 1, 2))
    out = group_norm(x, 1, Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=1e-14)
    np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-12)


def test_group_norm_indivisible_rejected(rng):
    with pytest.raises(ValueError):
        group_norm(rand(rng, 1, 3, 2, 2, 2), 2, Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_group_norm_gradients(rng):
    x = rand(rng, 2, 4, 2, 3, 3, scale=3)
    gamma, beta = rand(rng, 4), rand(rng, 4)
    weights = Tensor(rng.standard_normal(x.shape))
    err = gradient_error(lambda: (group_norm(x, 2, gamma, beta) * weights).sum(), [x, gamma, beta])
    assert err < 1e-6


# -- resampling and concatenation -------------------------------------------

def test_resample_roundtrip_constant():
    x = Tensor(np.full((1, 2, 3, 4, 6), 1.25))
    down = resample(x, "down_avg2_inplane")
    assert down.shape == (1, 2, 3, 2, 3)
    np.testing.assert_array_equal(resample(down, "up_nearest2_inplane").data, x.data)


def test_resample_down_is_block_mean():
    x = Tensor(np.array([[0.0, 2.0], [4.0, 6.0]]).reshape(1, 1, 1, 2, 2))
    assert resample(x, "down_avg2_inplane").data.item() == 3.0


def test_resample_odd_rejected():
    with pytest.raises(ValueError):
        resample(Tensor(np.zeros((1, 1, 2, 3, 4))), "down_avg2_inplane")


@settings(max_examples=25, deadline=None)
@given(d=st.integers(1, 4), h=st.integers(1, 4), w=st.integers(1, 4))
def test_resample_shape_contract(d, h, w):
    x = Tensor(np.zeros((1, 1, d, 2 * h, 2 * w)))
    assert resample(x, "down_avg2_inplane").shape == (1, 1, d, h, w)
    assert resample(x, "up_nearest2_inplane").shape == (1, 1, d, 4 * h, 4 * w)


@pytest.mark.parametrize("mode", ["down_avg2_inplane", "up_nearest2_inplane"])
def test_resample_gradients(rng, mode):
    x = rand(rng, 1, 2, 2, 4, 4)
    wts = Tensor(rng.standard_normal(resample(x, mode).shape))
    assert gradient_error(lambda: (resample(x, mode) * wts).sum(), [x]) < 1e-6


def test_concat_with_empty_and_slicing(rng):
    a = rand(rng, 2, 3, 2, 4, 4)
    empty = Tensor(np.zeros((2, 0, 2, 4, 4)))
    np.testing.assert_array_equal(concat_channels(a, empty).data, a.data)
    b = rand(rng, 2, 2, 2, 4, 4)
    out = concat_channels(a, b)
    np.testing.assert_array_equal(slice_channels(out, 0, 3).data, a.data)


def test_concat_gradient_of_sum_is_ones(rng):
    a, b = rand(rng, 1, 2, 2, 3, 3), rand(rng, 1, 1, 2, 3, 3)
    with Tape() as tape:
        loss = concat_channels(a, b).sum()
    ga, gb = tape.gradient(loss, [a, b])
    np.testing.assert_array_equal(ga, np.ones(a.shape))
    np.testing.assert_array_equal(gb, np.ones(b.shape))
    assert gradient_error(lambda: square(concat_channels(a, b)).sum(), [a, b]) < 1e-6


def test_concat_spatial_mismatch_rejected(rng):
    with pytest.raises(ValueError):
        concat_channels(rand(rng, 1, 1, 2, 3, 3), rand(rng, 1, 1, 2, 3, 4))


# -- finite-difference operators ----------------------------------------------

def test_spatial_gradient_constant_is_zero():
    assert np.all(spatial_gradient(Tensor(np.full((1, 1, 3, 4, 5), 2.0))).data == 0)


def test_spatial_gradient_ramp():
    s = 0.75
    h = np.arange(6.0)
    x = np.broadcast_to((s * h)[None, None, None, :, None], (1, 1, 3, 6, 4))
    g = spatial_gradient(Tensor(x)).data
    np.testing.assert_allclose(g[0, 1, :, :-1, :], s, rtol=0, atol=1e-15)
    assert np.all(g[0, 1, :, -1, :] == 0)
    assert np.all(g[0, 0] == 0) and np.all(g[0, 2] == 0)


def test_spatial_gradient_impulse_stencil():
    x = np.zeros((1, 1, 3, 3, 3))
    x[0, 0, 1, 1, 1] = 1.0
    g = spatial_gradient(Tensor(x)).data[0]
    # forward difference: +1 at the voxel before the impulse, -1 at the impulse
    for k, before in enumerate([(0, 1, 1), (1, 0, 1), (1, 1, 0)]):
        assert g[k][before] == 1.0 and g[k][1, 1, 1] == -1.0
        assert np.count_nonzero(g[k]) == 2


def test_spatial_gradient_small_extent_rejected():
    with pytest.raises(ValueError):
        spatial_gradient(Tensor(np.zeros((1, 1, 1, 4, 4))))


def test_laplacian_constant_and_ramp():
    assert np.all(laplacian(Tensor(np.full((1, 1, 3, 4, 5), 3.0))).data == 0)
    ramp = np.broadcast_to(np.arange(5.0)[None, None, None, None, :] * 0.3, (1, 1, 4, 4, 5))
    lap = laplacian(Tensor(ramp)).data
    np.testing.assert_allclose(lap[..., 1:-1], 0.0, atol=1e-15)


def test_laplacian_impulse_stencil():
    x = np.zeros((1, 1, 3, 3, 3))
    x[0, 0, 1, 1, 1] = 1.0
    lap = laplacian(Tensor(x)).data[0, 0]
    expected = np.zeros((3, 3, 3))
    expected[1, 1, 1] = -6.0
    for d in [(0, 1, 1), (2, 1, 1), (1, 0, 1), (1, 2, 1), (1, 1, 0), (1, 1, 2)]:
        expected[d] = 1.0
    np.testing.assert_array_equal(lap, expected)


def test_laplacian_thin_volume_reduces_to_2d_stencil(rng):
    x = rng.standard_normal((1, 1, 1, 4, 5))
    p = np.pad(x[0, 0, 0], 1, mode="edge")
    expect = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * p[1:-1, 1:-1]
    assert np.allclose(laplacian(Tensor(x)).data[0, 0, 0], expect, atol=1e-14)
    with pytest.raises(ValueError):
        laplacian(Tensor(np.zeros((1, 1, 0, 4, 4))))


@pytest.mark.parametrize("op", [spatial_gradient, laplacian])
def test_difference_operator_gradients(rng, op):
    x = rand(rng, 1, 2, 3, 4, 5, scale=3)
    wts = Tensor(rng.standard_normal(op(x).shape))
    assert gradient_error(lambda: (op(x) * wts).sum(), [x]) < 1e-6


# -- generic primitives and backward -----------------------------------------

def test_backward_sum_and_half_square(rng):
    x = rand(rng, 3, 4)
    with Tape() as tape:
        loss = x.sum()
    np.testing.assert_array_equal(backward(tape, loss)[x], np.ones((3, 4)))
    with Tape() as tape:
        loss = square(x).sum() * 0.5
    np.testing.assert_allclose(backward(tape, loss)[x], x.data, rtol=0, atol=0)


def test_backward_rejects_non_scalar(rng):
    x = rand(rng, 3)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        backward(tape, y)


def test_unreached_leaf_gets_zero(rng):
    x, y = rand(rng, 3), rand(rng, 2)
    with Tape() as tape:
        _ = y * 3.0
        loss = x.sum()
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads[y], np.zeros(2))


def test_tape_is_topologically_ordered(rng):
    x = rand(rng, 1, 2, 2, 4, 4)
    w = rand(rng, 2, 2, 3, 3, 3)
    with Tape() as tape:
        mean(square(silu(conv3(x, w))))
    for i, node in enumerate(tape.nodes):
        assert all(j < i for j in node.inputs)


def test_no_recording_outside_tape(rng):
    x = rand(rng, 3)
    y = x * 2.0
    assert y._node is None


@pytest.mark.parametrize("name,fn", [
    ("abs", lambda a, b: abs_(a - b).sum()),
    ("tanh", lambda a, b: (tanh(a) * b).sum()),
    ("silu", lambda a, b: (silu(a) * b).sum()),
    ("mean_square", lambda a, b: mean(square(a * b + 1.0))),
    ("rsub", lambda a, b: tsum(1.0 - a * b)),
])
def test_elementwise_gradients(rng, name, fn):
    a = rand(rng, 2, 3, scale=3)
    b = rand(rng, 2, 3, scale=3)
    assert gradient_error(lambda: fn(a, b), [a, b]) < 1e-6


def test_dense_and_add_channel_gradients(rng):
    x, w, b = rand(rng, 2, 5), rand(rng, 5, 3), rand(rng, 3)
    vol = rand(rng, 2, 3, 2, 2, 2)
    err = gradient_error(lambda: square(add_channel(vol, dense(x, w, b))).sum(), [x, w, b, vol])
    assert err < 1e-6


def test_composed_network_gradient(rng):
    x = rand(rng, 1, 2, 4, 4, 4, scale=3)
    w1, b1 = rand(rng, 4, 2, 3, 3, 3), rand(rng, 4)
    g1, be1 = rand(rng, 4), rand(rng, 4)
    w2 = rand(rng, 2, 4, 3, 3, 3)

    def net():
        h = silu(group_norm(conv3(x, w1, b1), 2, g1, be1))
        h = resample(resample(h, "down_avg2_inplane"), "up_nearest2_inplane")
        h = conv3(concat_channels(h, x), rand_w2_cat)
        return mean(abs_(laplacian(h))) + mean(square(spatial_gradient(tanh(h))))

    rand_w2_cat = Tensor(np.concatenate([w2.data, rng.uniform(-1, 1, (2, 2, 3, 3, 3))], axis=1),
                         requires_grad=True)
    assert gradient_error(net, [x, w1, b1, g1, be1, rand_w2_cat]) < 1e-6


def test_determinism_bitwise(rng):
    data = rng.standard_normal((1, 2, 3, 4, 4))
    wdata = rng.standard_normal((2, 2, 3, 3, 3))

    def run():
        x, w = Tensor(data.copy(), requires_grad=True), Tensor(wdata.copy(), requires_grad=True)
        with Tape() as tape:
            loss = mean(square(silu(conv3(x, w))))
        gx, gw = tape.gradient(loss, [x, w])
        return loss.data.tobytes(), gx.tobytes(), gw.tobytes()

    assert run() == run()


# -- Adam ---------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    state = AdamState(lr=0.1)
    state.m["w"] = np.array([0.5, 0.5])
    state.v["w"] = np.array([0.25, 0.25])
    adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_allclose(state.m["w"], 0.45)
    np.testing.assert_allclose(state.v["w"], 0.25 * 0.999)
    assert state.step == 1
    # moments are non-zero, so a zero gradient still moves along the old momentum
    p2 = {"w": Tensor(np.array([1.0, -2.0]))}
    s2 = AdamState(lr=0.1)
    adam_step(p2, {"w": np.zeros(2)}, s2)
    np.testing.assert_array_equal(p2["w"].data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    g = np.array([3.0, -0.2, 1e-3])
    p = {"w": Tensor(np.zeros(3))}
    state = AdamState(lr=1e-2)
    adam_step(p, {"w": g}, state)
    # m_hat = g, v_hat = g^2 after bias correction
    expected = -1e-2 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p["w"].data, expected, rtol=1e-12)


def test_adam_elementwise_independence():
    g1, g2 = np.array([0.3]), np.array([-1.7])
    pa, pb = {"a": Tensor([0.5])}, {"a": Tensor([2.0])}
    sa, sb = AdamState(lr=0.05), AdamState(lr=0.05)
    pj = {"a": Tensor([0.5, 2.0])}
    sj = AdamState(lr=0.05)
    for _ in range(5):
        adam_step(pa, {"a": g1}, sa)
        adam_step(pb, {"a": g2}, sb)
        adam_step(pj, {"a": np.concatenate([g1, g2])}, sj)
    np.testing.assert_array_equal(pj["a"].data, [pa["a"].data[0], pb["a"].data[0]])


def test_adam_rejects_non_finite():
    with pytest.raises(FloatingPointError, match="bad"):
        adam_step({"bad": Tensor([1.0])}, {"bad": np.array([np.nan])}, AdamState())
