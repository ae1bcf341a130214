import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpsinet.tensor import (ConvSpec, GraphError, ShapeError, Tensor, backward, concat_channels,
                            conv3d, conv_output_size, conv_transpose3d, grad_check,
                            grad_check_detail, leaky_relu, mse_loss)

from oracles import direct_conv3d, direct_conv_transpose3d


def random_conv_case(rng, stride, dilation):
    k = int(rng.integers(1, 4))
    p = int(rng.integers(0, 3))
    cin, cout = (int(v) for v in rng.integers(1, 4, 2))
    lo = max(1, dilation * (k - 1) + 1 - 2 * p)
    n = tuple(int(v) for v in rng.integers(lo, lo + 5, 3))
    spec = ConvSpec(cin, cout, k, stride, dilation, p)
    x = rng.standard_normal((int(rng.integers(1, 3)), cin) + n)
    w = rng.standard_normal((cout, cin, k, k, k))
    b = rng.standard_normal(cout)
    return spec, x, w, b


@pytest.mark.parametrize("stride", [1, 2, 4])
@pytest.mark.parametrize("dilation", [1, 2, 3])
def test_conv3d_matches_direct_sum(stride, dilation):
    rng = np.random.default_rng(100 * stride + dilation)
    for _ in range(6):
        spec, x, w, b = random_conv_case(rng, stride, dilation)
        got = conv3d(x, w, b, spec).data
        np.testing.assert_allclose(got, direct_conv3d(x, w, b, stride, dilation, spec.padding[0]),
                                   atol=1e-9)


@pytest.mark.parametrize("stride", [1, 2, 4])
def test_conv_transpose3d_matches_scatter(stride):
    rng = np.random.default_rng(stride)
    for _ in range(4):
        k, d = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        cin, cout = 2, 3
        x = rng.standard_normal((1, cin, 3, 2, 4))
        p = int(rng.integers(0, 2)) if d * (k - 1) >= 2 else 0
        w = rng.standard_normal((cin, cout, k, k, k))
        b = rng.standard_normal(cout)
        got = conv_transpose3d(x, w, b, ConvSpec(cin, cout, k, stride, d, p)).data
        np.testing.assert_allclose(got, direct_conv_transpose3d(x, w, b, stride, d, p), atol=1e-9)


def test_conv_transpose_is_adjoint():
    rng = np.random.default_rng(0)
    spec = ConvSpec(3, 2, 3, 2, 2, 1)
    # sizes chosen so the transposed conv lands exactly back on the input grid
    x = rng.standard_normal((1, 3, 9, 7, 11))
    w = rng.standard_normal((2, 3, 3, 3, 3))
    y = conv3d(x, w, None, spec).data
    g = rng.standard_normal(y.shape)
    back = conv_transpose3d(g, w, None, ConvSpec(2, 3, 3, 2, 2, 1)).data
    assert back.shape == x.shape
    assert np.isclose(np.sum(y * g), np.sum(x * back), rtol=1e-10)


def test_conv_transpose_output_size_covers_stride_remainder():
    rng = np.random.default_rng(1)
    spec = ConvSpec(2, 3, 2, 2, 1, 1)
    x = rng.standard_normal((1, 2, 9, 8, 7))
    w = rng.standard_normal((3, 2, 2, 2, 2))
    y = conv3d(x, w, None, spec).data
    g = rng.standard_normal(y.shape)
    tspec = ConvSpec(3, 2, 2, 2, 1, 1)
    assert conv_transpose3d(g, w, None, tspec).shape[2:] != x.shape[2:]
    back = conv_transpose3d(g, w, None, tspec, x.shape[2:]).data
    assert np.isclose(np.sum(y * g), np.sum(x * back), rtol=1e-10)
    with pytest.raises(ShapeError):
        conv_transpose3d(g, w, None, tspec, (20, 8, 7))


def test_conv_known_value():
    # 3x3x3 box filter on ones with zero padding: the corner sees 8 ones
    x = np.ones((1, 1, 4, 4, 4))
    w = np.ones((1, 1, 3, 3, 3))
    y = conv3d(x, w, None, ConvSpec.same(1, 1)).data
    assert y[0, 0, 0, 0, 0] == 8
    assert y[0, 0, 1, 1, 1] == 27


def test_output_size_formula():
    spec = ConvSpec(1, 1, 3, 2, 2, 1)
    assert conv_output_size(spec, (9, 10, 11)) == (4, 4, 5)


def test_shape_errors_name_the_axis():
    spec = ConvSpec(1, 1, 3, 1, 3, 0)
    with pytest.raises(ShapeError, match="height"):
        conv3d(np.zeros((1, 1, 8, 4, 8)), np.zeros((1, 1, 3, 3, 3)), None, spec)
    with pytest.raises(ShapeError, match="channel"):
        conv3d(np.zeros((1, 2, 8, 8, 8)), np.zeros((1, 1, 3, 3, 3)), None, ConvSpec.same(1, 1))
    with pytest.raises(ShapeError, match="width"):
        concat_channels([np.zeros((1, 1, 4, 4, 4)), np.zeros((1, 1, 4, 4, 5))])


def test_leaky_relu_values_and_slope_check():
    y = leaky_relu(np.array([-2.0, 0.0, 3.0]), 0.1)
    np.testing.assert_allclose(y.data, [-0.2, 0.0, 3.0])
    with pytest.raises(ValueError):
        leaky_relu(np.zeros(3), 1.5)


def test_mse_loss_definition():
    p = np.arange(16, dtype=float).reshape(2, 1, 2, 2, 2)
    t = np.zeros_like(p)
    loss = mse_loss([p], [t]).data
    assert np.isclose(loss, np.sum(p ** 2) / (2 * 2))
    assert np.isclose(mse_loss([p], [t], per_voxel=True).data, np.sum(p ** 2) / (2 * 2) / 8)


def test_backward_accumulates_shared_use():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    a = leaky_relu(x, 0.5)
    b = leaky_relu(x, 0.25)
    loss = mse_loss([a, b], [np.zeros(2), np.zeros(2)])
    backward(loss)
    # both tensors count their 2 leading entries: loss = (a.a + b.b) / 8
    expect = (a.data * np.array([1.0, 0.5]) + b.data * np.array([1.0, 0.25])) / 4
    np.testing.assert_allclose(x.grad, expect)


def test_backward_requires_scalar():
    with pytest.raises(GraphError):
        backward(Tensor(np.zeros(3), requires_grad=True))


def test_gradient_is_zero_at_target():
    rng = np.random.default_rng(1)
    w = Tensor(rng.standard_normal((2, 1, 3, 3, 3)), requires_grad=True)
    x = rng.standard_normal((1, 1, 5, 5, 5))
    y = conv3d(x, w, None, ConvSpec.same(1, 2))
    backward(mse_loss([y], [y.data.copy()]))
    assert np.all(w.grad == 0)


def test_mixed_precision_rejected():
    with pytest.raises(TypeError):
        conv3d(np.zeros((1, 1, 4, 4, 4), np.float32), np.zeros((1, 1, 3, 3, 3), np.float64),
               None, ConvSpec.same(1, 1))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2]), st.integers(1, 3),
       st.integers(0, 1), st.integers(0, 10_000))
def test_conv3d_gradcheck_property(cin, cout, stride, k, pad, seed):
    rng = np.random.default_rng(seed)
    spec = ConvSpec(cin, cout, k, stride, 1, pad)
    x = rng.standard_normal((1, cin, 5, 4, 6))
    w = rng.standard_normal((cout, cin, k, k, k))
    b = rng.standard_normal(cout)
    assert grad_check(lambda x, w, b: conv3d(x, w, b, spec), [x, w, b]) < 1e-4


def test_kink_guard_skips_straddling_probes():
    x = np.array([[[[[5e-4, 1.0, -1.0]]]]])
    plain = grad_check_detail(lambda t: leaky_relu(t, 0.1), [x], h=1e-3)
    guarded = grad_check_detail(lambda t: leaky_relu(t, 0.1), [x], h=1e-3, kink_guard=True)
    assert plain.error > 1e-2
    assert guarded.skipped == 1 and guarded.checked == 2 and guarded.error < 1e-8


def test_center_impulse_kernel_is_identity():
    x = np.ones((1, 1, 3, 3, 3))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(conv3d(x, w, None, ConvSpec.same(1, 1)).data, x)


def test_same_padding_with_dilation_keeps_size():
    assert conv_output_size(ConvSpec(1, 1, 3, 1, 2, 2), (48, 48, 48)) == (48, 48, 48)


@pytest.mark.parametrize("n, k", [(12, 4), (24, 2)])
def test_transposed_upsampling_shapes(n, k):
    y = conv_transpose3d(np.zeros((1, 1, n, n, n)), np.zeros((1, 1, k, k, k)), None,
                         ConvSpec(1, 1, k, k, 1, 0))
    assert y.shape == (1, 1, 48, 48, 48)


def test_mse_hand_values():
    ones = np.ones((1, 1, 2, 2, 2))
    assert float(mse_loss([ones], [np.zeros_like(ones)]).data) == 4.0
    both = np.concatenate([ones, ones])
    assert float(mse_loss([both], [np.zeros_like(both)]).data) == 4.0
    with pytest.raises(ValueError):
        mse_loss([], [])


def test_scalar_mse_gradient():
    x = Tensor(np.array(1.5), requires_grad=True)
    backward(mse_loss([x], [np.array(0.0)]))
    assert float(x.grad) == 1.5


def test_concat_gradient_is_a_partition():
    rng = np.random.default_rng(4)
    a = Tensor(rng.standard_normal((1, 2, 8, 8, 8)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 3, 8, 8, 8)), requires_grad=True)
    y = concat_channels([a, b])
    assert y.shape == (1, 5, 8, 8, 8)
    target = rng.standard_normal(y.shape)
    backward(mse_loss([y], [target]))
    upstream = y.data - target
    np.testing.assert_array_equal(np.concatenate([a.grad, b.grad], axis=1), upstream)
    assert grad_check(lambda a, b: concat_channels([a, b]), [a.data, b.data]) < 1e-6


def test_leaky_relu_away_from_kink():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 3, 3, 3))
    x[np.abs(x) < 1e-3] = 0.5
    assert grad_check(lambda t: leaky_relu(t, 0.1), [x]) < 1e-6
    g = Tensor(np.array([-1.0]), requires_grad=True)
    y = leaky_relu(g, 0.1)
    backward(mse_loss([y], [np.array([0.0])]))
    assert np.isclose(g.grad[0], -0.1 * 0.1)


def test_two_layer_toy_net_gradcheck():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 2, 6, 6, 6))
    w1, b1 = rng.standard_normal((3, 2, 3, 3, 3)), rng.standard_normal(3)
    w2, b2 = rng.standard_normal((1, 3, 3, 3, 3)), rng.standard_normal(1)
    target = rng.standard_normal((1, 1, 6, 6, 6))

    def net(x, w1, b1, w2, b2):
        h = leaky_relu(conv3d(x, w1, b1, ConvSpec(2, 3, 3, 1, 2, 2)), 0.1)
        return mse_loss([conv3d(h, w2, b2, ConvSpec.same(3, 1))], [target])

    res = grad_check_detail(net, [x, w1, b1, w2, b2], h=1e-6, kink_guard=True)
    assert res.error < 1e-4


def test_backward_is_bitwise_repeatable():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 2, 5, 5, 5))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    grads = []
    for _ in range(2):
        wt = Tensor(w.copy(), requires_grad=True)
        y = conv3d(x, wt, None, ConvSpec.same(2, 2))
        backward(mse_loss([y, y], [np.zeros_like(x), np.ones_like(x)]))
        grads.append(wt.grad.tobytes())
    assert grads[0] == grads[1]
