import numpy as np
import pytest

from irdepth import tensor as T
from irdepth.tensor import ContractError, DimensionError, NumericError, Tensor, backward, gradcheck


def grid(values):
    return Tensor(np.array(values, dtype=np.float64)[None, None])


def naive_conv(x, k, stride=1, pad=0):
    """Nested-loop cross-correlation oracle for (n, c, h, w) arrays."""
    n, c, h, w = x.shape
    co, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for b in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    s = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                s += xp[b, ci, i * stride + u, j * stride + v] * k[o, ci, u, v]
                    out[b, o, i, j] = s
    return out


# -- conv2d ------------------------------------------------------------------


def test_conv_identity_kernel():
    x = grid([[1, 2, 3], [4, 5, 6], [7, 8, 9]])
    out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_diagonal_kernel():
    x = grid([[1, 2, 3], [4, 5, 6], [7, 8, 9]])
    k = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])[None, None])
    out = T.conv2d(x, k)
    np.testing.assert_array_equal(out.data[0, 0], [[6, 8], [12, 14]])
    np.testing.assert_array_equal(out.data, naive_conv(x.data, k.data))


def test_conv_zero_kernel_shape():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 7, 5)))
    out = T.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (2, 4, 4, 3)
    assert not out.data.any()


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 2, 6, 7))
    k = rng.normal(size=(3, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, naive_conv(x, k, stride, pad), rtol=0, atol=1e-12)


def test_conv_channel_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as exc:
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))
    assert "(1, 3, 4, 4)" in str(exc.value) and "(2, 2, 3, 3)" in str(exc.value)


def test_conv_empty_output_rejected():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv_is_linear():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(2, 1, 3, 6, 6))
    k = Tensor(rng.normal(size=(4, 3, 3, 3)))
    a, b = 1.7, -0.3
    lhs = T.conv2d(Tensor(a * x + b * y), k, padding=1).data
    rhs = a * T.conv2d(Tensor(x), k, padding=1).data + b * T.conv2d(Tensor(y), k, padding=1).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


# -- asymmetric pair -----------------------------------------------------------


def test_asymmetric_identity_kernels():
    x = Tensor(np.random.default_rng(2).normal(size=(1, 2, 5, 5)))
    row = np.zeros((2, 2, 1, 5))
    col = np.zeros((2, 2, 5, 1))
    for c in range(2):
        row[c, c, 0, 2] = 1.0
        col[c, c, 2, 0] = 1.0
    out = T.asymmetric_conv_pair(x, 5, Tensor(row), Tensor(col))
    np.testing.assert_array_equal(out.data, x.data)


def test_asymmetric_ramp_matches_two_pass_loop():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    row, col = np.ones((1, 1, 1, 3)), np.ones((1, 1, 3, 1))
    mid = np.zeros((4, 4))
    xp = np.pad(x[0, 0], ((0, 0), (1, 1)))
    for i in range(4):
        for j in range(4):
            mid[i, j] = xp[i, j] + xp[i, j + 1] + xp[i, j + 2]
    mp = np.pad(mid, ((1, 1), (0, 0)))
    expected = np.array([[mp[i, j] + mp[i + 1, j] + mp[i + 2, j] for j in range(4)] for i in range(4)])
    out = T.asymmetric_conv_pair(Tensor(x), 3, Tensor(row), Tensor(col))
    np.testing.assert_array_equal(out.data[0, 0], expected)


def test_asymmetric_zero_second_kernel():
    x = Tensor(np.random.default_rng(3).normal(size=(1, 1, 4, 4)))
    out = T.asymmetric_conv_pair(x, 3, Tensor(np.ones((1, 1, 1, 3))), Tensor(np.zeros((1, 1, 3, 1))))
    assert not out.data.any()


@pytest.mark.parametrize("k", [2, 4, 1])
def test_asymmetric_bad_k(k):
    x = Tensor(np.zeros((1, 1, 4, 4)))
    with pytest.raises(ContractError):
        T.asymmetric_conv_pair(x, k, Tensor(np.zeros((1, 1, 1, k))), Tensor(np.zeros((1, 1, k, 1))))


# -- pooling / upsampling ----------------------------------------------------------


def test_pool_examples():
    x = grid([[1, 2], [3, 4]])
    assert T.pool2d(x, "avg", 2, 2).data.item() == 2.5
    assert T.pool2d(x, "max", 2, 2).data.item() == 4.0


def test_avg_pool_backward_quarter():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None], requires_grad=True)
    backward(T.pool2d(x, "avg", 2, 2).sum())
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 0.25))


def test_max_pool_tie_goes_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    backward(T.pool2d(x, "max", 2, 2).sum())
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_pool_window_too_large():
    with pytest.raises(DimensionError):
        T.pool2d(Tensor(np.zeros((1, 1, 2, 2))), "max", 3)


def test_nearest_upsample():
    out = T.upsample2x(grid([[1, 2], [3, 4]]), "nearest")
    np.testing.assert_array_equal(
        out.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    )


def test_bilinear_constant():
    out = T.upsample2x(Tensor(np.full((1, 2, 3, 5), 0.7)), "bilinear")
    assert out.shape == (1, 2, 6, 10)
    np.testing.assert_allclose(out.data, 0.7, rtol=0, atol=1e-15)


def bilinear_oracle(img):
    """Half-pixel-centre bilinear 2x upsampling, one output pixel at a time."""
    h, w = img.shape
    out = np.zeros((2 * h, 2 * w))
    for i in range(2 * h):
        for j in range(2 * w):
            sy = min(max((i + 0.5) / 2 - 0.5, 0), h - 1)
            sx = min(max((j + 0.5) / 2 - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def test_bilinear_ramp_matches_oracle():
    out = T.upsample2x(grid([[0, 1], [0, 1]]), "bilinear")
    np.testing.assert_allclose(out.data[0, 0], bilinear_oracle(np.array([[0.0, 1.0], [0.0, 1.0]])), atol=1e-15)
    np.testing.assert_allclose(out.data[0, 0, 0], [0, 0.25, 0.75, 1])


def test_bilinear_random_matches_oracle():
    img = np.random.default_rng(4).normal(size=(3, 5))
    out = T.upsample2x(Tensor(img[None, None]), "bilinear")
    np.testing.assert_allclose(out.data[0, 0], bilinear_oracle(img), atol=1e-14)


# -- concat / split --------------------------------------------------------------


def test_concat_shape_and_order():
    a, b = Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.ones((1, 3, 2, 2)))
    out = T.concat_channels(a, b)
    assert out.shape == (1, 5, 2, 2)
    assert not out.data[:, :2].any() and out.data[:, 2:].all()


def test_concat_empty_channels_is_identity():
    x = Tensor(np.random.default_rng(5).normal(size=(1, 2, 3, 3)))
    np.testing.assert_array_equal(T.concat_channels(x, Tensor(np.zeros((1, 0, 3, 3)))).data, x.data)


def test_concat_backward_unit_grads():
    a = Tensor(np.zeros((1, 2, 2, 2)), requires_grad=True)
    b = Tensor(np.zeros((1, 3, 2, 2)), requires_grad=True)
    backward(T.concat_channels(a, b).sum())
    np.testing.assert_array_equal(a.grad, np.ones(a.shape))
    np.testing.assert_array_equal(b.grad, np.ones(b.shape))


def test_concat_spatial_mismatch():
    with pytest.raises(DimensionError):
        T.concat_channels(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2))))


def test_concat_split_round_trip():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 5, 4, 4))
    p, q = T.split_channels(T.concat_channels(Tensor(a), Tensor(b)), 3)
    np.testing.assert_array_equal(p.data, a)
    np.testing.assert_array_equal(q.data, b)


# -- activations -----------------------------------------------------------------


def test_activation_examples():
    assert T.leaky_relu(Tensor(np.array(-1.0)), 0.2).data.item() == pytest.approx(-0.2)
    assert T.sigmoid(Tensor(np.array(0.0))).data.item() == 0.5
    assert T.activation(Tensor(np.array(-3.0)), "relu").data.item() == 0.0


def test_relu_backward_upstream():
    x = Tensor(np.array([2.0, -2.0]), requires_grad=True)
    backward((T.relu(x) * 3.0).sum())
    np.testing.assert_array_equal(x.grad, [3.0, 0.0])


def test_sigmoid_strictly_inside_unit_interval():
    out = T.sigmoid(Tensor(np.array([-30.0, -5.0, 0.0, 5.0, 30.0]))).data
    assert np.all(out > 0) and np.all(out < 1)


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1])
def test_leaky_alpha_range(alpha):
    with pytest.raises(ContractError):
        T.leaky_relu(Tensor(np.ones(2)), alpha)


# -- tape ------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(7).normal(size=(2, 3, 4, 4)), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones(x.shape))


def test_backward_square():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_accumulates_without_zeroing():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward((x * x).sum())
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_shared_subexpression_visited_once():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    backward((y + y).sum())
    np.testing.assert_array_equal(x.grad, [12.0])


def _toy_graph(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    out = T.upsample2x(T.pool2d(T.leaky_relu(T.conv2d(x, k, padding=1), 0.2), "max", 2), "bilinear")
    return x, k, (T.sigmoid(out) * out).sum()


def test_forward_deterministic():
    assert _toy_graph(0)[2].data.tobytes() == _toy_graph(0)[2].data.tobytes()


def test_replay_after_zeroing_is_bit_identical():
    x, k, _ = _toy_graph(1)

    def run():
        out = T.upsample2x(T.pool2d(T.leaky_relu(T.conv2d(x, k, padding=1), 0.2), "max", 2), "bilinear")
        return (T.sigmoid(out) * out).sum()

    backward(run())
    first = (x.grad.copy(), k.grad.copy())
    x.zero_grad()
    k.zero_grad()
    backward(run())
    assert x.grad.tobytes() == first[0].tobytes()
    assert k.grad.tobytes() == first[1].tobytes()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = (x * 2.0).sum()
    assert y._backward is None


def test_item_requires_single_element():
    with pytest.raises(ContractError):
        Tensor(np.ones(2)).item()


# -- gradcheck ---------------------------------------------------------------------


def test_gradcheck_sum_is_exact():
    rep = gradcheck(lambda t: t.sum(), Tensor(np.random.default_rng(8).uniform(-1, 1, (1, 1, 3, 3))))
    assert rep.passed and rep.max_rel_error < 1e-9


def test_gradcheck_composite_loss_on_8x8():
    from irdepth.losses import LossWeights, composite_loss

    rng = np.random.default_rng(9)
    y = Tensor(rng.uniform(0.05, 0.95, (1, 1, 8, 8)))
    rep = gradcheck(lambda p: composite_loss(y, p, LossWeights())[0], Tensor(rng.uniform(0.05, 0.95, (1, 1, 8, 8))))
    assert rep.passed, rep


def test_gradcheck_catches_wrong_gradient():
    x = Tensor(np.random.default_rng(10).uniform(-1, 1, (1, 1, 3, 3)))
    rep = gradcheck(lambda t: (t * t).sum(), x, analytic=3.0 * x.data)
    assert not rep.passed


def test_gradcheck_non_finite_output():
    with pytest.raises(NumericError), np.errstate(divide="ignore"):
        gradcheck(lambda t: (t / 0.0).sum(), Tensor(np.ones((1, 1, 2, 2))))
