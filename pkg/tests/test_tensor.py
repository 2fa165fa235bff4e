import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uformer import tensor as T
from uformer.gradcheck import check
from uformer.tensor import DimensionError, Tensor


def naive_conv(x, w, b, stride, padding, groups):
    cin, H, W = x.shape
    cout, cpg, kh, kw = w.shape
    xp = np.zeros((cin, H + 2 * padding, W + 2 * padding))
    xp[:, padding : padding + H, padding : padding + W] = x
    ho = (H + 2 * padding - kh) // stride + 1
    wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    per = cout // groups
    for o in range(cout):
        g = o // per
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(cpg):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[g * cpg + c, i * stride + u, j * stride + v] * w[o, c, u, v]
                out[o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def test_matmul_hand_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal((a @ b).data, [[19, 22], [43, 50]])


def test_matmul_identity(rng):
    a = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(np.eye(4))).data, a)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_grad_matches_fd(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    assert check(lambda x, y: T.tsum(T.matmul(x, y)), [a, b]) < 1e-4


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((1, 5, 6))
    y = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(y.data, x)


def test_conv_constant_field(f64):
    x = np.full((1, 6, 6), 0.7)
    y = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), padding=1).data
    np.testing.assert_allclose(y[0, 1:-1, 1:-1], 9 * 0.7, rtol=1e-15)


@pytest.mark.parametrize("stride,padding,groups", [(1, 0, 1), (1, 1, 2), (2, 1, 1), (1, 1, 4)])
def test_conv_matches_naive_loop_bitwise(rng, f64, stride, padding, groups):
    cin = 4 if groups == 4 else 2
    cout = 4
    x = rng.standard_normal((cin, 5, 5))
    w = rng.standard_normal((cout, cin // groups, 3, 3))
    b = rng.standard_normal(cout)
    ours = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding, groups=groups).data
    ref = naive_conv(x, w, b, stride, padding, groups)
    np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-13)


def test_conv_non_integral_extent_is_config_error():
    with pytest.raises(ValueError, match="non-integral"):
        T.conv2d(Tensor(np.zeros((1, 5, 5))), Tensor(np.zeros((1, 1, 4, 4))), stride=2, padding=0)


def test_conv_transpose_doubles_extent(rng):
    y = T.conv_transpose2d(Tensor(rng.standard_normal((3, 4, 5))), Tensor(rng.standard_normal((3, 2, 2, 2))))
    assert y.shape == (2, 8, 10)


def test_conv_transpose_is_adjoint_of_strided_conv(rng, f64):
    w = rng.standard_normal((3, 2, 2, 2))  # conv: 2 -> 3 channels; transpose: 3 -> 2
    x = rng.standard_normal((2, 4, 4))
    y = rng.standard_normal((3, 2, 2))
    lhs = np.sum(T.conv2d(Tensor(x), Tensor(w), stride=2).data * y)
    rhs = np.sum(x * T.conv_transpose2d(Tensor(y), Tensor(w), stride=2).data)
    assert abs(lhs - rhs) <= 1e-6 * abs(lhs)


def test_conv_transpose_grad(rng):
    x, w, b = rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 2, 2)), rng.standard_normal(3)
    R = rng.standard_normal((3, 6, 6))
    assert check(lambda a, k, c: T.tsum(T.conv_transpose2d(a, k, c) * Tensor(R)), [x, w, b]) < 1e-4


def test_softmax_properties(rng):
    x = rng.standard_normal((4, 7)).astype(np.float32)
    s = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(T.softmax(Tensor(x + 3.5)).data, s, atol=1e-6)
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros((1, 5)))).data, 0.2, rtol=1e-7)


def test_softmax_large_inputs_stay_finite():
    s = T.softmax(Tensor(np.array([[1000.0, 0.0, -1e9]]))).data
    assert np.all(np.isfinite(s))


def test_layer_norm_statistics(rng, f64):
    x = rng.standard_normal((5, 16)) * 3 + 2
    y = T.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, rtol=1e-5)


def test_layer_norm_constant_token_gives_beta_exactly(rng):
    beta = rng.standard_normal(8).astype(np.float32)
    x = np.full((3, 8), 0.3141, np.float32)
    y = T.layer_norm(Tensor(x), Tensor(rng.standard_normal(8)), Tensor(beta)).data
    np.testing.assert_array_equal(y, np.broadcast_to(beta, (3, 8)))


def test_activation_examples():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    assert T.leaky_relu(Tensor([0.0])).data[0] == 0.0
    assert abs(T.gelu(Tensor(np.array([10.0]), dtype=np.float64)).data[0] - 10.0) < 1e-6
    assert T.activation(Tensor(np.array([-1.0]), dtype=np.float64), "leaky_relu").data[0] == -0.2
    with pytest.raises(ValueError):
        T.activation(Tensor([1.0]), "relu6")


@pytest.mark.parametrize("fn", [T.gelu, T.leaky_relu])
def test_activation_grads(rng, fn):
    x = rng.standard_normal((4, 5))
    R = rng.standard_normal((4, 5))
    assert check(lambda a: T.tsum(fn(a) * Tensor(R)), [x]) < 1e-4


def test_reshape_permute_round_trips(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)))
    np.testing.assert_array_equal(T.reshape(T.reshape(x, (6, 4)), (2, 3, 4)).data, x.data)
    np.testing.assert_array_equal(T.permute(x, (0, 1, 2)).data, x.data)
    p = (2, 0, 1)
    inv = tuple(np.argsort(p))
    np.testing.assert_array_equal(T.permute(T.permute(x, p), inv).data, x.data)
    with pytest.raises(DimensionError):
        T.reshape(x, (5, 5))
    with pytest.raises(DimensionError):
        T.permute(x, (0, 0, 1))


def test_backward_examples(f64):
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))
    x.zero_grad()
    T.tsum(x * x).backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_accumulates_across_uses(f64):
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * x + x * 3.0).sum().backward()
    assert x.grad[0] == 7.0


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert y.op == "leaf" or not y._parents


def test_reflect_indices_fold_any_width():
    np.testing.assert_array_equal(T.reflect_indices(3, 0, 5), [0, 1, 2, 1, 0, 1, 2, 1])
    np.testing.assert_array_equal(T.reflect_indices(4, 2, 2), [2, 1, 0, 1, 2, 3, 2, 1])
    np.testing.assert_array_equal(T.reflect_indices(1, 0, 3), [0, 0, 0, 0])


def test_pad_reflect_matches_numpy(rng):
    x = rng.standard_normal((5, 6))
    y = T.pad_reflect(Tensor(x, dtype=np.float64), {0: (0, 3), 1: (2, 1)}).data
    np.testing.assert_array_equal(y, np.pad(x, ((0, 3), (2, 1)), mode="reflect"))


def test_check_finite_mode_raises():
    T.set_check_finite(True)
    try:
        with pytest.raises(T.NonFiniteError), np.errstate(invalid="ignore"):
            T.sqrt(Tensor(np.array([-1.0])))
    finally:
        T.set_check_finite(False)


def test_determinism_of_graph(rng):
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

    def run():
        a = Tensor(x, requires_grad=True)
        k = Tensor(w, requires_grad=True)
        y = T.gelu(T.conv2d(a, k, padding=1))
        loss = T.tmean(T.softmax(y, axis=1) * y)
        loss.backward()
        return loss.data.copy(), a.grad.copy(), k.grad.copy()

    for u, v in zip(run(), run()):
        assert u.tobytes() == v.tobytes()


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_adjoint_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    xd = rng.standard_normal((3, 4))
    with T.default_dtype(np.float64):

        def grad_of(fn):
            x = Tensor(xd, requires_grad=True)
            fn(x).backward()
            return x.grad

        f = lambda x: T.tsum(T.gelu(x) * 2.0)
        g = lambda x: T.tsum(T.softmax(x, axis=-1) * Tensor(xd))
        combo = grad_of(lambda x: f(x) * a + g(x) * b)
        np.testing.assert_allclose(combo, a * grad_of(f) + b * grad_of(g), atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(
    h=st.integers(3, 7),
    w=st.integers(3, 7),
    k=st.sampled_from([1, 2, 3]),
    stride=st.sampled_from([1, 2]),
    seed=st.integers(0, 2**16),
)
def test_conv_random_shapes_match_naive(h, w, k, stride, seed):
    rng = np.random.default_rng(seed)
    padding = k // 2
    if (h + 2 * padding - k) % stride or (w + 2 * padding - k) % stride:
        return
    x = rng.standard_normal((2, h, w))
    kern = rng.standard_normal((3, 2, k, k))
    ours = T.conv2d(Tensor(x, dtype=np.float64), Tensor(kern, dtype=np.float64), stride=stride, padding=padding).data
    np.testing.assert_allclose(ours, naive_conv(x, kern, None, stride, padding, 1), atol=1e-12)
