import numpy as np
import pytest

from peftforge import tensor as T


# ---------------------------------------------------------------------------
# Construction and fills
# ---------------------------------------------------------------------------


def test_zeros_fill():
    t = T.zeros([2, 2])
    assert t.shape == (2, 2)
    assert np.all(t.data == 0.0)


def test_constant_fill():
    t = T.full([3], 1.5)
    np.testing.assert_array_equal(t.data, np.array([1.5, 1.5, 1.5], dtype=np.float32))


def test_gaussian_fill_deterministic_per_seed():
    a = T.gaussian([4], 0.0, 1.0, seed=7)
    b = T.gaussian([4], 0.0, 1.0, seed=7)
    np.testing.assert_array_equal(a.data, b.data)
    c = T.gaussian([4], 0.0, 1.0, seed=8)
    assert not np.array_equal(a.data, c.data)


def test_gaussian_moments_are_sane():
    t = T.gaussian([100000], 3.0, 2.0, seed=0)
    assert abs(t.data.mean() - 3.0) < 0.05
    assert abs(t.data.std() - 2.0) < 0.05


@pytest.mark.parametrize("shape", [[], [0], [2, 0]])
def test_bad_shapes_rejected(shape):
    with pytest.raises(ValueError):
        T.zeros(shape)


def test_frozen_by_default():
    assert T.zeros([2]).requires_grad is False


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    x = T.constant(np.arange(4, dtype=np.float32).reshape(2, 2))
    eye = T.constant(np.eye(2, dtype=np.float32))
    np.testing.assert_array_equal(T.matmul(eye, x).data, x.data)


def test_matmul_hand_dot_product():
    a = T.constant(np.array([[1.0, 2.0]], dtype=np.float32))
    b = T.constant(np.array([[3.0], [4.0]], dtype=np.float32))
    np.testing.assert_array_equal(T.matmul(a, b).data, np.array([[11.0]], dtype=np.float32))


def test_matmul_zero_annihilator():
    z = T.zeros([2, 3])
    anything = T.gaussian([3, 2], 0.0, 1.0, seed=1)
    np.testing.assert_array_equal(T.matmul(z, anything).data, np.zeros((2, 2), dtype=np.float32))


def test_matmul_dim_mismatch():
    with pytest.raises(ValueError):
        T.matmul(T.zeros([2, 3]), T.zeros([2, 3]))


def test_matmul_gradients_against_rule():
    # d a = g . b^T, d b = a^T . g with g = ones (loss = sum)
    a = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float64), requires_grad=True)
    b = T.Tensor(np.array([[5.0, 6.0], [7.0, 8.0]], dtype=np.float64), requires_grad=True)
    loss = T.tsum(T.matmul(a, b))
    T.backward(loss)
    g = np.ones((2, 2))
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_matmul_stacked_by_2d():
    a = T.Tensor(np.random.default_rng(0).normal(size=(3, 4, 5)), requires_grad=True)
    w = T.Tensor(np.random.default_rng(1).normal(size=(5, 6)), requires_grad=True)
    out = T.matmul(a, w)
    assert out.shape == (3, 4, 6)
    T.backward(T.tsum(out))
    g = np.ones((3, 4, 6))
    np.testing.assert_allclose(w.grad, a.data.reshape(-1, 5).T @ g.reshape(-1, 6))


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------


def test_softmax_uniform():
    s = T.softmax_lastdim(T.zeros([3]))
    np.testing.assert_allclose(s.data, np.full(3, 1.0 / 3.0), rtol=1e-6)


def test_softmax_rows_sum_to_one_and_nonnegative():
    x = T.gaussian([20, 17], 0.0, 5.0, seed=3)
    s = T.softmax_lastdim(x)
    assert np.all(s.data >= 0)
    np.testing.assert_allclose(s.data.sum(axis=-1), np.ones(20), atol=1e-6)


def test_sigmoid_symmetry_point():
    assert T.sigmoid(T.zeros([1])).data[0] == pytest.approx(0.5)


def test_silu_at_one():
    # 1 * sigma(1) = 1 / (1 + e^-1)
    expected = 1.0 / (1.0 + np.exp(-1.0))
    assert T.silu(T.full([1], 1.0)).data[0] == pytest.approx(expected, abs=1e-6)
    assert expected == pytest.approx(0.731059, abs=1e-6)


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        T.log(T.zeros([2]))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        T.add(T.zeros([2, 3]), T.zeros([3, 2]))


def test_scalar_broadcast_allowed():
    out = T.add(T.full([2, 2], 1.0), T.full([1], 2.0))
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0, dtype=np.float32))


def test_elementwise_dispatch():
    x = T.full([2], 2.0)
    np.testing.assert_allclose(T.elementwise("exp", x).data, np.exp(x.data))
    np.testing.assert_allclose(T.elementwise("scale", x, 3.0).data, x.data * 3.0)
    with pytest.raises(ValueError):
        T.elementwise("no_such_op", x)


def test_rsqrt_meansq_matches_definition():
    x = T.constant(np.array([[3.0, 4.0]], dtype=np.float32))
    out = T.rsqrt_meansq(x, eps=1e-6)
    expected = 1.0 / np.sqrt((9.0 + 16.0) / 2.0 + 1e-6)
    np.testing.assert_allclose(out.data, np.full((1, 2), expected), rtol=1e-6)


def test_rsqrt_meansq_requires_positive_eps():
    with pytest.raises(ValueError):
        T.rsqrt_meansq(T.zeros([2]), eps=0.0)


def test_bce_with_logits_at_zero():
    # sigma(0) = 0.5 regardless of target: loss = ln 2
    logits = T.zeros([3])
    out = T.bce_with_logits(logits, np.array([1.0, 0.0, 1.0]))
    np.testing.assert_allclose(out.data, np.full(3, np.log(2.0)), rtol=1e-6)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_linear():
    x = T.Tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32), requires_grad=True)
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones(3, dtype=np.float32))


def test_backward_square_rule():
    x = T.Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, np.array([2.0, 4.0], dtype=np.float32))


def test_backward_frozen_leaf_gets_no_buffer():
    x = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    w = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=False)
    T.backward(T.tsum(T.mul(x, w)))
    assert w.grad is None
    assert x.grad is not None


def test_backward_unreachable_leaf_keeps_zero_grad():
    x = T.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    y = T.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    gmap = T.backward(T.tsum(x))
    assert y.grad is None  # zero: never reached the loss
    assert y not in gmap


def test_backward_requires_scalar():
    x = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(T.GraphError):
        T.backward(T.mul(x, x))


def test_backward_twice_rejected():
    x = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    loss = T.tsum(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(T.GraphError):
        T.backward(loss)


def test_backward_accumulates_across_calls():
    x = T.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    T.backward(T.tsum(x))
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.full(2, 2.0, dtype=np.float32))


def test_shared_subexpression_grad_not_aliased():
    # x feeds two branches whose grads must accumulate independently
    x = T.Tensor(np.array([1.0, 2.0], dtype=np.float64), requires_grad=True)
    y = T.Tensor(np.array([3.0, 4.0], dtype=np.float64), requires_grad=True)
    s = T.add(x, y)
    loss = T.add(T.tsum(s), T.tsum(T.mul(s, s)))
    T.backward(loss)
    np.testing.assert_allclose(x.grad, 1.0 + 2.0 * (x.data + y.data))
    np.testing.assert_allclose(y.grad, 1.0 + 2.0 * (x.data + y.data))


def test_no_grad_suppresses_recording():
    x = T.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with T.no_grad():
        out = T.mul(x, x)
    assert out.requires_grad is False
    assert out.is_leaf()


def test_gather_rows_scatter_grad():
    table = T.Tensor(np.ones((4, 2), dtype=np.float32), requires_grad=True)
    out = T.gather_rows(table, np.array([[1, 1], [3, 0]]))
    assert out.shape == (2, 2, 2)
    T.backward(T.tsum(out))
    np.testing.assert_array_equal(table.grad[:, 0], np.array([1.0, 2.0, 0.0, 1.0]))


def test_gather_rows_id_out_of_range():
    table = T.zeros([4, 2])
    with pytest.raises(ValueError):
        T.gather_rows(table, np.array([4]))


def test_concat_narrow_roundtrip():
    a = T.Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    left = T.narrow(a, 1, 0, 2)
    right = T.narrow(a, 1, 2, 1)
    back = T.concat([left, right], axis=1)
    np.testing.assert_array_equal(back.data, a.data)
    T.backward(T.tsum(back))
    np.testing.assert_array_equal(a.grad, np.ones((2, 3), dtype=np.float32))


def test_determinism_bitwise_rerun():
    def run():
        x = T.gaussian([8, 8], 0.0, 1.0, seed=42, requires_grad=True)
        w = T.gaussian([8, 8], 0.0, 0.2, seed=43, requires_grad=True)
        loss = T.tsum(T.silu(T.matmul(x, w)))
        T.backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(gx1, gx2)
    np.testing.assert_array_equal(gw1, gw2)


# ---------------------------------------------------------------------------
# grad_check: finite differences as the independent oracle
# ---------------------------------------------------------------------------


def test_grad_check_quadratic():
    x = T.gaussian([5], 0.0, 1.0, seed=11, dtype=np.float64, requires_grad=True)
    err = T.grad_check(lambda t: T.tsum(T.mul(t, t)), x, eps=1e-5)
    assert err <= 1e-7


def test_grad_check_constant_function():
    x = T.gaussian([4], 0.0, 1.0, seed=12, dtype=np.float64, requires_grad=True)
    c = T.full([1], 3.0, dtype=np.float64)
    err = T.grad_check(lambda t: T.tsum(c), x, eps=1e-5)
    assert err == 0.0


@pytest.mark.parametrize(
    "fn",
    [
        lambda t: T.tsum(T.exp(t)),
        lambda t: T.tsum(T.sigmoid(t)),
        lambda t: T.tsum(T.silu(t)),
        lambda t: T.tsum(T.tanh(t)),
        lambda t: T.tsum(T.mul(T.softmax_lastdim(t), T.softmax_lastdim(t))),
        lambda t: T.tsum(T.log_softmax_lastdim(t)),
        lambda t: T.tsum(T.mul(t, T.rsqrt_meansq(t, 1e-5))),
        lambda t: T.tsum(T.bce_with_logits(t, np.linspace(0, 1, 12).reshape(3, 4))),
        lambda t: T.tmean(T.relu(T.add(t, 0.1))),
    ],
)
def test_grad_check_elementwise_ops(fn):
    x = T.gaussian([3, 4], 0.0, 1.0, seed=13, dtype=np.float64, requires_grad=True)
    assert T.grad_check(fn, x, eps=1e-5) <= 1e-5


def test_grad_check_structural_ops():
    x = T.gaussian([2, 3, 4], 0.0, 1.0, seed=14, dtype=np.float64, requires_grad=True)

    def fn(t):
        p = T.permute(t, (1, 0, 2))
        r = T.reshape(p, (3, 8))
        n = T.narrow(r, 1, 2, 5)
        return T.tsum(T.mul(n, n))

    assert T.grad_check(fn, x, eps=1e-5) <= 1e-6


def test_grad_check_expand_leading():
    x = T.gaussian([4], 0.0, 1.0, seed=15, dtype=np.float64, requires_grad=True)

    def fn(t):
        e = T.expand_leading(t, (3, 2))
        return T.tsum(T.mul(e, e))

    assert T.grad_check(fn, x, eps=1e-5) <= 1e-6


def test_grad_check_matmul_chain():
    rng = T.make_rng(77)
    w = T.gaussian([6, 6], 0.0, 0.5, seed=rng, dtype=np.float64, requires_grad=True)
    x = T.gaussian([4, 6], 0.0, 1.0, seed=rng, dtype=np.float64)

    def fn(t):
        return T.tsum(T.silu(T.matmul(x, t)))

    assert T.grad_check(fn, w, eps=1e-6) <= 1e-7


def test_grad_check_sampled_coords():
    x = T.gaussian([10, 10], 0.0, 1.0, seed=16, dtype=np.float64, requires_grad=True)
    err = T.grad_check(lambda t: T.tsum(T.mul(t, t)), x, eps=1e-5, coords=20, rng=T.make_rng(5))
    assert err <= 1e-7


def test_grad_check_rejects_bad_eps_and_dtype():
    x = T.gaussian([3], 0.0, 1.0, seed=17, dtype=np.float64, requires_grad=True)
    with pytest.raises(ValueError):
        T.grad_check(lambda t: T.tsum(t), x, eps=0.0)
    y = T.gaussian([3], 0.0, 1.0, seed=18, requires_grad=True)  # float32
    with pytest.raises(ValueError):
        T.grad_check(lambda t: T.tsum(t), y, eps=1e-5)


# ---------------------------------------------------------------------------
# ComputeGraph bookkeeping
# ---------------------------------------------------------------------------


def test_compute_graph_precision_field():
    x = T.Tensor(np.ones(2, dtype=np.float64), requires_grad=True)
    g = T.ComputeGraph(T.tsum(x))
    assert g.precision == "double"
    y = T.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    g32 = T.ComputeGraph(T.tsum(y))
    assert g32.precision == "single"


def test_compute_graph_visits_each_node_once():
    x = T.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    s = T.mul(x, x)
    loss = T.add(T.tsum(s), T.tsum(s))
    g = T.ComputeGraph(loss)
    ids = [id(n) for n in g.nodes]
    assert len(ids) == len(set(ids))


def test_dropout_eval_identity_train_scaling():
    x = T.full([1000], 1.0)
    out_eval = T.dropout(x, 0.2, T.make_rng(0), training=False)
    assert out_eval is x
    out_train = T.dropout(x, 0.2, T.make_rng(0), training=True)
    kept = out_train.data[out_train.data > 0]
    assert np.allclose(kept, 1.0 / 0.8)
    assert abs((out_train.data > 0).mean() - 0.8) < 0.05
