import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oatlab import tensor as T
from oatlab.tensor import Tensor

from oracles import OP_CASES, central_diff, naive_conv2d, op_gradcheck_errors


# ---- matmul ---------------------------------------------------------------

def test_matmul_identity():
    A = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), A).data, A.data)


def test_matmul_scalar_case():
    assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(T.DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_sum_gradient_is_broadcast_column_sums(f64, rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 5)))
    (g,) = T.grad(T.sum(T.matmul(a, b)), [a])
    expected = np.broadcast_to(b.data.sum(axis=1), (3, 4))
    np.testing.assert_allclose(g, expected, rtol=1e-12)
    numeric = central_diff(lambda v: (v @ b.data).sum(), a.data, h=1e-5)
    np.testing.assert_allclose(g, numeric, rtol=1e-8)


# ---- conv2d ---------------------------------------------------------------

def test_conv_identity_kernel():
    x = Tensor(np.random.default_rng(0).random((2, 1, 5, 5)))
    out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_zero_weights():
    x = Tensor(np.random.default_rng(0).random((2, 3, 6, 6)))
    assert not T.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), 1, 1).data.any()


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 4), (2, 0, 3), (1, 2, 2)])
def test_conv_matches_naive_loops(f64, rng, stride, pad, k):
    H = 7 if (7 + 2 * pad - k) % stride == 0 else 8
    x = rng.standard_normal((2, 3, H, H))
    w = rng.standard_normal((4, 3, k, k))
    out = T.conv2d(Tensor(x), Tensor(w), stride, pad).data
    ref = naive_conv2d(x, w, stride, pad)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_gradients_match_finite_differences(f64, rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    R = rng.standard_normal((1, 3, 5, 5))
    xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
    gx, gw = T.grad(T.sum(T.conv2d(xt, wt, 1, 1) * Tensor(R)), [xt, wt])
    np.testing.assert_allclose(gx, central_diff(lambda v: (naive_conv2d(v, w, 1, 1) * R).sum(), x), rtol=1e-6)
    np.testing.assert_allclose(gw, central_diff(lambda v: (naive_conv2d(x, v, 1, 1) * R).sum(), w), rtol=1e-6)


def test_conv_non_integral_output():
    with pytest.raises(T.DimensionError):
        T.conv2d(Tensor(np.ones((1, 1, 16, 16))), Tensor(np.ones((1, 1, 3, 3))), stride=2, pad=1)


# ---- leaky relu -----------------------------------------------------------

def test_leaky_relu_values():
    assert T.leaky_relu(Tensor([-1.0]), 0.01).data[0] == pytest.approx(-0.01)
    for slope in (0.0, 0.01, 0.3):
        assert T.leaky_relu(Tensor([3.0]), slope).data[0] == 3.0


def test_leaky_relu_backward(f64):
    x = Tensor([-2.0], requires_grad=True)
    (g,) = T.grad(T.sum(T.leaky_relu(x, 0.01)), [x])
    assert g[0] == pytest.approx(0.01)
    assert central_diff(lambda v: np.maximum(v, 0.01 * v).sum(), np.array([-2.0]))[0] == pytest.approx(0.01)


def test_leaky_relu_derivative_at_zero_is_one():
    x = Tensor([0.0], requires_grad=True)
    (g,) = T.grad(T.sum(T.leaky_relu(x, 0.2)), [x])
    assert g[0] == 1.0


# ---- cross-entropy --------------------------------------------------------

def test_xent_uniform_logits():
    loss = T.softmax_xent(Tensor(np.zeros((4, 10))), [0, 3, 5, 9])
    assert float(loss.data) == pytest.approx(np.log(10), abs=1e-6)


def test_xent_decreases_with_margin():
    losses = []
    for margin in (1, 5, 10):
        logits = np.zeros((1, 10))
        logits[0, 2] = margin
        losses.append(float(T.softmax_xent(Tensor(logits), [2]).data))
    assert losses[0] > losses[1] > losses[2] > 0


def test_xent_gradient_is_softmax_minus_onehot(f64, rng):
    z = rng.standard_normal((3, 5))
    y = np.array([0, 4, 2])
    zt = Tensor(z, requires_grad=True)
    (g,) = T.grad(T.softmax_xent(zt, y, reduction="sum"), [zt])
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(g, p - np.eye(5)[y], rtol=1e-12)

    def loss(v):
        e = np.exp(v - v.max(axis=1, keepdims=True))
        return -np.log(e[np.arange(3), y] / e.sum(axis=1)).sum()
    np.testing.assert_allclose(g, central_diff(loss, z), rtol=1e-6)


def test_xent_label_out_of_range():
    with pytest.raises(ValueError):
        T.softmax_xent(Tensor(np.zeros((1, 3))), [3])


def test_xent_stable_for_huge_logits():
    loss = T.softmax_xent(Tensor([[1e4, 0.0, -1e4]]), [1])
    assert np.isfinite(loss.data) and float(loss.data) == pytest.approx(1e4, rel=1e-6)


# ---- backward contract ----------------------------------------------------

def test_sum_gradient_is_ones(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    T.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_accumulates(rng):
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    loss = T.sum(x * x)
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * first)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.DimensionError):
        T.backward(x * 2.0)


def test_grad_does_not_touch_grad_fields(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    w = Tensor(rng.standard_normal(3), requires_grad=True)
    T.grad(T.sum(x * w), [x])
    assert x.grad is None and w.grad is None


def test_tape_visits_each_node_once():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    z = y + y  # diamond
    tape = T.Tape.from_root(T.sum(z))
    assert len({id(n) for n in tape.nodes}) == len(tape.nodes)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        if n._node is not None:
            assert all(pos[id(p)] < pos[id(n)] for p in n._node.parents)
    T.sum(z).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_shared_subexpression_gradient(f64):
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    (g,) = T.grad(T.sum(y * y + y), [x])  # d/dx (x^4 + x^2) = 4x^3 + 2x
    assert g[0] == pytest.approx(4 * 27 + 6)


def test_ops_do_not_mutate_inputs(rng):
    a = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    at, wt = Tensor(a, requires_grad=True), Tensor(w, requires_grad=True)
    a0, w0 = at.data.copy(), wt.data.copy()
    out = T.leaky_relu(T.conv2d(at, wt, 1, 1), 0.1)
    out2, _, _ = T.batch_norm(out, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    T.backward(T.softmax_xent(T.mean(out2, axis=(2, 3)), [0, 1]))
    np.testing.assert_array_equal(at.data, a0)
    np.testing.assert_array_equal(wt.data, w0)


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
    r1 = T.conv2d(Tensor(x), Tensor(w), 1, 1).data
    r2 = T.conv2d(Tensor(x), Tensor(w), 1, 1).data
    assert r1.tobytes() == r2.tobytes()


def test_validity_check():
    assert Tensor([1.0, 2.0]).is_valid()
    assert not Tensor([1.0, np.nan]).is_valid()
    assert not Tensor([np.inf]).is_valid()


def test_precision_switch():
    assert Tensor([1.0]).dtype == np.float32
    with T.precision(64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


# ---- gradcheck ------------------------------------------------------------

def test_gradcheck_quadratic(f64, rng):
    x = Tensor(rng.standard_normal(10))
    # central differences are exact for a quadratic, so a large step only trims roundoff
    assert T.gradcheck(lambda t: T.sum(t * t) * 0.5, x, h=1e-3) < 1e-9


def test_gradcheck_dense_xent(f64, rng):
    w = Tensor(rng.standard_normal((4, 6)))
    b = Tensor(rng.standard_normal(4))
    x = Tensor(rng.standard_normal((3, 6)))
    assert T.gradcheck(lambda t: T.softmax_xent(T.linear(t, w, b), [0, 1, 3]), x) < 1e-6


def test_gradcheck_leaky_away_from_kink(f64, rng):
    h = 1e-6
    x = rng.standard_normal(20)
    x = np.where(np.abs(x) < 10 * h, 1.0, x)
    assert T.gradcheck(lambda t: T.sum(T.leaky_relu(t, 0.01) * t), Tensor(x), h) < 1e-6


def test_gradcheck_detects_wrong_gradient(f64, rng):
    # a deliberately broken op must be flagged
    def bad(t):
        out = Tensor._from_op(t.data ** 2, "bad", (t,), lambda g, needs: (g * t.data,))
        return T.sum(out)
    assert T.gradcheck(bad, Tensor(rng.uniform(1, 2, 5))) > 0.1


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_operator_gradcheck_sample(name):
    assert op_gradcheck_errors(name, cases=10, seed=7) < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.integers(0, 1))
def test_conv_property_matches_naive(b, c, h, pad):
    rng = np.random.default_rng(b * 100 + c * 10 + h)
    with T.precision(64):
        x = rng.standard_normal((b, c, h, h))
        w = rng.standard_normal((2, c, 3, 3))
        if h + 2 * pad < 3:
            return
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), 1, pad).data, naive_conv2d(x, w, 1, pad),
                                   rtol=1e-12, atol=1e-12)
