import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metabaseline import tensor as T
from metabaseline.tensor import ContractError, DimensionError, DomainError, Tensor

from oracles import GRADIENT_OPS, check_op_gradients, gradient_case, numeric_grad, rel_error


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(T.matmul(eye, eye).data, np.eye(2))


def test_matmul_by_hand():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_of_sum():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    ta = Tensor(a, requires_grad=True)
    T.sum(T.matmul(ta, Tensor(b))).backward()
    num = numeric_grad(lambda x: float((x @ b).sum()), [a], 0)
    assert rel_error(ta.grad, num) < 1e-4


def test_relu_and_leaky_relu():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_allclose(T.leaky_relu(Tensor([-10.0]), 0.1).data, [-1.0])


def test_exp_derivative_at_one():
    x = Tensor(np.array([1.0]), requires_grad=True)
    T.sum(T.exp(x)).backward()
    assert abs(x.grad[0] - math.e) < 1e-4
    num = numeric_grad(lambda a: float(np.exp(a).sum()), [np.array([1.0])], 0)
    assert abs(x.grad[0] - num[0]) < 1e-4


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))


def test_elementwise_dispatch():
    out = T.elementwise("leaky_relu", Tensor([-2.0, 3.0]), slope=0.5)
    np.testing.assert_allclose(out.data, [-1.0, 3.0])
    with pytest.raises(ValueError):
        T.elementwise("tanh", Tensor([1.0]))


def test_broadcast_limited_to_scalars():
    T.add(Tensor(np.ones((2, 2))), Tensor(np.float32(3)))
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


def test_reductions():
    np.testing.assert_allclose(T.mean(Tensor([[2.0, 4.0]]), axis=1).data, [3.0])
    assert T.sum(Tensor(np.ones((3, 3)))).item() == 9
    with pytest.raises(DimensionError):
        T.reduce("sum", Tensor(np.ones((2, 2))), axis=2)


def test_mean_grad_distributes_one_over_n():
    x = Tensor(np.zeros((2, 5)), requires_grad=True)
    T.mean(x).backward()
    np.testing.assert_allclose(x.grad, np.full((2, 5), 0.1))


def test_cross_entropy_uniform():
    loss = T.softmax_cross_entropy(Tensor(np.zeros((3, 5))), [0, 1, 4])
    assert loss.item() == pytest.approx(math.log(5), abs=1e-6)


def test_cross_entropy_confident():
    loss = T.softmax_cross_entropy(Tensor(np.array([[10.0, 0.0]])), [0])
    expected = -math.log(math.exp(10) / (math.exp(10) + 1))  # 4.5398899e-05
    assert loss.item() == pytest.approx(expected, rel=1e-6)
    assert loss.item() == pytest.approx(4.54e-5, rel=1e-3)


def test_cross_entropy_label_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_cross_entropy_gradient_formula():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 2])
    x = Tensor(logits, requires_grad=True)
    T.softmax_cross_entropy(x, labels).backward()
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    p[np.arange(4), labels] -= 1
    np.testing.assert_allclose(x.grad, p / 4, rtol=1e-12)


def test_cross_entropy_stable_for_large_logits():
    loss = T.softmax_cross_entropy(Tensor(np.array([[1000.0, -1000.0]], dtype=np.float32)), [1])
    assert np.isfinite(loss.item())
    assert loss.item() == pytest.approx(2000.0)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        T.exp(x).backward()


def test_backward_twice_doubles_exactly():
    rng = np.random.default_rng(2)
    w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal((4, 3)))
    loss = T.softmax_cross_entropy(T.leaky_relu(T.matmul(x, w)), [0, 1, 2, 0])
    loss.backward()
    once = w.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(w.grad, 2 * once)


def test_shared_subexpression_gradient():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = T.mul(x, x)
    T.sum(T.add(y, y)).backward()  # d/dx 2x^2 = 4x
    np.testing.assert_allclose(x.grad, [12.0])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.exp(x)
    assert not y.requires_grad and y.is_leaf


def test_float32_preserved():
    x = Tensor(np.ones((2, 2), dtype=np.float32))
    for out in (T.exp(x), T.scale(x, 0.5), T.l2_normalize(x), T.mul(x, 2.0), T.mean(x)):
        assert out.dtype == np.float32


@pytest.mark.parametrize("name", GRADIENT_OPS)
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        op, inputs = gradient_case(name, rng)
        assert check_op_gradients(op, inputs, rng) < 1e-4


def test_l2_normalize_zero_row_is_finite():
    x = Tensor(np.zeros((1, 3)), requires_grad=True)
    T.sum(T.l2_normalize(x)).backward()
    assert np.all(np.isfinite(x.grad))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(logits):
    p = T.softmax(logits)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ops_are_deterministic(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))

    def run():
        x = Tensor(a, requires_grad=True)
        loss = T.softmax_cross_entropy(T.matmul(T.l2_normalize(x), Tensor(b)), [0, 1, 2, 3])
        loss.backward()
        return loss.data.tobytes() + x.grad.tobytes()

    assert run() == run()
