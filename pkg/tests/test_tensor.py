import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokengate import tensor as T
from tokengate.tensor import NumericError, PermutationError, TapeError, Tensor, grad_check


def rand(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def naive_matmul(a, b):
    p, q = a.shape
    r = b.shape[1]
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            for k in range(q):
                out[i, j] += a[i, k] * b[k, j]
    return out


# -- matmul ------------------------------------------------------------------

def test_matmul_identity_and_zero():
    b = T.tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(T.matmul(T.tensor(np.eye(2)), b).data, b.data)
    z = T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.arange(6.0).reshape(3, 2)))
    assert np.array_equal(z.data, np.zeros((2, 2)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(T.matmul(T.tensor(a), T.tensor(b)).data, naive_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((2, 3))))


def test_matmul_backward_rule():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    T.sum_(T.mul(T.matmul(a, b), w)).backward()
    np.testing.assert_allclose(a.grad, w @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ w)


# -- sigmoid / softmax / layer norm ---------------------------------------------

def test_sigmoid_values():
    assert T.sigmoid(T.tensor([0.0])).data[0] == 0.5
    hi, lo = T.sigmoid(T.tensor([40.0, -40.0])).data
    assert abs(hi - 1.0) < 1e-12 and abs(lo) < 1e-12
    assert abs(T.sigmoid(T.tensor([1.0])).data[0] - 0.7310585786) < 1e-9


def test_sigmoid_no_overflow():
    with np.errstate(over="raise"):
        y = T.sigmoid(T.tensor([-1e6, 1e6])).data
    assert y[0] == pytest.approx(0.0) and y[1] == 1.0


def test_row_softmax_cases():
    y = T.row_softmax(T.tensor([[2.0, 2.0, 2.0, 2.0]])).data
    np.testing.assert_allclose(y, 0.25)
    np.testing.assert_allclose(T.row_softmax(T.tensor([[1000.0, 0.0]])).data, [[1.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(T.row_softmax(T.tensor([[1.0, 2.0, 3.0]])).data,
                               [[0.09003057, 0.24472847, 0.66524096]], atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_row_softmax_is_distribution(p, q, seed):
    x = np.random.default_rng(seed).normal(scale=30, size=(p, q))
    y = T.row_softmax(T.tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)


def test_layer_norm_cases():
    one, zero = T.tensor(np.ones(3)), T.tensor(np.zeros(3))
    y = T.layer_norm_rows(T.tensor([[5.0, 5.0, 5.0]]), one, zero, 1e-5).data
    assert np.array_equal(y, np.zeros((1, 3)))
    y = T.layer_norm_rows(T.tensor([[1.0, -1.0]]), T.tensor(np.ones(2)), T.tensor(np.zeros(2)), 1e-15).data
    np.testing.assert_allclose(y, [[1.0, -1.0]], atol=1e-12)


def test_layer_norm_row_statistics():
    x = np.random.default_rng(11).normal(3.0, 4.0, size=(3, 8))
    y = T.layer_norm_rows(T.tensor(x), T.tensor(np.ones(8)), T.tensor(np.zeros(8)), 1e-12).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-6)


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        T.layer_norm_rows(T.tensor(np.ones((1, 2))), T.tensor(np.ones(2)), T.tensor(np.zeros(2)), 0.0)


# -- permutations ---------------------------------------------------------------

def test_gather_identity_and_roundtrip():
    x = T.tensor(np.arange(12.0).reshape(3, 4))
    assert np.array_equal(T.gather_rows(x, [0, 1, 2]).data, x.data)
    back = T.scatter_rows(T.gather_rows(x, [2, 0, 1]), [2, 0, 1])
    assert np.array_equal(back.data, x.data)


def test_gather_gradient_is_repermuted_weight():
    rng = np.random.default_rng(5)
    x = rand(rng, 5, 4)
    perm = rng.permutation(5)
    w = rng.normal(size=(5, 4))
    T.sum_(T.mul(T.gather_rows(x, perm), w)).backward()
    expected = np.zeros_like(w)
    for i, src in enumerate(perm):
        expected[src] = w[i]
    assert np.array_equal(x.grad, expected)


@settings(max_examples=50, deadline=None)
@given(st.permutations(list(range(7))), st.integers(0, 2**31 - 1))
def test_gather_scatter_compose_to_identity_with_gradients(perm, seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 7, 3)
    w = rng.normal(size=(7, 3))
    y = T.scatter_rows(T.gather_rows(x, perm), perm)
    assert np.array_equal(y.data, x.data)
    T.sum_(T.mul(y, w)).backward()
    assert np.array_equal(x.grad, w)


@pytest.mark.parametrize("bad", [[0, 0, 1], [0, 1], [0, 1, 3]])
def test_non_bijective_index_rejected(bad):
    with pytest.raises(PermutationError):
        T.gather_rows(T.tensor(np.zeros((3, 2))), bad)


# -- backward semantics -----------------------------------------------------------

def test_backward_simple_cases():
    x = T.tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.sum_(x).backward()
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])
    x = T.tensor([1.0, 2.0], requires_grad=True)
    T.sum_(T.mul(x, x)).backward()
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_gradient_accumulates_over_uses():
    rng = np.random.default_rng(1)
    x = rand(rng, 3, 3)
    w1, w2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    T.add(T.sum_(T.mul(T.sigmoid(x), w1)), T.sum_(T.mul(T.tanh(x), w2))).backward()
    both = x.grad.copy()
    x.grad = None
    T.sum_(T.mul(T.sigmoid(x), w1)).backward()
    g1 = x.grad.copy()
    x.grad = None
    T.sum_(T.mul(T.tanh(x), w2)).backward()
    np.testing.assert_allclose(both, g1 + x.grad, rtol=1e-14, atol=1e-15)


def test_backward_errors():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(TapeError, match="scalar"):
        T.mul(x, 2.0).backward()
    with pytest.raises(TapeError):
        T.sum_(T.tensor([1.0, 2.0])).backward()
    loss = T.sum_(T.mul(x, x))
    loss.backward()
    with pytest.raises(TapeError, match="consumed"):
        loss.backward()


def test_tensors_are_at_most_2d():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 2, 2)))


# -- grad_check harness and per-op gradient checks -------------------------------------

def test_grad_check_of_sum_is_exact():
    x = T.tensor(np.random.default_rng(0).normal(size=5))
    assert grad_check(lambda: T.sum_(x), [x]) < 1e-12


def test_grad_check_reports_non_finite():
    x = T.tensor([1.0, 0.0])

    def f():
        return T.sum_(T.mul(x, T.Tensor(np.array([1.0, np.inf]) if x.data[1] > 0 else np.ones(2))))

    with pytest.raises(NumericError, match="coordinate 1"):
        grad_check(f, [x])


def test_grad_check_rejects_bad_eps():
    x = T.tensor([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda: T.sum_(x), [x], eps=1.0)


def _weighted(y, rng):
    return T.sum_(T.mul(y, T.Tensor(rng.normal(size=y.shape))))


OP_CASES = {
    "matmul": lambda rng: ([rand(rng, 3, 4), rand(rng, 4, 2)], lambda a, b: T.matmul(a, b)),
    "sigmoid": lambda rng: ([rand(rng, 3, 4)], T.sigmoid),
    "tanh": lambda rng: ([rand(rng, 3, 4)], T.tanh),
    "gelu": lambda rng: ([rand(rng, 3, 4)], T.gelu),
    "row_softmax": lambda rng: ([rand(rng, 3, 5)], T.row_softmax),
    "layer_norm": lambda rng: ([rand(rng, 3, 6), rand(rng, 6), rand(rng, 6)],
                               lambda x, g, b: T.layer_norm_rows(x, g, b, 1e-5)),
    "add_bias": lambda rng: ([rand(rng, 3, 4), rand(rng, 4)], T.add),
    "mul": lambda rng: ([rand(rng, 3, 4), rand(rng, 3, 4)], T.mul),
    "sub": lambda rng: ([rand(rng, 3, 4), rand(rng, 3, 4)], T.sub),
    "abs": lambda rng: ([rand(rng, 3, 4)], T.abs_),
    "transpose": lambda rng: ([rand(rng, 3, 4)], T.transpose),
    "gather_rows": lambda rng: ([rand(rng, 5, 3)], lambda x, p=rng.permutation(5): T.gather_rows(x, p)),
    "scatter_rows": lambda rng: ([rand(rng, 5, 3)], lambda x, p=rng.permutation(5): T.scatter_rows(x, p)),
    "take": lambda rng: ([rand(rng, 6)], lambda x, i=rng.integers(0, 6, 9): T.take(x, i)),
    "expand_cols": lambda rng: ([rand(rng, 4)], lambda v: T.expand_cols(v, 3)),
    "mask_rows": lambda rng: ([rand(rng, 4, 3)], lambda x: T.mask_rows(x, [True, False, True, True])),
    "slice_concat": lambda rng: ([rand(rng, 4, 3), rand(rng, 2, 3)],
                                 lambda a, b: T.concat_cols([T.concat_rows([T.slice_rows(a, 1, 3), b]),
                                                             T.slice_rows(a, 0, 4)])),
    "mean": lambda rng: ([rand(rng, 3, 4)], lambda x: T.mul(T.mean(x), T.Tensor(np.ones((1, 1))))),
    "cross_entropy": lambda rng: ([rand(rng, 5, 3)],
                                  lambda z, y=rng.integers(0, 3, 5): T.mul(T.cross_entropy(z, y),
                                                                           T.Tensor(np.ones((1, 1))))),
}


@pytest.mark.parametrize("op", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(10))
def test_op_gradients_match_central_differences(op, seed):
    rng = np.random.default_rng(seed)
    inputs, fn = OP_CASES[op](rng)
    weights_rng_seed = int(rng.integers(2**31))

    def loss():
        return _weighted(fn(*inputs), np.random.default_rng(weights_rng_seed))

    assert grad_check(loss, inputs, eps=1e-3) < 1e-4


def test_sigmoid_matmul_composite_gradient():
    rng = np.random.default_rng(2)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    assert grad_check(lambda: T.sum_(T.sigmoid(T.matmul(a, b))), [a, b]) < 1e-4


def test_gelu_tanh_approximation_value():
    v = 0.7
    expected = 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3)))
    assert T.gelu(T.tensor([v])).data[0] == pytest.approx(expected, abs=1e-15)
