import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lazyformer.errors import ContractError, NonFiniteError, ShapeError
from lazyformer.gradcheck import numeric_grad, relative_error
from lazyformer.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    counters,
    cross_entropy,
    dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    mul,
    no_grad,
    softmax_rows,
    tensor_sum,
)


def rand(shape, seed=0, lo=-2.0, hi=2.0):
    return Tensor(np.random.default_rng(seed).uniform(lo, hi, size=shape), requires_grad=True)


def check_grad(loss_fn, *tensors, tol=1e-6):
    for t in tensors:
        t.zero_grad()
    loss_fn().backward()
    for t in tensors:
        err = relative_error(t.grad, numeric_grad(lambda: loss_fn().item(), t, h=1e-5))
        assert err < tol, err


# matmul


def test_matmul_identity_case():
    out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_by_column():
    assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_grad_matches_finite_differences():
    a, b = rand((4, 5), 1), rand((5, 3), 2)
    check_grad(lambda: tensor_sum(matmul(a, b)), a, b, tol=1e-6)


def test_matmul_transpose_b_grad():
    a, b = rand((4, 5), 3), rand((3, 5), 4)
    w = Tensor(np.random.default_rng(5).normal(size=(4, 3)))
    check_grad(lambda: tensor_sum(mul(matmul(a, b, transpose_b=True), w)), a, b)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_counts_two_flops_per_mac():
    before = counters().flops
    matmul(Tensor(np.ones((4, 5))), Tensor(np.ones((5, 3))))
    assert counters().flops - before == 2 * 4 * 5 * 3


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1e3, 1e3)))
def test_matmul_with_identity_is_exact(a):
    out = matmul(Tensor(a), Tensor(np.eye(a.shape[1])))
    np.testing.assert_array_equal(out.data, a)


# softmax


def test_softmax_uniform():
    np.testing.assert_allclose(softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_softmax_large_logits_do_not_overflow():
    np.testing.assert_allclose(softmax_rows(Tensor([[1000.0, 0.0]])).data, [[1.0, 0.0]], atol=1e-12)


def test_softmax_grad():
    a = rand((3, 7), 6)
    w = Tensor(np.random.default_rng(7).normal(size=(3, 7)))
    check_grad(lambda: tensor_sum(mul(softmax_rows(a), w)), a, tol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(a):
    p = softmax_rows(Tensor(a)).data
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


# layer norm


def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 4)))


def test_layer_norm_two_point():
    out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-15)


def test_layer_norm_grad():
    x, g, b = rand((2, 8), 8), rand(8, 9), rand(8, 10)
    w = Tensor(np.random.default_rng(11).normal(size=(2, 8)))
    check_grad(lambda: tensor_sum(mul(layer_norm(x, g, b, 1e-12), w)), x, g, b, tol=1e-5)


def test_layer_norm_negative_eps_rejected():
    with pytest.raises(ContractError):
        layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=-1.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 12)), elements=st.floats(-100, 100)))
def test_layer_norm_output_is_standardised(x):
    x = x + np.arange(x.shape[1]) * 0.5  # keep every row non-constant
    out = layer_norm(Tensor(x), Tensor(np.ones(x.shape[1])), Tensor(np.zeros(x.shape[1]))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=1e-6)


# other ops


def test_gelu_known_values_and_grad():
    out = gelu(Tensor([0.0, 1.0, -1.0])).data
    c = np.sqrt(2 / np.pi)
    expect = [0.0, 0.5 * (1 + np.tanh(c * (1 + 0.044715))), -0.5 * (1 - np.tanh(c * (1 + 0.044715)))]
    np.testing.assert_allclose(out, expect, rtol=1e-15)
    x = rand((2, 5), 12)
    w = Tensor(np.random.default_rng(13).normal(size=(2, 5)))
    check_grad(lambda: tensor_sum(mul(gelu(x), w)), x)


def test_embedding_grad_accumulates_repeated_ids():
    table = rand((5, 3), 14)
    ids = np.array([1, 1, 4])
    tensor_sum(embedding(table, ids)).backward()
    expect = np.zeros((5, 3))
    expect[1] = 2
    expect[4] = 1
    np.testing.assert_array_equal(table.grad, expect)


def test_embedding_out_of_range():
    with pytest.raises(ShapeError):
        embedding(Tensor(np.ones((3, 2))), np.array([3]))


def test_cross_entropy_matches_formula_and_grad():
    logits = rand((4, 6), 15)
    labels = np.array([0, -1, 5, 2])
    z = logits.data
    lse = np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) + z.max(1)
    expect = np.mean([lse[i] - z[i, labels[i]] for i in (0, 2, 3)])
    assert cross_entropy(logits, labels).item() == pytest.approx(expect, rel=1e-14)
    check_grad(lambda: cross_entropy(logits, labels), logits)


def test_cross_entropy_all_ignored_is_zero_with_zero_grad():
    logits = rand((3, 4), 16)
    loss = cross_entropy(logits, np.array([-1, -1, -1]))
    loss.backward()
    assert loss.item() == 0.0
    np.testing.assert_array_equal(logits.grad, np.zeros((3, 4)))


def test_dropout_inverted_scaling_and_identity_at_zero():
    x = Tensor(np.ones((200, 50)))
    assert dropout(x, 0.0, np.random.default_rng(0)) is x
    out = dropout(x, 0.25, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 1 / 0.75}
    assert abs((out == 0).mean() - 0.25) < 0.01


def test_add_broadcasts_bias_only_over_last_axis():
    x, b = rand((3, 4), 17), rand(4, 18)
    check_grad(lambda: tensor_sum(mul(add(x, b), Tensor(np.arange(12.0).reshape(3, 4)))), x, b)
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((3, 4))), Tensor(np.ones(3)))


# backward / tape


def test_backward_sum_gives_ones():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    w.sum().backward()
    np.testing.assert_array_equal(w.grad, [1, 1, 1])


def test_backward_square_gives_two_w():
    w = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    (w * w).sum().backward()
    np.testing.assert_array_equal(w.grad, [2, -4, 6])


def test_backward_accumulates_without_reset():
    w = Tensor([1.0, 2.0], requires_grad=True)
    w.sum().backward()
    w.sum().backward()
    np.testing.assert_array_equal(w.grad, [2, 2])


def test_backward_on_non_scalar_is_contract_error():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(w * w)


def test_backward_off_tape_is_contract_error():
    with pytest.raises(ContractError):
        backward(Tensor([[1.0]]).sum())


def test_tape_order_is_topological_and_visits_once():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    h = matmul(w, w)
    loss = tensor_sum(add(h, h))
    tape = Tape.from_root(loss)
    seen = set()
    assert len(tape) == 3
    for node_out in tape.nodes:
        for inp in node_out._node.inputs:
            if inp._node is not None:
                assert id(inp) in seen
        assert id(node_out) not in seen
        seen.add(id(node_out))


def test_backward_is_bitwise_deterministic():
    def grads():
        a, b = rand((6, 5), 20), rand((5, 4), 21)
        tensor_sum(gelu(matmul(a, b))).backward()
        return a.grad.copy(), b.grad.copy()

    (a1, b1), (a2, b2) = grads(), grads()
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


def test_no_grad_records_nothing():
    a = rand((2, 2), 22)
    with no_grad():
        out = matmul(a, a)
    assert out.is_leaf and not out.requires_grad


def test_non_finite_results_raise():
    with pytest.raises(NonFiniteError):
        matmul(Tensor([[1e200]]), Tensor([[1e200]]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_tensor_rejects_empty_dims():
    with pytest.raises(ShapeError):
        Tensor(np.ones((0, 3)))


# property: every differentiable op on random inputs in [-2, 2]

OPS = {
    "matmul": (lambda a, b: matmul(a, b), [(3, 4), (4, 2)]),
    "softmax": (lambda a: softmax_rows(a), [(2, 5)]),
    "gelu": (lambda a: gelu(a), [(3, 3)]),
    "layer_norm": (lambda a, g, b: layer_norm(a, g, b), [(2, 6), (6,), (6,)]),
    "mul": (lambda a, b: mul(a, b), [(2, 3), (2, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_every_op_gradient_property(name, seed):
    fn, shapes = OPS[name]
    inputs = [rand(s, seed + i) for i, s in enumerate(shapes)]
    out_shape = fn(*inputs).shape
    w = Tensor(np.random.default_rng(seed).normal(size=out_shape))
    check_grad(lambda: tensor_sum(mul(fn(*inputs), w)), *inputs, tol=1e-4)
