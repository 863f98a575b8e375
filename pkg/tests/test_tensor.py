"""Tensor substrate: op semantics, masked softmax, and gradient checks."""

import numpy as np
import pytest

from moediff import tensor as T
from moediff.errors import DegenerateRowError, ShapeError

from oracles import finite_diff_grad, max_rel_err


def taped(arr):
    tape = T.GradTape()
    t = T.Tensor(np.asarray(arr, dtype=float), tape=tape)
    return tape, t


def test_matmul_identity():
    out = T.matmul([[1.0, 0.0], [0.0, 1.0]], [[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])


def test_matmul_hand_product():
    out = T.matmul([[1.0, 2.0]], [[3.0], [4.0]])
    assert np.array_equal(out.data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    assert "(2, 3)" in str(exc.value)


def test_matmul_gradient_matches_hand_result():
    # d sum(A @ B) / dA with B all-ones is a matrix of row sums of B^T.
    tape = T.GradTape()
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]], tape=tape)
    loss = T.tsum(T.matmul(a, np.ones((2, 2))))
    tape.backward(loss)
    assert np.array_equal(a.grad, [[2.0, 2.0], [2.0, 2.0]])


def test_softmax_uniform_on_equal_logits():
    out = T.softmax_lastdim([0.0, 0.0, 0.0])
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_single_unmasked_entry():
    out = T.softmax_lastdim([10.0, 0.0], mask=[True, False])
    assert out.data[0] == 1.0
    assert out.data[1] == 0.0


def test_softmax_direct_exp_normalize():
    # Frozen from exp(x)/sum(exp(x)) evaluated by hand on [1, 2, 3].
    out = T.softmax_lastdim([1.0, 2.0, 3.0])
    assert np.allclose(out.data, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_softmax_rows_sum_to_one_and_masked_exact_zero():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rows, cols = rng.integers(1, 6), rng.integers(2, 8)
        x = rng.normal(size=(rows, cols)) * rng.uniform(0.1, 30.0)
        mask = rng.random((rows, cols)) < 0.6
        mask[np.arange(rows), rng.integers(0, cols, size=rows)] = True
        y = T.softmax_lastdim(x, mask=mask).data
        assert np.all(y[~mask] == 0.0)
        assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_fully_masked_row_raises():
    with pytest.raises(DegenerateRowError):
        T.softmax_lastdim([[1.0, 2.0], [3.0, 4.0]], mask=[[True, True], [False, False]])


def test_relu_clamps_negative():
    assert T.relu([-1.0]).data[0] == 0.0


def test_layernorm_constant_vector_is_zero():
    out = T.layernorm_lastdim([5.0, 5.0, 5.0, 5.0])
    assert np.all(out.data == 0.0)


def test_sqdiff_hand_value():
    out = T.tsum(T.sqdiff([1.0, 2.0], [1.0, 4.0]))
    assert out.item() == 4.0


def test_backward_linear_sum():
    tape, x = taped([1.0, 2.0, 3.0])
    tape.backward(T.tsum(x))
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_analytic_square():
    tape, x = taped([1.0, 2.0])
    tape.backward(T.tsum(T.mul(x, x)))
    assert np.allclose(x.grad, [2.0, 4.0], atol=1e-12)


def test_backward_rejects_nonscalar_loss():
    tape, x = taped([1.0, 2.0])
    with pytest.raises(ShapeError):
        tape.backward(T.mul(x, x))


def test_backward_unused_leaf_gets_zero_grad():
    tape = T.GradTape()
    x = T.Tensor([1.0, 2.0], tape=tape)
    unused = T.Tensor([3.0], tape=tape)
    tape.backward(T.tsum(x))
    assert np.array_equal(unused.grad, [0.0])


def test_tape_single_use():
    tape, x = taped([1.0])
    tape.backward(T.tsum(x))
    with pytest.raises(ValueError):
        tape.backward(T.tsum(T.Tensor([1.0])))


def test_broadcast_add_bias_and_unbroadcast_grad():
    tape = T.GradTape()
    bias = T.Tensor([1.0, 2.0], tape=tape)
    h = np.zeros((3, 2))
    loss = T.tsum(T.add(h, bias))
    tape.backward(loss)
    assert np.array_equal(bias.grad, [3.0, 3.0])


def test_broadcast_rejects_non_suffix_shapes():
    with pytest.raises(ShapeError):
        T.add(np.zeros((3, 2)), np.zeros((3,)))


def test_gather_rows_matches_direct_indexing():
    table = np.arange(12.0).reshape(4, 3)
    ids = np.array([[0, 2], [3, 3]])
    out = T.gather_rows(table, ids)
    assert np.array_equal(out.data, table[ids])


def test_gather_rows_grad_is_scatter():
    tape = T.GradTape()
    table = T.Tensor(np.ones((4, 2)), tape=tape)
    loss = T.tsum(T.gather_rows(table, np.array([1, 1, 3])))
    tape.backward(loss)
    assert np.array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_select_rows_copies_bits_exactly():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(5, 3))
    b = rng.normal(size=(5, 3))
    mask = np.array([True, False, True, False, False])
    out = T.select_rows(mask, a, b).data
    assert np.array_equal(out[mask], a[mask])
    assert np.array_equal(out[~mask], b[~mask])


# ---------------------------------------------------------------------------
# finite-difference consistency on random composed graphs


def _random_graph_loss(rng, leaves):
    """Compose a random differentiable graph (depth <= 6) over the op pool
    and reduce it to a scalar."""
    x = leaves[0]
    other = leaves[1]
    depth = rng.integers(2, 7)
    for _ in range(depth):
        pick = rng.integers(0, 7)
        if pick == 0:
            x = T.add(x, other)
        elif pick == 1:
            x = T.mul(x, other)
        elif pick == 2:
            x = T.relu(x)
        elif pick == 3:
            x = T.layernorm_lastdim(x)
        elif pick == 4:
            x = T.softmax_lastdim(x)
        elif pick == 5:
            x = T.scale(x, 1.7)
        else:
            x = T.matmul(x, T.transpose(other))
            x = T.matmul(x, other)
    return T.tmean(T.sqdiff(x, np.ones(x.shape)))


def test_finite_difference_consistency_random_graphs():
    for seed in range(12):
        rng = np.random.default_rng(seed)
        rows, cols = int(rng.integers(2, 8)), int(rng.integers(2, 8))
        a = rng.normal(size=(rows, cols))
        b = rng.normal(size=(rows, cols))

        tape = T.GradTape()
        ta = T.Tensor(a, tape=tape)
        tb = T.Tensor(b, tape=tape)
        loss = _random_graph_loss(np.random.default_rng(seed + 1000), (ta, tb))
        tape.backward(loss)

        def value():
            g = np.random.default_rng(seed + 1000)
            return float(
                _random_graph_loss(g, (T.Tensor(a), T.Tensor(b))).data
            )

        for arr, grad in ((a, ta.grad), (b, tb.grad)):
            num = finite_diff_grad(value, arr)
            assert max_rel_err(grad, num, floor=1e-4) < 1e-6


def test_backward_deterministic():
    def run():
        rng = np.random.default_rng(7)
        tape = T.GradTape()
        x = T.Tensor(rng.normal(size=(4, 5)), tape=tape)
        y = T.softmax_lastdim(T.layernorm_lastdim(T.mul(x, x)))
        tape.backward(T.tmean(y))
        return x.grad.copy()

    assert np.array_equal(run(), run())


def test_ops_produce_finite_values_on_finite_inputs():
    rng = np.random.default_rng(11)
    for _ in range(40):
        x = rng.normal(size=(3, 6)) * rng.uniform(0.01, 100.0)
        for out in (
            T.softmax_lastdim(x),
            T.log_softmax_lastdim(x),
            T.layernorm_lastdim(x),
            T.relu(x),
        ):
            assert np.isfinite(out.data).all()
