import numpy as np
import pytest

from hmvgg.autograd import (Tape, backward, concat, grad_check, numeric_grad, reduce_max,
                            reduce_sum, relative_error)
from hmvgg.errors import AutogradError


def test_sum_gradient_is_ones(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=(2, 3, 4)))
    g = backward(tape, x.sum())
    np.testing.assert_array_equal(g[x.id], np.ones((2, 3, 4)))


def test_sigmoid_gradient_at_zero():
    tape = Tape()
    x = tape.leaf(np.zeros((3, 2)))
    g = backward(tape, x.sigmoid().sum())
    np.testing.assert_array_equal(g[x.id], 0.25)


def test_product_rule(rng):
    tape = Tape()
    a, b = tape.leaf(rng.normal(size=5)), tape.leaf(rng.normal(size=5))
    g = backward(tape, (a * b).sum())
    np.testing.assert_array_equal(g[a.id], b.value)
    np.testing.assert_array_equal(g[b.id], a.value)


def test_accumulation_over_two_paths(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=(3, 3)))
    g = backward(tape, (x + x).sum())
    np.testing.assert_array_equal(g[x.id], 2.0)


def test_unreachable_gets_exact_zero(rng):
    tape = Tape()
    x, y = tape.leaf(rng.normal(size=4)), tape.leaf(rng.normal(size=(2, 2)))
    _ = y.sigmoid()  # recorded but off the loss path
    g = backward(tape, x.sum())
    assert np.array_equal(g[y.id], np.zeros((2, 2)))


def test_constants_have_no_gradient(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=3))
    c = tape.leaf(np.ones(3), requires_grad=False)
    g = backward(tape, (x * c).sum())
    assert c.id not in g


def test_non_scalar_loss_rejected(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=3))
    with pytest.raises(AutogradError):
        backward(tape, x * 2.0)


def test_backward_twice_rejected(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=3))
    loss = x.sum()
    backward(tape, loss)
    with pytest.raises(AutogradError):
        backward(tape, loss)
    with pytest.raises(AutogradError):
        tape.leaf(np.ones(1))


def test_mixing_tapes_rejected():
    a, b = Tape().leaf(np.ones(2)), Tape().leaf(np.ones(2))
    with pytest.raises(AutogradError):
        a + b


def test_broadcast_gradient_sums_over_stretched_axes(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=(2, 3, 4)))
    m = tape.leaf(rng.normal(size=(1, 3, 1)))
    g = backward(tape, (x * m).sum())
    np.testing.assert_allclose(g[m.id], x.value.sum(axis=(0, 2), keepdims=True))


def test_grad_check_examples(rng):
    x = rng.normal(size=(3, 4))
    assert grad_check(lambda v: (v * v).sum(), x, 1e-3) < 1e-8
    assert grad_check(lambda v: v.sigmoid().sum(), x, 1e-3) < 1e-6
    assert grad_check(lambda v: v.sum(), x, 1e-3) < 1e-9


def test_grad_check_detects_wrong_gradient(rng):
    x = rng.normal(size=5) + 3.0
    tape = Tape()
    v = tape.leaf(x)
    good = backward(tape, (v * v).sum())[v.id]
    num = numeric_grad(lambda u: (u * u).sum(), x, 1e-3)
    assert relative_error(good, num) < 1e-8
    assert relative_error(good * 1.01, num) > 5e-3


def test_relu_subgradient_zero_at_kink():
    tape = Tape()
    x = tape.leaf(np.array([-1.0, 0.0, 2.0]))
    g = backward(tape, x.relu().sum())
    np.testing.assert_array_equal(g[x.id], [0.0, 0.0, 1.0])


def test_reduce_max_ties_go_to_first():
    tape = Tape()
    x = tape.leaf(np.array([[3.0, 1.0, 3.0], [2.0, 2.0, 0.0]]))
    g = backward(tape, reduce_sum(reduce_max(x, axes=[1])))
    np.testing.assert_array_equal(g[x.id], [[1, 0, 0], [1, 0, 0]])


def test_concat_splits_gradient(rng):
    tape = Tape()
    a, b = tape.leaf(rng.normal(size=(1, 2, 3))), tape.leaf(rng.normal(size=(1, 1, 3)))
    w = rng.normal(size=(1, 3, 3))
    g = backward(tape, (concat([a, b], axis=1) * w).sum())
    np.testing.assert_array_equal(g[a.id], w[:, :2])
    np.testing.assert_array_equal(g[b.id], w[:, 2:])


def test_backward_visits_in_reverse_append_order(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=3))
    y = x.sigmoid()
    z = (y * x).sum()
    assert [n.kind for n in tape.nodes] == ["leaf", "sigmoid", "mul", "sum"]
    assert all(i < z.id for n in tape.nodes for i in n.inputs)
    assert grad_check(lambda v: (v.sigmoid() * v).sum(), x.value) < 1e-6
