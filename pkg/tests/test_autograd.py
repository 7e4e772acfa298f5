import numpy as np
import pytest

from engines.autograd import (
    AdamState,
    DiffTensor,
    Tape,
    adam_step,
    add,
    backward,
    concat,
    finite_difference_gradient,
    matmul,
    mul,
    parameter,
    reduce_mean,
    reduce_sum,
    relu,
    scalar_affine,
    sigmoid,
    squared_error,
    sub,
    take_slice,
)
from errors import ContractViolation, NumericFailure

PRIMITIVES = {
    "add":           lambda x, c: add(x, c["bias"]),
    "sub":           lambda x, c: sub(c["bias"], x),
    "mul":           lambda x, c: mul(x, x),
    "matmul":        lambda x, c: matmul(x, c["w"]),
    "matmul_t":      lambda x, c: matmul(c["a"], x, transpose_b=True),
    "relu":          lambda x, c: relu(x),
    "sigmoid":       lambda x, c: sigmoid(x),
    "concat":        lambda x, c: concat([c["a"], x], axis=0),
    "take_slice":    lambda x, c: take_slice(x, 1, 3, axis=1),
    "reduce_sum":    lambda x, c: reduce_sum(x, axis=0),
    "reduce_mean":   lambda x, c: reduce_mean(x, axis=1, keepdims=True),
    "squared_error": lambda x, c: squared_error(x, c["target"]),
    "scalar_affine": lambda x, c: scalar_affine(x, -1.7, 0.3),
}


def _grad_of(fn, value):
    x = parameter(value)
    with Tape() as tape:
        loss = fn(x)
    backward(loss, tape)
    return x.grad


class TestBackward:
    def test_sum_of_squares(self):
        x = np.array([1.0, -2.0, 3.0])
        grad = _grad_of(lambda t: reduce_sum(t * t), x)
        np.testing.assert_allclose(grad, 2 * x)

    def test_shared_node_accumulates(self):
        # y = x·x + x uses x three times
        grad = _grad_of(lambda t: reduce_sum(t * t + t), np.array([2.0]))
        np.testing.assert_allclose(grad, [5.0])

    def test_matmul_transpose_matches_plain(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
        w1, w2 = parameter(b), parameter(b.T.copy())
        with Tape() as tape:
            l1 = reduce_sum(matmul(a, w1, transpose_b=True))
            l2 = reduce_sum(matmul(a, w2))
        backward(l1, tape)
        backward(l2, tape)
        np.testing.assert_allclose(l1.data, l2.data)
        np.testing.assert_allclose(w1.grad, w2.grad.T)

    def test_broadcast_bias_gradient(self):
        b = parameter(np.zeros((1, 3)))
        x = np.ones((4, 3))
        with Tape() as tape:
            loss = reduce_sum(DiffTensor(x) + b)
        backward(loss, tape)
        np.testing.assert_allclose(b.grad, np.full((1, 3), 4.0))

    def test_non_scalar_loss_rejected(self):
        x = parameter(np.ones(3))
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ContractViolation):
            backward(y, tape)

    def test_leaf_loss_gets_unit_gradient(self):
        x = parameter(np.array(3.0))
        backward(x)
        assert x.grad == pytest.approx(1.0)

    def test_no_recording_outside_tape(self):
        x = parameter(np.ones(2))
        y = reduce_sum(x * x)
        assert y.is_leaf and not y.requires_grad

    def test_non_finite_forward_raises(self):
        with pytest.raises(NumericFailure):
            scalar_affine(np.array([np.inf]), 1.0)


class TestAgainstFiniteDifferences:
    @pytest.mark.parametrize("seed", range(5))
    def test_small_mlp(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, 3))
        target = rng.standard_normal((4, 2))
        w0 = rng.standard_normal((5, 2))

        def loss_of(w):
            h = concat([x, sigmoid(x)], axis=1)
            h = take_slice(h, 1, 6, axis=1)
            out = relu(matmul(h, w)) + scalar_affine(matmul(h, w), 0.1)
            return reduce_mean(squared_error(out, target))

        analytic = _grad_of(loss_of, w0)
        numeric = finite_difference_gradient(lambda w: loss_of(DiffTensor(w)).item(), w0, h=1e-6)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7)

    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    def test_each_primitive(self, name, seed):
        rng = np.random.default_rng(seed)
        x0 = rng.standard_normal((3, 4))
        x0 = np.where(np.abs(x0) < 1e-2, 0.5, x0)
        consts = {
            "bias": rng.standard_normal((1, 4)),
            "w": rng.standard_normal((4, 2)),
            "a": rng.standard_normal((2, 4)),
            "target": rng.standard_normal((3, 4)),
        }
        op = PRIMITIVES[name]
        weights = np.random.default_rng(seed + 1000).standard_normal(op(DiffTensor(x0), consts).shape)

        def loss_of(x):
            return reduce_sum(mul(op(x, consts), weights))

        analytic = _grad_of(loss_of, x0)
        numeric = finite_difference_gradient(lambda v: loss_of(DiffTensor(v)).item(), x0, h=1e-6)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7)

    def test_nondeterministic_objective_rejected(self):
        calls = iter(range(100))
        with pytest.raises(ContractViolation):
            finite_difference_gradient(lambda th: float(next(calls)), np.zeros(2))

    def test_bad_step(self):
        with pytest.raises(ContractViolation):
            finite_difference_gradient(lambda th: 0.0, np.zeros(1), h=0.0)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = parameter(np.array([1.0, -1.0]))
        adam_step({"p": p}, {"p": np.array([0.5, -2.0])}, AdamState(lr=0.1))
        np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)

    def test_zero_gradient_is_noop(self):
        p = parameter(np.array([0.3]))
        adam_step({"p": p}, None, AdamState(lr=0.1))
        np.testing.assert_allclose(p.data, [0.3])

    def test_replaces_rather_than_mutates(self):
        p = parameter(np.array([1.0]))
        before = p.data
        adam_step({"p": p}, {"p": np.array([1.0])}, AdamState(lr=0.1))
        assert before[0] == 1.0 and p.data is not before

    def test_rejects_nan_gradient(self):
        p = parameter(np.array([1.0]))
        with pytest.raises(NumericFailure):
            adam_step({"p": p}, {"p": np.array([np.nan])}, AdamState())

    def test_rejects_non_positive_lr(self):
        with pytest.raises(ContractViolation):
            adam_step({}, None, AdamState(lr=0.0))

    def test_minimises_quadratic(self):
        p = parameter(np.array([5.0, -3.0]))
        state = AdamState(lr=0.1)
        for _ in range(1000):
            p.grad = None
            with Tape() as tape:
                loss = reduce_sum(p * p)
            backward(loss, tape)
            adam_step({"p": p}, None, state)
        np.testing.assert_allclose(p.data, 0.0, atol=0.1)
