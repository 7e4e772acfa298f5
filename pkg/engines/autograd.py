"""
engines/autograd.py — QLIP Lab
Minimal reverse-mode autodiff over dense float64 numpy arrays.

Ops record themselves on the active Tape (``with Tape() as tape:``) when at
least one input requires a gradient. Outside a tape every op is a plain
forward evaluation, which is what samplers and frozen-model inference use.

Primitive set: matmul, add, sub, mul, relu, sigmoid, concat, take_slice,
reduce_sum, reduce_mean, squared_error, scalar_affine, plus custom nodes
(the quantize nodes in quant_engine) registered through record_op().
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit

from errors import ContractViolation, NumericFailure

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


# ── Tensor ─────────────────────────────────────────────────────────────────────

class DiffTensor:
    """Dense float64 array with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[TapeNode] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def node_id(self) -> Optional[int]:
        return None if self._node is None else self._node.index

    def item(self) -> float:
        if self.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def parameter(data, name: Optional[str] = None) -> DiffTensor:
    return DiffTensor(data, requires_grad=True, name=name)


def as_tensor(value) -> DiffTensor:
    return value if isinstance(value, DiffTensor) else DiffTensor(value)


# ── Tape ───────────────────────────────────────────────────────────────────────

@dataclass
class TapeNode:
    index: int
    op: str
    out: DiffTensor
    parents: tuple
    backward_fn: BackwardFn


_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of primitive ops; parents always precede children."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False

    def record(self, op: str, out: DiffTensor, parents: tuple, backward_fn: BackwardFn) -> TapeNode:
        node = TapeNode(len(self.nodes), op, out, parents, backward_fn)
        self.nodes.append(node)
        out._node = node
        out._tape = self
        return node

    def backward(self, loss: DiffTensor) -> None:
        backward(loss, self)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def backward(loss: DiffTensor, tape: Optional[Tape] = None) -> None:
    """
    Reverse sweep from a scalar loss. Gradients accumulate into the .grad of
    every leaf that requires one; intermediate gradients live only here.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward() needs a scalar loss, got shape {loss.shape}")

    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    tape = tape if tape is not None else loss._tape
    if loss._tape is not tape:
        raise ContractViolation("loss was not produced on the given tape")

    pending: dict[int, np.ndarray] = {loss._node.index: seed}
    for node in reversed(tape.nodes[: loss._node.index + 1]):
        grad_out = pending.pop(node.index, None)
        if grad_out is None:
            continue
        parent_grads = node.backward_fn(grad_out)
        for parent, grad in zip(node.parents, parent_grads):
            if grad is None or not parent.requires_grad:
                continue
            grad = _unbroadcast(np.asarray(grad, dtype=np.float64), parent.shape)
            if not np.all(np.isfinite(grad)):
                raise NumericFailure(f"non-finite gradient flowing out of '{node.op}'")
            if parent._node is not None and parent._tape is tape:
                if parent._node.index >= node.index:
                    raise RuntimeError(
                        f"tape order broken: '{parent._node.op}' (#{parent._node.index}) "
                        f"feeds '{node.op}' (#{node.index})"
                    )
                prev = pending.get(parent._node.index)
                pending[parent._node.index] = grad if prev is None else prev + grad
            elif parent.is_leaf:
                parent.grad = grad.copy() if parent.grad is None else parent.grad + grad


def zero_grad(params) -> None:
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        p.grad = None


# ── Primitive ops ──────────────────────────────────────────────────────────────

def record_op(op: str, data, parents: Sequence[DiffTensor], backward_fn: BackwardFn) -> DiffTensor:
    """Wraps a forward result; records it when a tape is active and a parent needs grad."""
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericFailure(f"'{op}' produced non-finite values")
    out = DiffTensor(data)
    parents = tuple(parents)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(op, out, parents, backward_fn)
    return out


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a, b, transpose_b: bool = False) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractViolation(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    rhs = b.data.T if transpose_b else b.data
    if a.shape[1] != rhs.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {a.shape} @ {rhs.shape}")

    def _backward(g):
        grad_a = g @ rhs.T
        grad_rhs = a.data.T @ g
        return grad_a, (grad_rhs.T if transpose_b else grad_rhs)

    return record_op("matmul", a.data @ rhs, (a, b), _backward)


def relu(a) -> DiffTensor:
    a = as_tensor(a)
    mask = a.data > 0
    return record_op("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> DiffTensor:
    a = as_tensor(a)
    s = expit(a.data)
    return record_op("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def concat(tensors: Sequence, axis: int = -1) -> DiffTensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return np.split(g, bounds, axis=axis)

    return record_op("concat", data, tuple(tensors), _backward)


def take_slice(a, start: int, stop: int, axis: int = -1) -> DiffTensor:
    a = as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def _backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return record_op("slice", a.data[index], (a,), _backward)


def reduce_sum(a, axis: Optional[int] = None, keepdims: bool = False) -> DiffTensor:
    a = as_tensor(a)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), _backward)


def reduce_mean(a, axis: Optional[int] = None, keepdims: bool = False) -> DiffTensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return record_op("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), _backward)


def squared_error(a, b) -> DiffTensor:
    """Elementwise (a - b)^2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractViolation(f"squared_error shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    return record_op("squared_error", diff * diff, (a, b), lambda g: (2.0 * diff * g, -2.0 * diff * g))


def scalar_affine(a, scale: float, shift: float = 0.0) -> DiffTensor:
    a = as_tensor(a)
    return record_op("scalar_affine", scale * a.data + shift, (a,), lambda g: (scale * g,))


# ── Adam ───────────────────────────────────────────────────────────────────────

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: Mapping[str, DiffTensor],
    grads: Optional[Mapping[str, np.ndarray]],
    state: AdamState,
) -> AdamState:
    """
    One bias-corrected Adam update. `grads` defaults to each parameter's .grad;
    a missing gradient counts as zero. Parameters are replaced, never mutated
    in place, so snapshots taken by callers stay valid.
    """
    if state.lr <= 0:
        raise ContractViolation(f"Adam learning rate must be positive, got {state.lr}")

    resolved = {}
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ContractViolation(f"gradient for '{name}' has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericFailure(f"non-finite gradient for parameter '{name}'")
        resolved[name] = g

    state.step += 1
    t = state.step
    for name, p in params.items():
        g = resolved[name]
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


# ── Finite differences (test oracle) ───────────────────────────────────────────

def finite_difference_gradient(
    f: Callable[[np.ndarray], float],
    theta,
    h: float = 1e-5,
    check_repeat: bool = True,
) -> np.ndarray:
    """Central differences (f(θ+h·e_i) − f(θ−h·e_i)) / 2h for every coordinate."""
    if h <= 0:
        raise ContractViolation(f"finite-difference step must be positive, got {h}")
    theta = np.array(theta, dtype=np.float64)

    if check_repeat:
        first, second = float(f(theta.copy())), float(f(theta.copy()))
        if first != second:
            raise ContractViolation(
                f"objective is not deterministic ({first!r} != {second!r}); check seed handling"
            )

    grad = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        plus, minus = theta.copy(), theta.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (float(f(plus)) - float(f(minus))) / (2.0 * h)
    return grad
