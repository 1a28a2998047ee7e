"""Reverse-mode autodiff over small float64 numpy arrays.

Every operation returns a :class:`Value` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  Node ids
come from a global counter, so sorting reachable nodes by id gives a valid
topological order without a DFS.

Broadcasting follows numpy rules; gradients are summed back to each
operand's shape.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_node_ids = itertools.count()


class GradError(Exception):
    """Base class for errors raised by the autodiff kernels."""


class DimensionError(GradError):
    pass


class DomainError(GradError):
    pass


class DegenerateVectorError(GradError):
    pass


class ProbeError(GradError):
    """A finite-difference probe produced a non-finite loss."""

    def __init__(self, param_index: int, coord: tuple[int, ...], value: float):
        self.param_index = param_index
        self.coord = coord
        self.value = value
        super().__init__(f"non-finite loss {value!r} when probing param {param_index} at {coord}")


class Value:
    """A float64 array node in a computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple["Value", ...] = (), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.op = op
        self.parents = parents
        self._backward = backward
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward_pass(self)

    def __repr__(self) -> str:
        return f"Value(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data, parents: Sequence[Value], op: str, backward) -> Value:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Value(data, op=op)
    return Value(data, True, op=op, parents=tuple(parents), backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), "div", backward)


def power(x, exponent: float) -> Value:
    x = as_value(x)

    def backward(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return _make(x.data ** exponent, (x,), "pow", backward)


def square(x) -> Value:
    x = as_value(x)

    def backward(g):
        return (2.0 * g * x.data,)

    return _make(x.data * x.data, (x,), "square", backward)


def sqrt(x) -> Value:
    x = as_value(x)
    out = np.sqrt(x.data)

    def backward(g):
        return (0.5 * g / out,)

    return _make(out, (x,), "sqrt", backward)


def exp(x) -> Value:
    x = as_value(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), "exp", backward)


def log(x) -> Value:
    x = as_value(x)

    def backward(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), "log", backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Value:
    x = as_value(x)
    out = _sigmoid_np(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), "sigmoid", backward)


def tanh(x) -> Value:
    x = as_value(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), "tanh", backward)


def relu(x) -> Value:
    x = as_value(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), "relu", backward)


def minimum(x, bound: float) -> Value:
    """Elementwise ``min(x, bound)``; gradient flows only where ``x < bound``."""
    x = as_value(x)
    mask = x.data < bound

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, bound), (x,), "minimum", backward)


def stop_gradient(x) -> Value:
    """Forward identity that is a constant leaf to the backward pass."""
    x = as_value(x)
    return Value(x.data.copy(), op="stop_gradient")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x, axis=None, keepdims: bool = False) -> Value:
    x = as_value(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), "sum", backward)


def mean(x, axis=None, keepdims: bool = False) -> Value:
    x = as_value(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Value:
    x = as_value(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), "reshape", backward)


def transpose(x) -> Value:
    x = as_value(x)

    def backward(g):
        return (g.T,)

    return _make(x.data.T, (x,), "transpose", backward)


def index(x, idx) -> Value:
    """Basic/advanced indexing; repeated indices accumulate on backward."""
    x = as_value(x)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), "index", backward)


def gather_rows(table, rows) -> Value:
    """``table[rows]`` for an integer array of any shape, scatter-add backward."""
    table = as_value(table)
    rows = np.asarray(rows, dtype=np.intp)

    def backward(g):
        flat = rows.reshape(-1)
        gflat = g.reshape(flat.size, -1)
        out = np.zeros((table.shape[0], gflat.shape[1]))
        # bincount per column is much faster than np.add.at for wide scatters
        for j in range(gflat.shape[1]):
            out[:, j] = np.bincount(flat, weights=gflat[:, j], minlength=table.shape[0])
        return (out.reshape(table.shape),)

    return _make(table.data[rows], (table,), "gather", backward)


def concat(values: Sequence, axis: int = -1) -> Value:
    values = [as_value(v) for v in values]
    data = np.concatenate([v.data for v in values], axis=axis)
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, values, "concat", backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    if a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), "matmul", backward)


def dense_affine(x, W, b) -> Value:
    """``W @ x + b``; ``x`` may be a single vector or a batch of row vectors."""
    x, W, b = as_value(x), as_value(W), as_value(b)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine weight {W.shape} does not accept input {x.shape}")
    if b.shape != (W.shape[0],):
        raise DimensionError(f"bias {b.shape} does not match weight {W.shape}")
    out = x.data @ W.data.T + b.data

    def backward(g):
        gx = g @ W.data
        if x.data.ndim == 1:
            gW = np.outer(g, x.data)
            gb = g
        else:
            g2 = g.reshape(-1, g.shape[-1])
            gW = g2.T @ x.data.reshape(-1, x.shape[-1])
            gb = g2.sum(axis=0)
        return gx, gW, gb

    return _make(out, (x, W, b), "affine", backward)


def einsum2(spec: str, a, b) -> Value:
    """Two-operand einsum whose indices each appear in at least two places."""
    a, b = as_value(a), as_value(b)
    ins, out_sub = spec.replace(" ", "").split("->")
    a_sub, b_sub = ins.split(",")
    for s, other in ((a_sub, b_sub + out_sub), (b_sub, a_sub + out_sub)):
        if any(c not in other for c in s):
            raise DomainError(f"einsum2 cannot differentiate {spec!r}")

    def backward(g):
        return (np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.data),
                np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.data))

    return _make(np.einsum(spec, a.data, b.data), (a, b), "einsum", backward)


# ---------------------------------------------------------------------------
# normalised forms


def _masked_shift(x: np.ndarray, mask) -> tuple[np.ndarray, np.ndarray]:
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    filled = np.where(mask, x, -np.inf)
    m = filled.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.where(mask, x - m, -np.inf), m


def softmax(x, mask=None) -> Value:
    """Softmax over the last axis; masked-out slots get weight 0.

    A row whose slots are all masked returns all zeros.
    """
    x = as_value(x)
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise DomainError("softmax of an empty vector")
    shifted, _ = _masked_shift(x.data, mask)
    e = np.exp(shifted)
    z = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, z, out=np.zeros_like(e), where=z > 0)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), "softmax", backward)


def softmax_vector(logits) -> Value:
    logits = as_value(logits)
    if logits.data.ndim != 1:
        raise DimensionError(f"softmax_vector expects a vector, got {logits.shape}")
    return softmax(logits)


def logsumexp(x, mask=None, canonical: bool = False) -> Value:
    """log-sum-exp over the last axis (masked slots excluded).

    With ``canonical=True`` terms are summed in sorted order, which makes the
    result bitwise independent of the slot order.
    """
    x = as_value(x)
    shifted, m = _masked_shift(x.data, mask)
    e = np.exp(shifted)
    z = (np.sort(e, axis=-1) if canonical else e).sum(axis=-1, keepdims=True)
    if np.any(z <= 0):
        raise DomainError("logsumexp over a fully masked row")
    out = (np.log(z) + m)[..., 0]
    w = e / z

    def backward(g):
        return (w * g[..., None],)

    return _make(out, (x,), "logsumexp", backward)


def l2_norm(x, axis: int = -1, eps: float = 0.0) -> Value:
    """``sqrt(sum(x**2) + eps**2)`` along ``axis``."""
    return sqrt(add(sum_(square(x), axis=axis), eps * eps))


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Value:
    x = as_value(x)
    n = l2_norm(x, axis=axis, eps=eps)
    return div(x, reshape(n, n.shape + (1,)) if axis in (-1, x.data.ndim - 1) else n)


def dot(a, b, axis: int = -1) -> Value:
    return sum_(mul(a, b), axis=axis)


def cosine_similarity(a, b) -> Value:
    """``a.b / (|a| |b|)`` along the last axis."""
    a, b = as_value(a), as_value(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine of mismatched shapes {a.shape} and {b.shape}")
    na = np.linalg.norm(a.data, axis=-1)
    nb = np.linalg.norm(b.data, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return div(dot(a, b), mul(l2_norm(a), l2_norm(b)))


def bce_with_logits(logits, labels) -> Value:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against labels."""
    logits = as_value(logits)
    y = np.asarray(labels, dtype=np.float64)
    x = logits.data
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        return (g * (_sigmoid_np(x) - y),)

    return _make(out, (logits,), "bce", backward)


def binary_cross_entropy(prob, labels) -> Value:
    """BCE on probabilities (used for checking; training uses the logit form)."""
    y = np.asarray(labels, dtype=np.float64)
    prob = as_value(prob)
    return mul(add(mul(log(prob), y), mul(log(sub(1.0, prob)), 1.0 - y)), -1.0)


# ---------------------------------------------------------------------------
# backward pass


def backward_pass(loss: Value) -> None:
    """Propagate d(loss)/d(node) into ``.grad`` of every requires-grad node.

    Gradients accumulate: calling this twice without zeroing doubles every
    ``.grad``, including the loss node's own.
    """
    if loss.data.size != 1:
        raise DomainError(f"backward_pass needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Value] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.node_id in nodes:
            continue
        nodes[node.node_id] = node
        stack.extend(p for p in node.parents if p.requires_grad)

    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        g = pending.pop(nid, None)
        if g is None:
            continue
        node = nodes[nid]
        node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            prev = pending.get(parent.node_id)
            pending[parent.node_id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# verification and optimisation


def finite_difference_check(f: Callable[[], Value], params: Sequence[Value],
                            eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the graph from the current contents of ``params`` on each
    call.  The relative error denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    for p in params:
        p.zero_grad()
    loss = f()
    backward_pass(loss)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(f().data)
            flat[j] = orig - eps
            fm = float(f().data)
            flat[j] = orig
            coord = np.unravel_index(j, p.shape)
            for val in (fp, fm):
                if not math.isfinite(val):
                    raise ProbeError(k, tuple(int(c) for c in coord), val)
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[k].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Value]) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Value], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps_adam: float = 1e-8) -> dict | None:
    """Bias-corrected Adam update applied in place.

    If any gradient is non-finite the whole step is skipped and a warning
    record is returned (and logged); otherwise returns None.
    """
    if lr <= 0:
        raise DomainError("learning rate must be positive")
    bad = [i for i, g in enumerate(grads) if not np.all(np.isfinite(g))]
    if bad:
        state.skipped += 1
        record = {"event": "adam_step_skipped", "step": state.step, "nonfinite_params": bad}
        logger.warning("non-finite gradient, optimizer step skipped", extra={"record": record})
        return record
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps_adam)
    return None


class Adam:
    """Thin wrapper keeping parameter order and state together."""

    def __init__(self, params: Iterable[Value], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros_like(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> dict | None:
        return adam_step(self.params, [p.grad for p in self.params], self.state,
                         self.lr, self.beta1, self.beta2, self.eps)
