"""Dense float64 tensors with tape-based reverse-mode differentiation.

Storage is a C-contiguous numpy array. Every differentiable operation
records a :class:`Node` on its output when gradients are enabled and at
least one input requires them; :func:`backward` linearises those nodes
into a :class:`Tape` and replays it in reverse.

Non-finite values are treated as an error state: operations run under
``np.errstate`` that raises on overflow, invalid and divide, and the
resulting ``FloatingPointError`` is re-raised as :class:`NonFiniteError`
naming the operation.
"""

from __future__ import annotations

import contextlib
import functools
import math
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

GELU_COEFF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


@dataclass
class OpCounters:
    """Forward-pass instrumentation: FLOPs (2 per multiply-add) and n*n softmaxes."""

    flops: int = 0
    softmax_nn: int = 0

    def snapshot(self) -> tuple[int, int]:
        return self.flops, self.softmax_nn


def counters() -> OpCounters:
    c = getattr(_local, "counters", None)
    if c is None:
        c = _local.counters = OpCounters()
    return c


class Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} initialised with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._node = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def sum(self):
        return tensor_sum(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(data, op, inputs, backward_fn) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and attach its backward rule.

    ``backward_fn(grad_out)`` returns one gradient (or ``None``) per input.
    """
    out = Tensor._wrap(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


def guarded(op_name):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                with np.errstate(over="raise", invalid="raise", divide="raise", under="ignore"):
                    return fn(*args, **kwargs)
            except FloatingPointError as exc:
                if isinstance(exc, NonFiniteError):
                    raise
                raise NonFiniteError(f"non-finite values produced by {op_name}: {exc}") from exc

        return wrapper

    return decorate


class Tape:
    """Topologically ordered list of the non-leaf tensors reachable from a root."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in reversed(t._node.inputs):
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def run_backward(self, root: Tensor, seed: np.ndarray):
        grads = {id(root): seed}
        for t in reversed(self.nodes):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            input_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    if inp.grad is None:
                        inp.grad = np.array(ig, dtype=np.float64, copy=True)
                    else:
                        inp.grad += ig
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + ig
                else:
                    grads[id(inp)] = ig


def backward(loss: Tensor):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Gradients accumulate across calls; reset them with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward() called on a tensor that is not on the tape")
    seed = np.ones_like(loss.data)
    with np.errstate(over="raise", invalid="raise", divide="raise", under="ignore"):
        if loss._node is None:
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        Tape.from_root(loss).run_backward(loss, seed)


# ---------------------------------------------------------------------------
# operations


@guarded("matmul")
def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """2-D matrix product ``a @ b`` (or ``a @ b.T`` with ``transpose_b``)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    bd = b.data.T if transpose_b else b.data
    if a.shape[1] != bd.shape[0]:
        shown = f"{b.shape}^T" if transpose_b else f"{b.shape}"
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {shown}")
    out = a.data @ bd
    if not np.isfinite(out).all():
        raise NonFiniteError("non-finite values produced by matmul")
    counters().flops += 2 * a.shape[0] * a.shape[1] * bd.shape[1]
    ad = a.data

    def _back(g):
        ga = g @ bd.T if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        gb = g.T @ ad if transpose_b else ad.T @ g
        return ga, gb

    return record_op(out, "matmul", (a, b), _back)


@guarded("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1-D bias broadcast over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        bias = False
    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        bias = True
    else:
        raise ShapeError(f"add shapes incompatible: {a.shape} and {b.shape}")
    out = a.data + b.data

    def _back(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g
        return g, gb

    return record_op(out, "add", (a, b), _back)


@guarded("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return record_op(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


@guarded("scale")
def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op(a.data * c, "scale", (a,), lambda g: (g * c,))


@guarded("sum")
def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return record_op(np.array(a.data.sum()), "sum", (a,), lambda g: (np.full(shape, float(g)),))


def softmax_inplace(x: np.ndarray) -> np.ndarray:
    x -= x.max(axis=-1, keepdims=True)
    np.exp(x, out=x)
    x /= x.sum(axis=-1, keepdims=True)
    return x


def softmax_backward(probs: np.ndarray, g: np.ndarray) -> np.ndarray:
    return probs * (g - (g * probs).sum(axis=-1, keepdims=True))


@guarded("softmax_rows")
def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    p = softmax_inplace(np.array(a.data, copy=True))
    return record_op(p, "softmax_rows", (a,), lambda g: (softmax_backward(p, g),))


@guarded("layer_norm")
def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    if eps < 0:
        raise ContractError(f"layer_norm eps must be non-negative, got {eps}")
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({h},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def _back(g):
        dxhat = g * gd
        dx = inv / h * (
            h * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, h)
        dgain = (flat_g * xhat.reshape(-1, h)).sum(axis=0)
        dbias = flat_g.sum(axis=0)
        return dx, dgain, dbias

    return record_op(out, "layer_norm", (x, gain, bias), _back)


@guarded("gelu")
def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    # in place: one scratch array holds x^3, the tanh argument, then tanh itself
    t = xd * xd
    t *= xd
    t *= GELU_COEFF
    t += xd
    t *= _SQRT_2_OVER_PI
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def _back(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return record_op(out, "gelu", (x,), _back)


@guarded("embedding")
def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise ShapeError(f"embedding ids out of range [0, {rows})")
    shape = table.shape

    def _back(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return record_op(table.data[ids], "embedding", (table,), _back)


@guarded("dropout")
def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; returns ``x`` itself when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = rng.random(x.shape) >= p
    keep = mask / (1.0 - p)
    return record_op(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


IGNORE_INDEX = -1


@guarded("cross_entropy")
def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy over rows whose label is not ``IGNORE_INDEX``.

    With no labelled rows the result is 0 with a zero gradient.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects [n x V] logits and [n] labels, got {logits.shape}, {labels.shape}")
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")
    rows = np.flatnonzero(labels != IGNORE_INDEX)
    if rows.size and (labels[rows].max() >= logits.shape[1] or labels[rows].min() < 0):
        raise ShapeError("cross_entropy label out of range")
    count = rows.size
    if count == 0:
        shape = logits.shape
        return record_op(np.array(0.0), "cross_entropy", (logits,), lambda g: (np.zeros(shape),))
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    targets = labels[rows]
    nll = logsum - z[np.arange(count), targets]
    denom = count if reduction == "mean" else 1
    value = nll.sum() / denom
    shape = logits.shape

    def _back(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(count), targets] -= 1.0
        full = np.zeros(shape)
        full[rows] = p * (float(g) / denom)
        return (full,)

    return record_op(np.array(value), "cross_entropy", (logits,), _back)
