"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what a per-pixel MLP segmentation
model and its losses need. Arrays are numpy under the hood; every gradient
rule is written out by hand and recorded on the graph as a closure.

Broadcasting is restricted to scalar-with-tensor. Anything else (including
row-vector bias addition) goes through an explicit op so that shape mistakes
fail loudly instead of silently broadcasting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_CLAMP = 1e-12  # probabilities are clamped to >= this before log


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar backward, reuse, ...)."""


_grad_enabled = True


class no_grad:
    """Context manager that suppresses graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus optional gradient bookkeeping.

    Tensors are value-immutable once created except for two sanctioned
    mutations: gradient population during backward, and in-place parameter
    updates applied by an optimizer between tape builds.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward_fn = None
        self._op = "leaf"
        self._backward_done = False

    # -- contract surface -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat view of the payload, length == product(shape)."""
        return self.data.reshape(-1)

    @property
    def grad_values(self):
        """Flat view of the gradient, or None if not populated."""
        if self.grad is None:
            return None
        return self.grad.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A graph-free constant sharing no gradient history."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), requires_grad=requires_grad)


def scalar(x: float) -> Tensor:
    return Tensor(np.float64(x))


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return Tensor(np.float64(x))
    raise TypeError(f"cannot treat {type(x).__name__} as a Tensor operand")


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
        out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    # scalar-with-tensor is the only permitted broadcast
    if a.data.shape == b.data.shape:
        return
    if a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not match "
                     "(only scalar-tensor broadcasting is supported)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Collapse a gradient back to a scalar operand's shape."""
    if g.shape == shape:
        return g
    # only reachable for the scalar operand of a scalar-tensor op
    return np.asarray(math.fsum(g.reshape(-1).tolist()), dtype=np.float64).reshape(shape)


# -- elementwise arithmetic -----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "add")
    out_data = a.data + b.data

    def backward_fn(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(g, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "sub")
    out_data = a.data - b.data

    def backward_fn(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(-g, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "mul")
    out_data = a.data * b.data

    def backward_fn(g):
        _accum(a, _reduce_to(g * b.data, a.data.shape))
        _accum(b, _reduce_to(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "mul")


def neg(a) -> Tensor:
    a = _coerce(a)
    out_data = -a.data

    def backward_fn(g):
        _accum(a, -g)

    return _make(out_data, (a,), backward_fn, "neg")


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), backward_fn, "matmul")


def bias_add(m: Tensor, v: Tensor) -> Tensor:
    """Add a length-K row vector to every row of an [N x K] matrix.

    Explicit op rather than implicit broadcasting; the matching backward
    rule sums the incoming gradient over rows.
    """
    m, v = _coerce(m), _coerce(v)
    if m.data.ndim != 2 or v.data.ndim != 1:
        raise ShapeError(f"bias_add expects matrix and vector, got {m.data.shape} and {v.data.shape}")
    if m.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"bias_add: width {m.data.shape[1]} != bias length {v.data.shape[0]}")
    out_data = m.data + v.data[None, :]

    def backward_fn(g):
        _accum(m, g)
        _accum(v, g.sum(axis=0))

    return _make(out_data, (m, v), backward_fn, "bias_add")


# -- nonlinearities ---------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    a = _coerce(a)
    out_data = np.maximum(a.data, 0.0)

    def backward_fn(g):
        # subgradient at 0 is 0
        _accum(a, g * (a.data > 0.0))

    return _make(out_data, (a,), backward_fn, "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = _coerce(a)
    out_data = np.where(a.data > 0.0, a.data, slope * a.data)

    def backward_fn(g):
        _accum(a, g * np.where(a.data > 0.0, 1.0, slope))

    return _make(out_data, (a,), backward_fn, "leaky_relu")


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    a = _coerce(a)
    if a.data.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        # dx = y * (g - sum(g * y, last axis))
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        _accum(a, out_data * (g - inner))

    return _make(out_data, (a,), backward_fn, "softmax")


def log_clamped(a: Tensor) -> Tensor:
    """log(max(x, LOG_CLAMP)); the clamped region has zero gradient."""
    a = _coerce(a)
    clamped = np.maximum(a.data, LOG_CLAMP)
    out_data = np.log(clamped)

    def backward_fn(g):
        _accum(a, g * np.where(a.data > LOG_CLAMP, 1.0 / clamped, 0.0))

    return _make(out_data, (a,), backward_fn, "log_clamped")


def sigmoid(a: Tensor) -> Tensor:
    a = _coerce(a)
    out_data = np.where(a.data >= 0,
                        1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def backward_fn(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward_fn, "sigmoid")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on raw logits against 0/1 targets.

    Numerically stable form max(z,0) - z*y + log(1+exp(-|z|)); targets are
    constants, not graph participants.
    """
    logits = _coerce(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.data.shape:
        y = np.broadcast_to(y, logits.data.shape).copy()
    z = logits.data
    out_data = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward_fn(g):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
        _accum(logits, g * (s - y))

    return _make(out_data, (logits,), backward_fn, "bce_with_logits")


# -- reductions and selection ----------------------------------------------

def reduce_sum(a: Tensor) -> Tensor:
    """Sum of all elements, exactly rounded (order-independent)."""
    a = _coerce(a)
    out_data = np.float64(math.fsum(a.data.reshape(-1).tolist()))

    def backward_fn(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), backward_fn, "reduce_sum")


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of a vector; gradient at the zero vector is zero."""
    a = _coerce(a)
    if a.data.ndim != 1:
        raise ShapeError(f"l2_norm expects a vector, got shape {a.data.shape}")
    norm = math.sqrt(math.fsum((a.data * a.data).tolist()))
    out_data = np.float64(norm)

    def backward_fn(g):
        if norm > 0.0:
            _accum(a, (g / norm) * a.data)
        else:
            _accum(a, np.zeros_like(a.data))

    return _make(out_data, (a,), backward_fn, "l2_norm")


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a matrix; backward scatter-adds into the source."""
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got shape {a.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows indices must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"gather_rows index out of range for {a.data.shape[0]} rows")
    out_data = a.data[idx]

    def backward_fn(g):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accum(a, buf)

    return _make(out_data, (a,), backward_fn, "gather_rows")


def take_per_row(a: Tensor, col_indices) -> Tensor:
    """out[i] = a[i, col_indices[i]] for an [N x C] matrix."""
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ShapeError(f"take_per_row expects a matrix, got shape {a.data.shape}")
    cols = np.asarray(col_indices, dtype=np.int64)
    n = a.data.shape[0]
    if cols.shape != (n,):
        raise ShapeError(f"take_per_row needs one column index per row, got {cols.shape} for {n} rows")
    if cols.size and (cols.min() < 0 or cols.max() >= a.data.shape[1]):
        raise IndexError(f"take_per_row column index out of range for width {a.data.shape[1]}")
    rows = np.arange(n)
    out_data = a.data[rows, cols]

    def backward_fn(g):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        buf[rows, cols] = g
        _accum(a, buf)

    return _make(out_data, (a,), backward_fn, "take_per_row")


# -- the tape ----------------------------------------------------------------

@dataclass(frozen=True)
class TapeNode:
    op: str
    inputs: tuple
    output: Tensor


class Tape:
    """Topologically ordered record of the ops behind one output tensor."""

    def __init__(self, nodes):
        self.nodes = list(nodes)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order = []
        visited = set()

        def visit(t: Tensor):
            if id(t) in visited:
                return
            visited.add(id(t))
            for p in t._parents:
                visit(p)
            if t._backward_fn is not None:
                order.append(TapeNode(t._op, t._parents, t))

        visit(out)
        return cls(order)


def backward(loss: Tensor):
    """Populate .grad on every requires_grad ancestor of a scalar loss.

    Each recorded node is applied exactly once, in reverse topological
    order. Running backward twice on the same output is an error; rebuild
    the graph (run the forward pass again) to differentiate again.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss is not on the tape (no gradient-tracked ancestors)")
    if loss._backward_done:
        raise TapeError("backward was already run on this tape; rebuild the graph first")
    loss._backward_done = True

    tape = Tape.from_output(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        node.output._backward_fn(node.output.grad if node.output.grad is not None
                                 else np.zeros_like(node.output.data))
