"""Reverse-mode automatic differentiation over dense float64 arrays.

Deliberately minimal: exactly the primitives the risk network needs, no
general broadcasting engine (the only broadcasts are bias addition
[m x n] + [1 x n] and row scaling [m x 1] * [m x n]), and a tape replayed
in strict reverse creation order so gradients are bit-reproducible.
Tensors and tapes are single-threaded values; parallelism belongs one
level up.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

from .errors import ContractError, DimensionError, OutOfVocabularyError

BCE_EPS = 1e-7

_node_counter = itertools.count()


class _GradState(threading.local):
    def __init__(self):
        self.enabled = True


_grad_state = _GradState()


class no_grad:
    """Context manager that disables tape recording (forward-only mode)."""

    def __enter__(self):
        self._prev = _grad_state.enabled
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


class Tensor:
    """Dense float64 array plus the bookkeeping reverse mode needs.

    ``grad`` is None until backward accumulates into it; callers zero it
    explicitly between steps by calling :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name",
                 "_parents", "_backward_fn", "_node_id", "_consumed")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"tensors are at most 2-d, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward_fn = None
        self._node_id = next(_node_counter)
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def gradient(self):
        """Accumulated gradient, densified (None reads as zero)."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def _needs_grad(self):
        return self.requires_grad or bool(self._parents)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class ComputationTape:
    """Nodes reachable from a root, in the order the forward pass created them.

    Because operations execute eagerly, creation order is a topological
    order: every node's inputs were created before the node itself.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root):
        seen = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) not in seen:
                seen[id(node)] = node
                stack.extend(node._parents)
        return cls(sorted(seen.values(), key=lambda n: n._node_id))

    def is_topologically_ordered(self):
        position = {id(n): i for i, n in enumerate(self.nodes)}
        return all(
            position[id(p)] < position[id(n)]
            for n in self.nodes
            for p in n._parents
        )

    def __len__(self):
        return len(self.nodes)


def backward(loss):
    """Accumulate exact reverse-mode gradients of a scalar root into .grad.

    Visits the tape in exact reverse creation order, so repeated runs on a
    rebuilt identical graph produce bit-identical gradients.  A second call
    on the same root is an error: rebuild the graph for the next step.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already ran on this root; rebuild the graph")
    loss._consumed = True
    tape = ComputationTape.trace(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
    return tape


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out_data, parents, backward_fn):
    out = Tensor(out_data)
    if _grad_state.enabled and any(p._needs_grad() for p in parents):
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def matmul(a, b):
    """Matrix product; backward is dA = dC @ B.T, dB = A.T @ dC."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a._needs_grad():
            a._accumulate(g @ b.data.T)
        if b._needs_grad():
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def add(a, b):
    """Elementwise sum; the second argument may be a [1 x n] bias row."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        def bw(g):
            if a._needs_grad():
                a._accumulate(g)
            if b._needs_grad():
                b._accumulate(g)
    elif a.data.ndim == 2 and b.shape == (1, a.shape[1]):
        def bw(g):
            if a._needs_grad():
                a._accumulate(g)
            if b._needs_grad():
                b._accumulate(g.sum(axis=0, keepdims=True))
    else:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a._needs_grad():
            a._accumulate(g)
        if b._needs_grad():
            b._accumulate(-g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a._needs_grad():
            a._accumulate(g * b.data)
        if b._needs_grad():
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def row_scale(s, x):
    """Scale each row of x [m x n] by the matching entry of s [m x 1]."""
    s, x = _as_tensor(s), _as_tensor(x)
    if s.data.ndim != 2 or x.data.ndim != 2 or s.shape != (x.shape[0], 1):
        raise DimensionError(f"row_scale: incompatible shapes {s.shape} and {x.shape}")

    def bw(g):
        if s._needs_grad():
            s._accumulate((g * x.data).sum(axis=1, keepdims=True))
        if x._needs_grad():
            x._accumulate(g * s.data)

    return _make(s.data * x.data, (s, x), bw)


def sigmoid(x):
    x = _as_tensor(x)
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bw(g):
        if x._needs_grad():
            x._accumulate(g * y * (1.0 - y))

    return _make(y, (x,), bw)


def tanh(x):
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def bw(g):
        if x._needs_grad():
            x._accumulate(g * (1.0 - y * y))

    return _make(y, (x,), bw)


def relu(x):
    x = _as_tensor(x)
    y = np.maximum(x.data, 0.0)

    def bw(g):
        if x._needs_grad():
            x._accumulate(g * (x.data > 0.0))

    return _make(y, (x,), bw)


def softmax(x):
    """Row-wise softmax with max-subtraction; rows sum to 1 within 1e-12."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax expects a 2-d tensor, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        if x._needs_grad():
            inner = (g * y).sum(axis=1, keepdims=True)
            x._accumulate(y * (g - inner))

    return _make(y, (x,), bw)


def embedding_lookup(table, indices):
    """Gather rows of the table; backward scatters into those rows only.

    ``indices`` is a plain integer array (categories are not differentiable);
    unseen categories must be mapped to the reserved id 0 by the caller.
    """
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = int(idx[(idx < 0) | (idx >= vocab)][0])
        raise OutOfVocabularyError(f"index {bad} outside vocabulary of size {vocab}")

    def bw(g):
        if table._needs_grad():
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            table._accumulate(gt)

    return _make(table.data[idx], (table,), bw)


def concat(parts, axis=1):
    """Concatenate 2-d tensors along columns (axis=1) or rows (axis=0)."""
    parts = [_as_tensor(p) for p in parts]
    if axis not in (0, 1):
        raise DimensionError("concat supports axis 0 or 1")
    if any(p.data.ndim != 2 for p in parts):
        raise DimensionError("concat expects 2-d tensors")
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise DimensionError(f"concat: mismatched shapes {[p.shape for p in parts]}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p._needs_grad():
                p._accumulate(g[:, lo:hi] if axis == 1 else g[lo:hi, :])

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def col(x, j):
    """Extract column j as an [m x 1] tensor; backward scatters into it."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or not (0 <= j < x.shape[1]):
        raise DimensionError(f"col: index {j} invalid for shape {x.shape}")

    def bw(g):
        if x._needs_grad():
            gx = np.zeros_like(x.data)
            gx[:, j:j + 1] = g
            x._accumulate(gx)

    return _make(x.data[:, j:j + 1].copy(), (x,), bw)


def tsum(x):
    """Sum of all elements, as a scalar tensor."""
    x = _as_tensor(x)

    def bw(g):
        if x._needs_grad():
            x._accumulate(np.full_like(x.data, float(g)))

    return _make(np.array(x.data.sum()), (x,), bw)


def elementwise(op, *args):
    """Dispatch an elementwise primitive by name."""
    table = {"add": add, "mul": mul, "sub": sub,
             "sigmoid": sigmoid, "tanh": tanh, "relu": relu}
    if op not in table:
        raise ContractError(f"unknown elementwise op {op!r}")
    return table[op](*args)


def bce_loss(pred, target):
    """Mean binary cross-entropy over all prediction/label entries.

    Predictions are clamped to [BCE_EPS, 1 - BCE_EPS] internally; gradient
    is zero where the clamp is active.  Labels are constants (a plain
    array or a non-differentiable tensor).
    """
    pred = _as_tensor(pred)
    if isinstance(target, Tensor):
        target = target.data
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise DimensionError(f"bce_loss: labels shape {t.shape} != preds {pred.shape}")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    size = p.size
    value = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum() / size
    interior = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)

    def bw(g):
        if pred._needs_grad():
            gp = np.where(interior, (p - t) / (p * (1.0 - p) * size), 0.0)
            pred._accumulate(float(g) * gp)

    return _make(np.array(value), (pred,), bw)


def gru_cell(x, h_prev, params):
    """One GRU step, composed from primitives so gradients come for free.

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    hh = tanh(x W_h + (r * h) U_h + b_h)
    h' = (1 - z) * h + z * hh

    ``params`` maps the keys w_z/u_z/b_z, w_r/u_r/b_r, w_h/u_h/b_h to tensors.
    """
    z = sigmoid(add(add(matmul(x, params["w_z"]), matmul(h_prev, params["u_z"])),
                    params["b_z"]))
    r = sigmoid(add(add(matmul(x, params["w_r"]), matmul(h_prev, params["u_r"])),
                    params["b_r"]))
    hh = tanh(add(add(matmul(x, params["w_h"]), matmul(mul(r, h_prev), params["u_h"])),
                  params["b_h"]))
    # (1 - z) * h + z * hh, written without a ones constant
    return add(sub(h_prev, mul(z, h_prev)), mul(z, hh))


def zero_grads(tensors):
    """Explicitly clear accumulated gradients between steps."""
    for t in tensors:
        t.zero_grad()
