"""Minimal reverse-mode autodiff over dense float64 arrays.

Values live in numpy arrays. A :class:`Tape` records every primitive applied to
its :class:`Node` objects; ``Tape.gradient`` walks the record backwards once.
Nodes are appended in creation order, which is already a topological order, so
the reverse pass visits each node exactly once after all of its consumers.

Row-wise ops (``l2_norm``, ``normalize``, ``softmax_cross_entropy``) accept a
single vector or a batch of row vectors.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateNormError, DimensionError, NumericError

NORM_EPS = 1e-12


class Tensor:
    """Immutable float64 array with finiteness checked at construction."""

    __slots__ = ("_data",)

    def __init__(self, values, shape: Sequence[int] | None = None):
        arr = np.array(values, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if arr.size != int(np.prod(shape)):
                raise DimensionError(f"{arr.size} values cannot fill shape {shape}")
            arr = arr.reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor values must be finite")
        arr.setflags(write=False)
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def data(self) -> np.ndarray:
        return self._data

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def __array__(self, dtype=None, copy=None):
        return self._data if dtype is None else self._data.astype(dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, values={self._data.tolist()!r})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    __hash__ = None


class Node:
    __slots__ = ("value", "tape", "index", "parents", "backward")

    def __init__(self, value: np.ndarray, tape: "Tape", parents=(), backward=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward = backward
        self.index = tape._record(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(#{self.index}, shape={self.shape})"


class Tape:
    """Ordered record of primitives. Single-owner; not thread safe."""

    def __init__(self):
        self._nodes: list[Node] = []

    def _record(self, node: Node) -> int:
        self._nodes.append(node)
        return len(self._nodes) - 1

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, value) -> Node:
        """Register a leaf whose gradient may be requested."""
        if isinstance(value, Tensor):
            arr = value.data.copy()
        else:
            arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("leaf values must be finite")
        return Node(arr, self)

    def constant(self, value) -> Node:
        return self.watch(value)

    def gradient(self, output: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
        if output.tape is not self:
            raise ValueError("output node belongs to another tape")
        if output.value.size != 1:
            raise DimensionError("gradient requires a scalar output")
        grads: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
        for node in reversed(self._nodes[: output.index + 1]):
            g = grads.get(node.index)
            if g is None or node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None:
                    continue
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
        return [grads.get(n.index, np.zeros_like(n.value)) for n in wrt]


def _lift(x, tape: Tape) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


# ---------------------------------------------------------------- primitives

def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return g @ bv.T, av.T @ g

    return Node(av @ bv, tape, (a, b), backward)


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    return Node(a.value.T.copy(), a.tape, (a,), lambda g: (g.T,))


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    return Node(a.value + b.value, tape, (a, b), lambda g: (g, g))


def add_bias(x: Node, bias) -> Node:
    """``x + bias`` with ``bias`` broadcast over the rows of ``x``."""
    bias = _lift(bias, x.tape)
    if bias.value.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"bias shape {bias.shape} does not match {x.shape}")

    def backward(g):
        return g, g.sum(axis=0) if g.ndim == 2 else g

    return Node(x.value + bias.value, x.tape, (x, bias), backward)


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return Node(x.value * c, x.tape, (x,), lambda g: (g * c,))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return Node(np.where(mask, x.value, 0.0), x.tape, (x,), lambda g: (g * mask,))


def total(x: Node) -> Node:
    shape = x.shape
    return Node(np.asarray(x.value.sum()), x.tape, (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Node) -> Node:
    return scale(total(x), 1.0 / x.value.size)


def square_sum(x: Node) -> Node:
    xv = x.value
    return Node(np.asarray(np.sum(xv * xv)), x.tape, (x,), lambda g: (2.0 * float(g) * xv,))


def _row_norms(v: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(v * v, axis=-1))
    if np.any(norms < NORM_EPS):
        raise DegenerateNormError(f"vector norm below {NORM_EPS:g}")
    return norms


def l2_norm(v: Node) -> Node:
    """Euclidean norm of a vector, or of each row of a matrix."""
    if v.value.ndim not in (1, 2) or v.shape[-1] < 1:
        raise DimensionError(f"l2_norm expects a vector or matrix, got {v.shape}")
    vv = v.value
    norms = _row_norms(vv)

    def backward(g):
        return (np.asarray(g)[..., None] * vv / norms[..., None],)

    return Node(norms if vv.ndim == 2 else np.asarray(norms), v.tape, (v,), backward)


def normalize(v: Node) -> Node:
    """Unit-L2 rescaling of a vector or of each row of a matrix."""
    if v.value.ndim not in (1, 2):
        raise DimensionError(f"normalize expects a vector or matrix, got {v.shape}")
    vv = v.value
    norms = _row_norms(vv)[..., None]
    unit = vv / norms

    def backward(g):
        # tangent projection of the upstream gradient, divided by the norm
        radial = np.sum(g * unit, axis=-1, keepdims=True)
        return ((g - radial * unit) / norms,)

    return Node(unit, v.tape, (v,), backward)


def _as_labels(y, n_rows: int | None, n_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(y))
    if not np.issubdtype(labels.dtype, np.integer):
        raise IndexError("class labels must be integers")
    if n_rows is not None and labels.shape != (n_rows,):
        raise DimensionError(f"expected {n_rows} labels, got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise IndexError(f"class label out of range [0, {n_classes})")
    return labels


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_cross_entropy(z: Node, y) -> Node:
    """``-log softmax(z)[y]``; for a batch of rows, the mean over rows."""
    zv = z.value
    batched = zv.ndim == 2
    rows = zv if batched else zv[None, :]
    labels = _as_labels(y, rows.shape[0] if batched else None, rows.shape[1])
    if not batched and labels.size != 1:
        raise DimensionError("a single logit vector takes a single label")
    shifted = rows - rows.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    idx = np.arange(rows.shape[0])
    losses = log_z - shifted[idx, labels]
    probs = np.exp(shifted - log_z[:, None])
    n = rows.shape[0]

    def backward(g):
        d = probs.copy()
        d[idx, labels] -= 1.0
        d *= float(g) / n
        return (d if batched else d[0],)

    return Node(np.asarray(losses.mean()), z.tape, (z,), backward)


def mse_onehot(z: Node, y) -> Node:
    """``(1/C) * sum_i (z_i - onehot(y)_i)^2``, averaged over rows when batched."""
    zv = z.value
    batched = zv.ndim == 2
    rows = zv if batched else zv[None, :]
    labels = _as_labels(y, rows.shape[0] if batched else None, rows.shape[1])
    n, c = rows.shape
    diff = rows.copy()
    diff[np.arange(n), labels] -= 1.0

    def backward(g):
        d = diff * (2.0 * float(g) / (n * c))
        return (d if batched else d[0],)

    return Node(np.asarray(np.sum(diff * diff) / (n * c)), z.tape, (z,), backward)


# ------------------------------------------------------------ gradient oracle

def grad_check(function: Callable[[Node], Node], point, eps: float = 1e-6) -> float:
    """Max relative error between autodiff and central finite differences.

    ``function`` maps a watched node to a scalar node. The relative error per
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-8, 1e-4]")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    tape = Tape()
    x = tape.watch(x0)
    out = function(x)
    if not np.all(np.isfinite(out.value)):
        raise NumericError("non-finite function value")
    (analytic,) = tape.gradient(out, [x])

    def value_at(arr: np.ndarray) -> float:
        t = Tape()
        v = float(function(t.watch(arr)).value)
        if not np.isfinite(v):
            raise NumericError("non-finite function value during finite differences")
        return v

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        step = np.zeros(x0.size)
        step[i] = eps
        step = step.reshape(x0.shape)
        flat[i] = (value_at(x0 + step) - value_at(x0 - step)) / (2.0 * eps)
    if not np.all(np.isfinite(analytic)):
        raise NumericError("non-finite autodiff gradient")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
