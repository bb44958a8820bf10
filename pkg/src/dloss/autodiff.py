"""Minimal reverse-mode automatic differentiation on numpy arrays.

A ``Graph`` is a define-by-run tape: every operation appends its output
node in creation order, which is automatically a topological order, and
``backward`` sweeps the tape once in reverse. Graphs are rebuilt per
training step; there is no graph reuse.

Only the operations the embedding nets and losses need are provided:
elementwise arithmetic (with scalar and bias broadcasting), matmul, relu,
exp/log/sqrt/abs, reductions, gather (``take``), row normalization,
pairwise Euclidean distances and masked first/second moments. Every
differentiable op is covered by ``finite_difference_check``.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import BatchTooSmallError, InsufficientScoresError, ShapeError

# Smoothing added under the sqrt of pairwise_distances so the gradient stays
# finite for coincident embeddings; far below any meaningful distance at
# unit-norm scale.
DISTANCE_EPS = 1e-16

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Graph:
    """Recording tape for one forward/backward pass.

    The element dtype is fixed per graph: float32 for training, float64
    when gradients are to be checked against finite differences.
    """

    def __init__(self, dtype=np.float32):
        dtype = np.dtype(dtype)
        if dtype not in _DTYPES:
            raise ShapeError(f"unsupported element type {dtype}; use float32 or float64")
        self.dtype = dtype
        self.nodes: list[Tensor] = []

    def tensor(self, values, requires_grad: bool = False) -> "Tensor":
        """Record a leaf holding a copy of ``values`` (value semantics)."""
        arr = np.array(values, dtype=self.dtype)
        return Tensor(self, arr, requires_grad=requires_grad)

    def constant(self, values) -> "Tensor":
        return self.tensor(values, requires_grad=False)


class Tensor:
    """One node of a graph: an ndarray plus bookkeeping for backward."""

    __slots__ = ("graph", "node_id", "values", "requires_grad", "_backward")

    def __init__(self, graph: Graph, values: np.ndarray, requires_grad: bool = False,
                 backward: Callable | None = None):
        self.graph = graph
        self.node_id = len(graph.nodes)
        self.values = values
        self.requires_grad = requires_grad
        self._backward = backward
        graph.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        if self.values.shape != ():
            raise ShapeError(f"item() on tensor of shape {self.values.shape}")
        return float(self.values)

    def __repr__(self):
        return f"Tensor(id={self.node_id}, shape={self.values.shape}, grad={self.requires_grad})"

    # -- operator sugar; scalars are lifted to constants on the same graph --

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.graph is not self.graph:
                raise ShapeError("operands belong to different graphs")
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return mul(self, self.graph.constant(-1.0))

    def __matmul__(self, other):
        return matmul(self, self._lift(other))


def _result(a: Tensor, values: np.ndarray, inputs: Sequence[Tensor],
            backward: Callable | None) -> Tensor:
    for t in inputs:
        if t.graph is not a.graph:
            raise ShapeError("operands belong to different graphs")
    requires = any(t.requires_grad for t in inputs)
    return Tensor(a.graph, np.asarray(values), requires_grad=requires,
                  backward=backward if requires else None)


def _accumulate(grads: dict, t: Tensor, contribution: np.ndarray) -> None:
    if not t.requires_grad:
        return
    existing = grads.get(t.node_id)
    if existing is None:
        # own the buffer: later in-place accumulation must not alias inputs
        grads[t.node_id] = np.array(contribution, dtype=t.graph.dtype)
    else:
        existing += contribution


def _broadcast_kind(a_shape: tuple, b_shape: tuple) -> str:
    """Permitted binary-op shape pairs: equal, scalar, or bias-add."""
    if a_shape == b_shape:
        return "same"
    if b_shape == ():
        return "scalar_b"
    if a_shape == ():
        return "scalar_a"
    if len(a_shape) == 2 and b_shape == (a_shape[1],):
        return "bias_b"
    if len(b_shape) == 2 and a_shape == (b_shape[1],):
        return "bias_a"
    raise ShapeError(f"shapes {a_shape} and {b_shape} do not broadcast")


def _reduce_to(grad: np.ndarray, kind: str, side: str) -> np.ndarray:
    """Sum an output gradient back to the shape of one broadcast operand."""
    if kind == "same":
        return grad
    if kind == f"scalar_{side}":
        return grad.sum()
    if kind == f"bias_{side}":
        return grad.sum(axis=0)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    out_values = a.values + b.values

    def backward(g, grads):
        _accumulate(grads, a, _reduce_to(g, kind, "a"))
        _accumulate(grads, b, _reduce_to(g, kind, "b"))

    return _result(a, out_values, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    out_values = a.values - b.values

    def backward(g, grads):
        _accumulate(grads, a, _reduce_to(g, kind, "a"))
        _accumulate(grads, b, _reduce_to(-g, kind, "b"))

    return _result(a, out_values, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    out_values = a.values * b.values

    def backward(g, grads):
        _accumulate(grads, a, _reduce_to(g * b.values, kind, "a"))
        _accumulate(grads, b, _reduce_to(g * a.values, kind, "b"))

    return _result(a, out_values, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    out_values = a.values / b.values

    def backward(g, grads):
        _accumulate(grads, a, _reduce_to(g / b.values, kind, "a"))
        _accumulate(grads, b, _reduce_to(-g * a.values / (b.values * b.values), kind, "b"))

    return _result(a, out_values, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out_values = a.values @ b.values

    def backward(g, grads):
        _accumulate(grads, a, g @ b.values.T)
        _accumulate(grads, b, a.values.T @ g)

    return _result(a, out_values, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); gradient at exactly 0 is 0."""
    out_values = np.maximum(x.values, 0)

    def backward(g, grads):
        _accumulate(grads, x, g * (x.values > 0))

    return _result(x, out_values, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out_values = np.exp(x.values)

    def backward(g, grads):
        _accumulate(grads, x, g * out_values)

    return _result(x, out_values, (x,), backward)


def log(x: Tensor) -> Tensor:
    out_values = np.log(x.values)

    def backward(g, grads):
        _accumulate(grads, x, g / x.values)

    return _result(x, out_values, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    out_values = np.sqrt(x.values)

    def backward(g, grads):
        _accumulate(grads, x, g / (2.0 * out_values))

    return _result(x, out_values, (x,), backward)


def absolute(x: Tensor) -> Tensor:
    """Elementwise |x|; subgradient at 0 is 0."""
    out_values = np.abs(x.values)

    def backward(g, grads):
        _accumulate(grads, x, g * np.sign(x.values))

    return _result(x, out_values, (x,), backward)


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum of all elements (axis=None) or along axis 1 of a matrix."""
    if axis is None:
        out_values = x.values.sum(dtype=x.graph.dtype)

        def backward(g, grads):
            _accumulate(grads, x, np.full(x.shape, g, dtype=x.graph.dtype))

    elif axis == 1 and x.values.ndim == 2:
        out_values = x.values.sum(axis=1, dtype=x.graph.dtype)

        def backward(g, grads):
            _accumulate(grads, x, np.repeat(g[:, None], x.shape[1], axis=1))

    else:
        raise ShapeError(f"sum over axis {axis} of shape {x.shape} not supported")

    return _result(x, out_values, (x,), backward)


def take(x: Tensor, flat_indices: np.ndarray) -> Tensor:
    """Gather elements of the flattened tensor; backward scatter-adds."""
    idx = np.asarray(flat_indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take expects a flat index vector")
    out_values = x.values.reshape(-1)[idx]

    def backward(g, grads):
        buf = np.zeros(x.values.size, dtype=x.graph.dtype)
        np.add.at(buf, idx, g)
        _accumulate(grads, x, buf.reshape(x.shape))

    return _result(x, out_values, (x,), backward)


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    out_values = x.values.T.copy()

    def backward(g, grads):
        _accumulate(grads, x, g.T)

    return _result(x, out_values, (x,), backward)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by max(its L2 norm, eps); zero rows stay zero."""
    if eps <= 0:
        raise ShapeError("eps must be positive")
    if x.values.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a matrix, got shape {x.shape}")
    norms = np.sqrt((x.values * x.values).sum(axis=1))
    safe = np.maximum(norms, eps)
    out_values = x.values / safe[:, None]
    live = norms > eps  # rows where the norm (not eps) is the divisor

    def backward(g, grads):
        dots = (g * out_values).sum(axis=1)
        normalized = (g - out_values * dots[:, None]) / safe[:, None]
        clamped = g / eps
        _accumulate(grads, x, np.where(live[:, None], normalized, clamped))

    return _result(x, out_values, (x,), backward)


def pairwise_distances(e: Tensor, eps: float = DISTANCE_EPS) -> Tensor:
    """All-pairs Euclidean distances of the rows of ``e``.

    Entry (i, j) is sqrt(max(|e_i|^2 + |e_j|^2 - 2 e_i.e_j, 0) + eps); the
    smoothing keeps the gradient finite when rows coincide. The result is
    exactly symmetric and the diagonal is exactly sqrt(eps).
    """
    if e.values.ndim != 2:
        raise ShapeError(f"pairwise_distances expects a matrix, got shape {e.shape}")
    n = e.shape[0]
    if n < 2:
        raise BatchTooSmallError(f"need at least 2 rows for pairwise distances, got {n}")
    sq = (e.values * e.values).sum(axis=1)
    dot = e.values @ e.values.T
    dot = 0.5 * (dot + dot.T)  # force exact symmetry of the Gram matrix
    inner = sq[:, None] + sq[None, :] - 2.0 * dot
    clamped = np.maximum(inner, 0)
    np.fill_diagonal(clamped, 0)  # float noise must not leak into d(i, i)
    out_values = np.sqrt(clamped + np.asarray(eps, dtype=e.graph.dtype))
    positive = clamped > 0

    def backward(g, grads):
        h = np.where(positive, g / (2.0 * out_values), 0)
        row = h.sum(axis=1)
        col = h.sum(axis=0)
        grad_e = 2.0 * ((row + col)[:, None] * e.values - (h + h.T) @ e.values)
        _accumulate(grads, e, grad_e)

    return _result(e, out_values, (e,), backward)


def masked_moments(x: Tensor, mask: np.ndarray | None = None,
                   name: str = "selected") -> tuple[Tensor, Tensor]:
    """Mean and population variance over the masked elements of a vector.

    Sums go through math.fsum (exactly rounded), which makes the moments
    invariant under duplication of every selected element — the property
    that licenses computing scores over unordered pairs only.
    """
    if x.values.ndim != 1:
        raise ShapeError(f"masked_moments expects a vector, got shape {x.shape}")
    if mask is None:
        mask = np.ones(x.shape[0], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"mask shape {mask.shape} != values shape {x.shape}")
    count = int(mask.sum())
    if count < 2:
        raise InsufficientScoresError(name, count, 2)

    dtype = x.graph.dtype
    selected = x.values[mask]
    mean_value = dtype.type(math.fsum(selected) / count)
    deviations = selected - mean_value
    var_value = dtype.type(math.fsum(deviations * deviations) / count)

    def backward_mean(g, grads):
        _accumulate(grads, x, g * mask / count)

    def backward_var(g, grads):
        devs = np.zeros(x.shape[0], dtype=dtype)
        devs[mask] = deviations
        _accumulate(grads, x, g * 2.0 * devs / count)

    mean_t = _result(x, np.asarray(mean_value, dtype=dtype), (x,), backward_mean)
    var_t = _result(x, np.asarray(var_value, dtype=dtype), (x,), backward_var)
    return mean_t, var_t


GradientMap = dict  # node_id -> ndarray of the node's shape


def backward(loss: Tensor) -> GradientMap:
    """Reverse sweep from a scalar loss over its graph.

    Returns gradients for every requires-grad tensor on the tape (zeros for
    nodes the loss does not depend on). Deterministic: the tape is walked in
    strict reverse creation order.
    """
    if loss.values.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.values.shape}")
    graph = loss.graph
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=graph.dtype)}
    for node in reversed(graph.nodes):
        if node._backward is None:
            continue
        g = grads.get(node.node_id)
        if g is None:
            continue
        node._backward(g, grads)
    out: dict[int, np.ndarray] = {}
    for node in graph.nodes:
        if node.requires_grad:
            g = grads.get(node.node_id)
            out[node.node_id] = g if g is not None else np.zeros_like(node.values)
    return out


def finite_difference_check(fn: Callable[..., Tensor],
                            params: Sequence[np.ndarray],
                            step: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` receives one float64 leaf Tensor per entry of ``params`` (on a
    fresh graph each evaluation) and must return a scalar Tensor. Relative
    error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    worst, _ = finite_difference_report(fn, params, step)
    return worst


def finite_difference_report(fn, params, step):
    """Like finite_difference_check but also reports the worst coordinate."""
    if step <= 0:
        raise ShapeError("finite difference step must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]

    def evaluate(values):
        g = Graph(dtype=np.float64)
        leaves = [g.tensor(v, requires_grad=True) for v in values]
        out = fn(*leaves)
        if out.values.shape != ():
            raise ShapeError("fn must return a scalar tensor")
        return out, leaves

    out, leaves = evaluate(params)
    gmap = backward(out)
    analytic = [gmap[leaf.node_id] for leaf in leaves]

    worst = 0.0
    worst_at = (0, 0, 0.0, 0.0)
    for pi, base in enumerate(params):
        flat = base.reshape(-1)
        grad_flat = analytic[pi].reshape(-1)
        for j in range(flat.size):
            saved = flat[j]
            flat[j] = saved + step
            plus = evaluate(params)[0].item()
            flat[j] = saved - step
            minus = evaluate(params)[0].item()
            flat[j] = saved
            numeric = (plus - minus) / (2.0 * step)
            a = float(grad_flat[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
                worst_at = (pi, j, a, numeric)
    return worst, worst_at
