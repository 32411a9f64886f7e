"""Dense float64 tensors with a tape-based reverse-mode autodiff engine.

Every differentiable operation appends one node to the active
:class:`ComputeGraph`.  Nodes are only ever appended, so an input of node
``k`` always has an index ``< k`` and :func:`backward` can simply walk the tape
in reverse insertion order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    pass


class Tensor:
    """An n-dimensional float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class ComputeGraph:
    """Append-only tape of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> None:
        output._node = len(self.nodes)
        self.nodes.append(_Node(op, inputs, output, backward_fn))

    def clear(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()

    def input_ids(self, k: int) -> list[Optional[int]]:
        return [t._node for t in self.nodes[k].inputs]


_graph = ComputeGraph()


def default_graph() -> ComputeGraph:
    return _graph


@contextlib.contextmanager
def no_grad():
    prev = _graph.enabled
    _graph.enabled = False
    try:
        yield
    finally:
        _graph.enabled = prev


def make_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out_data`` in a tensor and put it on the tape if any input needs grad.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``) per input.
    """
    needs = _graph.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _graph.record(op, tuple(inputs), out, backward_fn)
    return out


def backward(loss: Tensor, graph: Optional[ComputeGraph] = None, clear: bool = True) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    graph = graph or _graph
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = _accumulate(loss.grad, np.ones_like(loss.data))
        return
    grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
    for k in range(loss._node, -1, -1):
        g = grads.pop(k, None)
        if g is None:
            continue
        node = graph.nodes[k]
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = _accumulate(t.grad, gi)
            else:
                grads[t._node] = _accumulate(grads.get(t._node), gi)
    if clear:
        graph.clear()


def _accumulate(acc: Optional[np.ndarray], g: np.ndarray) -> np.ndarray:
    if acc is None:
        return np.array(g, dtype=np.float64, copy=True)
    acc += g
    return acc


# ---------------------------------------------------------------------------
# elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return make_op("add", (a, b), a.data + b.data,
                   lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return make_op("sub", (a, b), a.data - b.data,
                   lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one operand may be a single-element tensor."""
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_reduce_to(g * bd, a.shape) if a.requires_grad else None,
                _reduce_to(g * ad, b.shape) if b.requires_grad else None)

    return make_op("mul", (a, b), ad * bd, bw)


def scale(x: Tensor, c: Scalar) -> Tensor:
    c = float(c)
    return make_op("scale", (x,), x.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_op("log", (x,), np.log(xd), lambda g: (g / xd,))


# ---------------------------------------------------------------------------
# reductions and structural ops


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_op("sum", (x,), np.asarray(x.data.sum(axis=axis)), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make_op("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing; the gradient is scattered back into a zero array."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return make_op("getitem", (x,), np.array(x.data[idx]), bw)


def take(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; ``index`` may repeat entries."""
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return make_op("take", (x,), np.take(x.data, index, axis=axis), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if len(xs) == 1:
        return xs[0]
    ref = list(xs[0].shape)
    for t in xs[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(s)) if i != axis % len(s)):
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} vs {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return make_op("concat", tuple(xs), np.concatenate([t.data for t in xs], axis=axis),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Contiguous pieces of ``x`` along ``axis`` with the given extents."""
    if np.sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + s)
        out.append(getitem(x, tuple(idx)))
        start += s
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return make_op("matmul", (a, b), ad @ bd,
                   lambda g: (g @ bd.T if a.requires_grad else None,
                              ad.T @ g if b.requires_grad else None))


def weighted_sum(weights: Tensor, xs: Sequence[Tensor]) -> Tensor:
    """``sum_i weights[i] * xs[i]`` for a weight vector and equally shaped tensors."""
    xs = list(xs)
    if weights.shape != (len(xs),):
        raise ShapeError(f"weighted_sum: {weights.shape} weights for {len(xs)} tensors")
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise ShapeError(f"weighted_sum: shape mismatch {shape} vs {t.shape}")
    w = weights.data
    out = np.zeros(shape)
    for wi, t in zip(w, xs):
        out += wi * t.data

    def bw(g):
        gw = np.array([np.vdot(g, t.data) for t in xs]) if weights.requires_grad else None
        return (gw, *[g * wi if t.requires_grad else None for wi, t in zip(w, xs)])

    return make_op("weighted_sum", (weights, *xs), out, bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise IndexError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", (x,), s, bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.intp)
    n = logits.shape[0]
    if logits.ndim != 2 or labels.shape != (n,):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return make_op("cross_entropy", (logits,), np.asarray(loss), bw)


def drop_path(x: Tensor, keep_mask: np.ndarray, keep_prob: float) -> Tensor:
    """Zero whole samples where ``keep_mask`` is 0, rescale survivors by ``1/keep_prob``."""
    m = (np.asarray(keep_mask, dtype=np.float64) / keep_prob).reshape((-1,) + (1,) * (x.ndim - 1))
    return make_op("drop_path", (x,), x.data * m, lambda g: (g * m,))


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
