"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records a node on the tensor it produces. ``backward``
walks the nodes reachable from a scalar loss in reverse creation order and
accumulates gradients. A recorded graph can be replayed exactly once;
calling ``backward`` again without a fresh forward pass raises
:class:`TapeConsumedError`.

Only the primitives the demand model needs are provided. Broadcasting is
limited to scalar-with-tensor; row-wise bias addition is its own primitive.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

Number = Union[int, float]

_sequence = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class TapeConsumedError(RuntimeError):
    """A recorded graph was replayed a second time."""


class _Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_sequence)
        self.consumed = False


class Tensor:
    """A dense array of 64-bit floats that can take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._node = _Node(op, tuple(inputs), backward_fn) if out.requires_grad else None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, target: Tensor) -> np.ndarray:
    # scalar operand broadcast against a tensor: its gradient is the total
    if grad.shape == target.shape:
        return grad
    return np.full(target.shape, grad.sum())


def _out_shape(a: Tensor, b: Tensor) -> tuple:
    if a.shape == b.shape:
        return a.shape
    return b.shape if _is_scalar(a) else a.shape


def _scalar_view(t: Tensor, shape: tuple) -> np.ndarray:
    if t.shape == shape:
        return t.data
    return t.data.reshape(())


def _binary(a, b, op: str, fn, backward_fn) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        av, bv = a.data, b.data
        out = fn(av, bv)
    else:
        _binary_shapes(a, b, op)
        shape = _out_shape(a, b)
        av, bv = _scalar_view(a, shape), _scalar_view(b, shape)
        out = np.broadcast_to(fn(av, bv), shape).copy()

    def backward(g):
        ga, gb = backward_fn(g, av, bv)
        return _reduce_to(ga, a), _reduce_to(gb, b)

    return _make(out, op, (a, b), backward)


def add(a, b) -> Tensor:
    return _binary(a, b, "add", np.add, lambda g, av, bv: (g, g))


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", np.subtract, lambda g, av, bv: (g, -g))


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", np.multiply, lambda g, av, bv: (g * bv, g * av))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    av, bv = a.data, b.data

    def backward(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, "matmul", (a, b), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-k vector to every row of an n-by-k matrix."""
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit rows of {x.shape}")

    def backward(g):
        return g, g.sum(axis=0)

    return _make(x.data + bias.data, "add_bias", (x, bias), backward)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, "sigmoid", (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, "tanh", (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0  # derivative at exactly 0 is 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), "relu", (x,), backward)


def softplus(x: Tensor) -> Tensor:
    v = x.data
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    e = np.exp(-np.abs(v))
    slope = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        return (g * slope,)

    return _make(out, "softplus", (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        return (np.full(shape, float(g)),)

    return _make(np.array(x.data.sum()), "sum", (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size

    def backward(g):
        return (np.full(shape, float(g) / n),)

    return _make(np.array(x.data.mean()), "mean", (x,), backward)


def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    """Join matrices side by side (all must share the row count)."""
    parts = [_as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat_columns: incompatible shapes {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), "concat", parts, backward)


def slice_columns(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_columns: bad range [{start}, {stop}) for shape {x.shape}")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), "slice", (x,), backward)


def _topological(loss: Tensor, order: str) -> list:
    if order == "sequence":
        seen, stack, nodes = set(), [loss], []
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append((t, node))
            stack.extend(node.inputs)
        nodes.sort(key=lambda tn: tn[1].seq, reverse=True)
        return nodes
    if order == "dfs":
        # iterative post-order DFS, reversed
        visited, post = set(), []
        stack = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            node = t._node
            if node is None:
                continue
            if expanded:
                post.append((t, node))
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((t, True))
            for inp in reversed(node.inputs):
                if inp._node is not None and id(inp._node) not in visited:
                    stack.append((inp, False))
        post.reverse()
        return post
    raise ValueError(f"unknown traversal order {order!r}")


def backward(loss: Tensor, order: str = "sequence") -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on.

    Leaf gradients accumulate across calls, so a weight used in several
    places (or several backward passes) receives the sum of contributions.
    ``order`` selects the reverse-topological schedule; ``"sequence"`` replays
    creation order, ``"dfs"`` uses a depth-first post-order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones(loss.shape) if loss.grad is None else loss.grad + 1.0
        return
    nodes = _topological(loss, order)
    if any(node.consumed for _, node in nodes):
        raise TapeConsumedError("graph already replayed; run a new forward pass first")

    grads = {id(loss): np.ones(loss.shape)}
    for t, node in nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        t.grad = g
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
        node.consumed = True
        node.backward_fn = None


def grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))


def sgd_step(params: Iterable[Tensor], lr: float, clip_norm: Optional[float] = None) -> None:
    """Apply ``p <- p - lr * p.grad`` to every parameter, then clear the grads.

    When ``clip_norm`` is given and the global gradient norm exceeds it, all
    gradients are rescaled to that norm first.
    """
    params = list(params)
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {p.name or i!r} has no gradient")
    scale = 1.0
    if clip_norm is not None:
        norm = grad_norm(params)
        if norm > clip_norm:
            scale = clip_norm / norm
    for p in params:
        if lr != 0.0:
            p.data = p.data - (lr * scale) * p.grad
        p.grad = None


class Adam:
    """Adam optimizer over a fixed list of parameters."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, clip_norm: Optional[float] = None) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"parameter {p.name or i!r} has no gradient")
        scale = 1.0
        if clip_norm is not None:
            norm = grad_norm(self.params)
            if norm > clip_norm:
                scale = clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.lr != 0.0:
                p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None
