"""Small reverse-mode autodiff over float64 numpy arrays of rank <= 3.

Every op returns a :class:`Node` holding its forward value and a closure that
pushes the upstream gradient into the parents. ``backward`` zeroes all
reachable accumulators, seeds the scalar root with 1 and walks the graph in
reverse topological order.

Shape rules
-----------
add, mul      identical shapes, or a rank-1 right operand matching the last
              axis of the left one (bias-row broadcast)
matmul        (m,k)@(k,n), (b,m,k)@(k,n) or (b,m,k)@(b,k,n)
gather_rows   table (v,d) indexed by an integer array of any rank <= 2
softmax_rows, log_softmax_rows, layer_norm
              act along the last axis
mean, sum     reduce everything to a scalar
concat_rows   concatenate along axis 0, trailing shapes equal
slice_rows    contiguous [start, stop) along axis 0
transpose     swap the last two axes
reshape       any shape with the same element count
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 3


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}: shape {arr.shape}")
    return arr


def _check_finite(kind: str, value: np.ndarray) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{kind} produced a non-finite value")


class Node:
    """A vertex of the computation graph."""

    __slots__ = ("value", "_grad", "parents", "kind", "_backward")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        kind: str = "leaf",
        backward_fn: Callable[[np.ndarray], None] | None = None,
    ):
        self.value = value
        self._grad: np.ndarray | None = None
        self.parents = parents
        self.kind = kind
        self._backward = backward_fn

    @property
    def grad(self) -> np.ndarray:
        # allocated on first touch; reads as zero before any backward pass
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node({self.kind}, shape={self.shape})"

    # operator sugar, so model code reads naturally
    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return mul(self, other)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)


def tensor(value) -> Node:
    """Wrap an array (or nested list / scalar) as a leaf node."""
    arr = _as_array(value)
    _check_finite("leaf", arr)
    return Node(arr)


def _make(kind: str, value: np.ndarray, parents, backward_fn) -> Node:
    _check_finite(kind, value)
    return Node(value, tuple(parents), kind, backward_fn)


def _broadcast_ok(a: Node, b: Node, kind: str) -> bool:
    if a.shape == b.shape:
        return False
    if b.value.ndim == 1 and a.value.ndim >= 1 and a.shape[-1:] == b.shape:
        return True
    raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_bias(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a: Node, b: Node) -> Node:
    bias = _broadcast_ok(a, b, "add")

    def backward(g):
        a.grad += g
        b.grad += _reduce_bias(g) if bias else g

    return _make("add", a.value + b.value, (a, b), backward)


def mul(a: Node, b: Node) -> Node:
    bias = _broadcast_ok(a, b, "mul")

    def backward(g):
        a.grad += g * b.value
        gb = g * a.value
        b.grad += _reduce_bias(gb) if bias else gb

    return _make("mul", a.value * b.value, (a, b), backward)


def matmul(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape
    ok = (
        (len(sa) == 2 and len(sb) == 2 and sa[1] == sb[0])
        or (len(sa) == 3 and len(sb) == 2 and sa[2] == sb[0])
        or (len(sa) == 3 and len(sb) == 3 and sa[0] == sb[0] and sa[2] == sb[1])
    )
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {sa} and {sb}")

    if len(sa) == 3 and len(sb) == 2:
        # fold the batch into rows so BLAS sees one large product
        a2 = a.value.reshape(-1, sa[2])
        value = (a2 @ b.value).reshape(sa[0], sa[1], sb[1])

        def backward(g):
            g2 = g.reshape(-1, sb[1])
            a.grad += (g2 @ b.value.T).reshape(sa)
            b.grad += a2.T @ g2

    else:
        value = a.value @ b.value

        def backward(g):
            a.grad += g @ np.swapaxes(b.value, -1, -2)
            b.grad += np.swapaxes(a.value, -1, -2) @ g

    return _make("matmul", value, (a, b), backward)


def gather_rows(table: Node, index) -> Node:
    idx = np.asarray(index)
    if table.value.ndim != 2:
        raise ShapeError(f"gather_rows: table must be rank 2, got {table.shape}")
    if idx.dtype.kind not in "iu" or idx.ndim > 2:
        raise ShapeError(f"gather_rows: index must be integer of rank <= 2, got {idx.dtype} {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range for table with {table.shape[0]} rows")

    def backward(g):
        np.add.at(table.grad, idx.reshape(-1), g.reshape(-1, table.shape[1]))

    return _make("gather_rows", table.value[idx], (table,), backward)


def relu(x: Node) -> Node:
    mask = x.value > 0

    def backward(g):
        x.grad += g * mask

    return _make("relu", x.value * mask, (x,), backward)


def layer_norm(x: Node, eps: float = 1e-5) -> Node:
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        x.grad += inv * (g - gm - y * gy)

    return _make("layer_norm", y, (x,), backward)


def softmax_rows(x: Node) -> Node:
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x.grad += y * (g - (g * y).sum(axis=-1, keepdims=True))

    return _make("softmax_rows", y, (x,), backward)


def log_softmax_rows(x: Node) -> Node:
    z = x.value - x.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        x.grad += g - np.exp(y) * g.sum(axis=-1, keepdims=True)

    return _make("log_softmax_rows", y, (x,), backward)


def mean(x: Node) -> Node:
    n = x.value.size

    def backward(g):
        x.grad += g / n

    return _make("mean", np.asarray(x.value.mean()), (x,), backward)


def sum_all(x: Node) -> Node:
    def backward(g):
        x.grad += g

    return _make("sum", np.asarray(x.value.sum()), (x,), backward)


def concat_rows(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise ShapeError("concat_rows: need at least one input")
    tail = nodes[0].shape[1:]
    for n in nodes:
        if n.shape[1:] != tail or n.value.ndim == 0:
            raise ShapeError(f"concat_rows: trailing shapes differ: {[m.shape for m in nodes]}")
    bounds = np.cumsum([0] + [n.shape[0] for n in nodes])

    def backward(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            n.grad += g[lo:hi]

    return _make("concat_rows", np.concatenate([n.value for n in nodes], axis=0), nodes, backward)


def slice_rows(x: Node, start: int, stop: int) -> Node:
    if x.value.ndim == 0 or not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"slice_rows: [{start}, {stop}) invalid for shape {x.shape}")

    def backward(g):
        x.grad[start:stop] += g

    return _make("slice_rows", x.value[start:stop].copy(), (x,), backward)


def transpose(x: Node) -> Node:
    if x.value.ndim < 2:
        raise ShapeError(f"transpose: need rank >= 2, got {x.shape}")

    def backward(g):
        x.grad += np.swapaxes(g, -1, -2)

    return _make("transpose", np.swapaxes(x.value, -1, -2).copy(), (x,), backward)


def reshape(x: Node, shape: Iterable[int]) -> Node:
    shape = tuple(shape)
    if len(shape) > MAX_RANK or int(np.prod(shape)) != x.value.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")

    def backward(g):
        x.grad += g.reshape(x.shape)

    return _make("reshape", x.value.reshape(shape).copy(), (x,), backward)


OPS: dict[str, Callable[..., Node]] = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "gather_rows": gather_rows,
    "relu": relu,
    "layer_norm": layer_norm,
    "softmax_rows": softmax_rows,
    "log_softmax_rows": log_softmax_rows,
    "mean": mean,
    "sum": sum_all,
    "concat_rows": concat_rows,
    "slice_rows": slice_rows,
    "transpose": transpose,
    "reshape": reshape,
}


def forward_op(kind: str, *inputs, **kwargs) -> Node:
    """Dispatch by op name; see the module docstring for shape rules."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order = topo_order(root)
    for node in order:
        node._grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def finite_diff_check(
    f: Callable[[Node], Node],
    x: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a leaf node to a scalar node and must build a fresh graph on
    every call.
    """
    if not 0 < h <= 1e-2:
        raise ValueError(f"step h={h} outside (0, 1e-2]")
    x = _as_array(x)
    leaf = tensor(x)
    backward(f(leaf))
    analytic = leaf.grad.copy()

    numeric = np.zeros_like(x)
    flat = numeric.reshape(-1)
    base = x.reshape(-1)
    for i in range(base.size):
        xp = base.copy()
        xm = base.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(tensor(xp.reshape(x.shape))).value)
        fm = float(f(tensor(xm.reshape(x.shape))).value)
        flat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
