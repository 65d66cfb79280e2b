"""Reverse-mode differentiation over small graphs of numpy arrays"""

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

ArrayLike = float | int | np.ndarray


class AutodiffError(ValueError):
    pass


class Node:
    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "backward_fn")

    def __init__(
        self,
        value: ArrayLike,
        op: str = "leaf",
        parents: Sequence["Node"] = (),
        requires_grad: bool = True,
    ) -> None:
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.backward_fn: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Node({self.op}, shape={self.shape})"

    def __add__(self, other: "NodeLike") -> "Node":
        return add(self, other)

    def __radd__(self, other: "NodeLike") -> "Node":
        return add(other, self)

    def __sub__(self, other: "NodeLike") -> "Node":
        return sub(self, other)

    def __rsub__(self, other: "NodeLike") -> "Node":
        return sub(other, self)

    def __mul__(self, other: "NodeLike") -> "Node":
        return mul(self, other)

    def __rmul__(self, other: "NodeLike") -> "Node":
        return mul(other, self)

    def __neg__(self) -> "Node":
        return neg(self)

    def __matmul__(self, other: "NodeLike") -> "Node":
        return matmul(self, other)


NodeLike = Node | ArrayLike


def constant(value: ArrayLike) -> Node:
    return Node(value, op="const", requires_grad=False)


def as_node(x: NodeLike) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if shape == () and grad.shape != ():
        return np.asarray(grad.sum())
    return grad


def _elementwise_pair(a: NodeLike, b: NodeLike, op: str) -> tuple[Node, Node]:
    a, b = as_node(a), as_node(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise AutodiffError(f"{op}: shapes {a.shape} and {b.shape} differ")
    return a, b


def add(a: NodeLike, b: NodeLike) -> Node:
    a, b = _elementwise_pair(a, b, "add")
    out = Node(a.value + b.value, "add", (a, b))

    def backward() -> None:
        a.grad += _reduce_to(out.grad, a.shape)
        b.grad += _reduce_to(out.grad, b.shape)

    out.backward_fn = backward
    return out


def mul(a: NodeLike, b: NodeLike) -> Node:
    a, b = _elementwise_pair(a, b, "mul")
    out = Node(a.value * b.value, "mul", (a, b))

    def backward() -> None:
        a.grad += _reduce_to(out.grad * b.value, a.shape)
        b.grad += _reduce_to(out.grad * a.value, b.shape)

    out.backward_fn = backward
    return out


def neg(a: NodeLike) -> Node:
    a = as_node(a)
    out = Node(-a.value, "neg", (a,))

    def backward() -> None:
        a.grad -= out.grad

    out.backward_fn = backward
    return out


def sub(a: NodeLike, b: NodeLike) -> Node:
    return add(a, neg(b))


def exp(a: NodeLike) -> Node:
    a = as_node(a)
    out = Node(np.exp(a.value), "exp", (a,))

    def backward() -> None:
        a.grad += out.grad * out.value

    out.backward_fn = backward
    return out


def log(a: NodeLike) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        raise AutodiffError("log of a nonpositive value")
    out = Node(np.log(a.value), "log", (a,))

    def backward() -> None:
        a.grad += out.grad / a.value

    out.backward_fn = backward
    return out


def relu(a: NodeLike) -> Node:
    a = as_node(a)
    # subgradient at 0 is 0
    mask = a.value > 0
    out = Node(np.where(mask, a.value, 0.0), "relu", (a,))

    def backward() -> None:
        a.grad += out.grad * mask

    out.backward_fn = backward
    return out


def sigmoid(a: NodeLike) -> Node:
    a = as_node(a)
    out = Node(special.expit(a.value), "sigmoid", (a,))

    def backward() -> None:
        a.grad += out.grad * out.value * (1.0 - out.value)

    out.backward_fn = backward
    return out


def log_sigmoid(a: NodeLike) -> Node:
    """log(sigmoid(a)) without underflow for large negative a"""
    a = as_node(a)
    out = Node(special.log_expit(a.value), "log_sigmoid", (a,))

    def backward() -> None:
        a.grad += out.grad * special.expit(-a.value)

    out.backward_fn = backward
    return out


def stack(nodes: Sequence[NodeLike]) -> Node:
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise AutodiffError("stack of an empty list")
    shapes = {n.shape for n in nodes}
    if len(shapes) != 1:
        raise AutodiffError(f"stack: mixed shapes {sorted(shapes)}")
    out = Node(np.stack([n.value for n in nodes]), "stack", nodes)

    def backward() -> None:
        for i, n in enumerate(nodes):
            n.grad += out.grad[i]

    out.backward_fn = backward
    return out


def logsumexp(x: NodeLike | Sequence[NodeLike], axis: int | None = None) -> Node:
    """log(sum(exp(x))) over all entries or along one axis; a list of scalar nodes is stacked first"""
    if isinstance(x, (list, tuple)):
        if not x:
            raise AutodiffError("logsumexp of an empty list")
        x = stack(x)
    x = as_node(x)
    if x.value.size == 0 or (axis is not None and x.shape[axis] == 0):
        raise AutodiffError("logsumexp over no entries")

    out = Node(special.logsumexp(x.value, axis=axis), "logsumexp", (x,))

    def backward() -> None:
        if axis is None:
            weights = np.exp(x.value - out.value)
            x.grad += out.grad * weights
        else:
            weights = np.exp(x.value - np.expand_dims(out.value, axis))
            x.grad += np.expand_dims(out.grad, axis) * weights

    out.backward_fn = backward
    return out


def log_softmax(x: NodeLike) -> Node:
    """Row-wise log-softmax over the last axis"""
    x = as_node(x)
    if x.shape[-1] == 0:
        raise AutodiffError("log_softmax over no entries")
    norm = special.logsumexp(x.value, axis=-1, keepdims=True)
    out = Node(x.value - norm, "log_softmax", (x,))

    def backward() -> None:
        softmax = np.exp(out.value)
        x.grad += out.grad - softmax * out.grad.sum(axis=-1, keepdims=True)

    out.backward_fn = backward
    return out


def matmul(a: NodeLike, b: NodeLike) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim not in (1, 2) or b.value.ndim not in (1, 2):
        raise AutodiffError("matmul takes vectors and matrices only")
    try:
        value = a.value @ b.value
    except ValueError as e:
        raise AutodiffError(f"matmul: {e}") from None
    out = Node(value, "matmul", (a, b))

    def backward() -> None:
        g = out.grad
        if a.value.ndim == 2 and b.value.ndim == 2:
            a.grad += g @ b.value.T
            b.grad += a.value.T @ g
        elif a.value.ndim == 2:
            a.grad += np.outer(g, b.value)
            b.grad += a.value.T @ g
        elif b.value.ndim == 2:
            a.grad += b.value @ g
            b.grad += np.outer(a.value, g)
        else:
            a.grad += g * b.value
            b.grad += g * a.value

    out.backward_fn = backward
    return out


def affine(x: NodeLike, w: NodeLike, b: NodeLike) -> Node:
    """x @ w.T + b for x of shape (n, d) or (d,), w (h, d), b (h,)"""
    x, w, b = as_node(x), as_node(w), as_node(b)
    if w.value.ndim != 2 or b.shape != (w.shape[0],) or x.shape[-1:] != w.shape[1:]:
        raise AutodiffError(f"affine: shapes x{x.shape} w{w.shape} b{b.shape} do not fit")
    out = Node(x.value @ w.value.T + b.value, "affine", (x, w, b))

    def backward() -> None:
        g = out.grad
        x.grad += g @ w.value
        if g.ndim == 2:
            w.grad += g.T @ x.value
            b.grad += g.sum(axis=0)
        else:
            w.grad += np.outer(g, x.value)
            b.grad += g

    out.backward_fn = backward
    return out


def take(x: NodeLike, indices: int | Sequence[int], axis: int = 0) -> Node:
    """Selects entries along one axis; an int index drops that axis"""
    x = as_node(x)
    positions = np.asarray(indices, dtype=np.intp)
    out = Node(np.take(x.value, positions, axis=axis), "take", (x,))

    def backward() -> None:
        g = out.grad if positions.ndim else np.expand_dims(out.grad, axis)
        target = np.moveaxis(x.grad, axis, 0)
        np.add.at(target, np.atleast_1d(positions), np.moveaxis(g, axis, 0))

    out.backward_fn = backward
    return out


def take_along(x: NodeLike, indices: Sequence[int]) -> Node:
    """Row-wise pick: out[i] = x[i, indices[i]] for a 2-d x"""
    x = as_node(x)
    index = np.asarray(indices, dtype=np.intp)
    if x.value.ndim != 2 or index.shape != (x.shape[0],):
        raise AutodiffError(f"take_along: shapes x{x.shape} indices{index.shape} do not fit")
    rows = np.arange(x.shape[0])
    out = Node(x.value[rows, index], "take_along", (x,))

    def backward() -> None:
        np.add.at(x.grad, (rows, index), out.grad)

    out.backward_fn = backward
    return out


def sum(x: NodeLike, axis: int | None = None) -> Node:  # noqa: A001
    x = as_node(x)
    out = Node(np.sum(x.value, axis=axis), "sum", (x,))

    def backward() -> None:
        g = out.grad if axis is None else np.expand_dims(out.grad, axis)
        x.grad += np.broadcast_to(g, x.shape)

    out.backward_fn = backward
    return out


def mean(x: NodeLike, axis: int | None = None) -> Node:
    x = as_node(x)
    count = x.value.size if axis is None else x.shape[axis]
    if count == 0:
        raise AutodiffError("mean over no entries")
    return mul(sum(x, axis), 1.0 / count)


@dataclass
class Tape:
    """Nodes of one forward evaluation, every parent listed before its children"""

    nodes: list[Node]

    @staticmethod
    def record(root: Node) -> "Tape":
        order = []
        state = {}  # id -> 1 while on the stack, 2 when finished
        stack_ = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            key = id(node)
            if expanded:
                state[key] = 2
                order.append(node)
                continue
            if state.get(key) == 2:
                continue
            if state.get(key) == 1:
                raise AutodiffError(f"Cycle detected at {node!r}")
            state[key] = 1
            stack_.append((node, True))
            for parent in node.parents:
                parent_state = state.get(id(parent))
                if parent_state == 1:
                    raise AutodiffError(f"Cycle detected at {parent!r}")
                if parent_state is None:
                    stack_.append((parent, False))
        return Tape(order)

    def replay(self) -> None:
        for node in reversed(self.nodes):
            if node.backward_fn is not None:
                node.backward_fn()


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Fills .grad of every node under root with d(root)/d(node).

    Gradients are reset first, so repeated calls on one graph give the same
    result. Returns the gradients of the trainable leaves.
    """
    if root.value.size != 1:
        raise AutodiffError(f"backward needs a scalar root, got shape {root.shape}")

    tape = Tape.record(root)
    for node in tape.nodes:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    tape.replay()

    return {
        node: node.grad for node in tape.nodes if not node.parents and node.requires_grad
    }


GRAD_CHECK_FLOOR = 1e-8


def grad_check(
    f: Callable,
    point: np.ndarray | Sequence[np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max relative error between backward gradients and central differences.

    The error of each entry is |numeric - exact| / max(GRAD_CHECK_FLOOR, |numeric| + |exact|).

    ``f`` receives one leaf node when ``point`` is a single array, or a list
    of leaves when ``point`` is a sequence of arrays, and returns a scalar node.
    """
    if h <= 0:
        raise AutodiffError(f"Step must be positive, got {h}")

    single = isinstance(point, (np.ndarray, float, int))
    arrays = [np.array(point, dtype=np.float64)] if single else [
        np.array(p, dtype=np.float64) for p in point
    ]

    def evaluate(values: list[np.ndarray]) -> tuple[Node, list[Node]]:
        leaves = [Node(v) for v in values]
        root = f(leaves[0] if single else leaves)
        if not np.all(np.isfinite(root.value)):
            raise AutodiffError("Function value is not finite")
        return root, leaves

    root, leaves = evaluate([a.copy() for a in arrays])
    backward(root)
    analytic = [leaf.grad.reshape(-1) for leaf in leaves]

    worst = 0.0
    for array, grads in zip(arrays, analytic):
        flat = array.reshape(-1)
        for i in range(flat.size):
            origin = flat[i]
            flat[i] = origin + h
            upper = evaluate([a.copy() for a in arrays])[0].item()
            flat[i] = origin - h
            lower = evaluate([a.copy() for a in arrays])[0].item()
            flat[i] = origin

            numeric = (upper - lower) / (2.0 * h)
            exact = float(grads[i])
            error = abs(numeric - exact) / max(GRAD_CHECK_FLOOR, abs(numeric) + abs(exact))
            worst = max(worst, error)
    return worst
