"""Reverse-mode automatic differentiation over dense numpy arrays.

Values are computed eagerly when a node is built.  Every backward rule is
written in terms of the same differentiable ops, so the gradients returned by
:func:`grad` with ``create_graph=True`` are themselves graph nodes and can be
differentiated again.  This is what lets a training loop backpropagate
through an unrolled multi-step gradient editor.

Example::

    >>> x = Tensor(3.0, requires_grad=True)
    >>> (g,) = grad(x * x * x, [x], create_graph=True)
    >>> float(grad(g, [x])[0].data)
    18.0
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Creation order only: a node can never be an ancestor of an older node, which
# lets grad() prune history it cannot reach.
_sequence = itertools.count()


class AutodiffError(ValueError):
    """Base error for graph construction and differentiation."""


class ShapeError(AutodiffError):
    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, shapes))}")


class DTypeError(AutodiffError):
    def __init__(self, op: str, *dtypes):
        self.op = op
        self.dtypes = dtypes
        super().__init__(f"{op}: mixed dtypes {', '.join(map(str, dtypes))}")


class DomainError(AutodiffError):
    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"{op}: {message}")


class Tensor:
    """A value in a computation graph.

    Leaves are created directly; every op returns a new Tensor that records
    its parents only when at least one parent requires a gradient.
    """

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None, *, op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            if dtype is None and arr.dtype.kind in "iub":
                arr = arr.astype(np.float64)
            else:
                raise AutodiffError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = next(_sequence)

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def parents(self) -> tuple["Tensor", ...]:
        return self._parents

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}, op={self.op!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _pair(op: str, a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    if not isinstance(b, Tensor):
        b = _lift(b, a)
    if a.dtype != b.dtype:
        raise DTypeError(op, a.dtype, b.dtype)
    return a, b


def _broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def const(value, dtype=np.float64) -> Tensor:
    return Tensor(np.array(value, dtype=dtype))


def stop_gradient(x: Tensor) -> Tensor:
    """Same value, no parents: derivatives do not pass through."""
    return Tensor(x.data, op="stop_gradient")


# -- shape plumbing --------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _node(data, (x,), lambda g, xs, out: (reshape(g, src),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("transpose", x.shape)
    return _node(x.data.T, (x,), lambda g, xs, out: (transpose(g),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", src, shape) from None
    return _node(data, (x,), lambda g, xs, out: (sum_to(g, src),), "broadcast_to")


def sum_to(x: Tensor, shape) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (inverse of broadcast_to)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and x.shape[lead + i] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src = x.shape
    return _node(data, (x,), lambda g, xs, out: (broadcast_to(g, src),), "sum_to")


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair("add", a, b)
    _broadcast("add", a, b)

    def backward(g, xs, out):
        return sum_to(g, xs[0].shape), sum_to(g, xs[1].shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair("sub", a, b)
    _broadcast("sub", a, b)

    def backward(g, xs, out):
        return sum_to(g, xs[0].shape), sum_to(neg(g), xs[1].shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def neg(x: Tensor) -> Tensor:
    return _node(-x.data, (x,), lambda g, xs, out: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = _pair("mul", a, b)
    _broadcast("mul", a, b)

    def backward(g, xs, out):
        x, y = xs
        return sum_to(mul(g, y), x.shape), sum_to(mul(g, x), y.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair("div", a, b)
    _broadcast("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div", "division by zero")

    def backward(g, xs, out):
        x, y = xs
        return sum_to(div(g, y), x.shape), sum_to(neg(div(mul(g, out), y)), y.shape)

    return _node(a.data / b.data, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(x.data)
    return _node(data, (x,), lambda g, xs, out: (mul(g, out),), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log", "argument must be positive")
    return _node(np.log(x.data), (x,), lambda g, xs, out: (div(g, xs[0]),), "log")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise DomainError("sqrt", "argument must be non-negative")
    data = np.sqrt(x.data)
    if x.requires_grad and np.any(data == 0):
        raise DomainError("sqrt", "derivative undefined at 0")
    return _node(data, (x,), lambda g, xs, out: (div(mul(g, 0.5), out),), "sqrt")


def tanh(x: Tensor) -> Tensor:
    def backward(g, xs, out):
        return (mul(g, sub(1.0, mul(out, out))),)

    return _node(np.tanh(x.data), (x,), backward, "tanh")


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(x.dtype)
    return _node(np.where(x.data > 0, x.data, 0).astype(x.dtype), (x,), lambda g, xs, out: (mul(g, Tensor(mask)),), "relu")


def sign(x: Tensor) -> Tensor:
    """Elementwise sign; its derivative is defined as zero everywhere."""
    return _node(np.sign(x.data), (x,), lambda g, xs, out: (None,), "sign")


def sigmoid(x: Tensor) -> Tensor:
    return div(1.0, add(1.0, exp(neg(x))))


# -- reductions and linear algebra ----------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    src = x.shape
    data = x.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if (axes is None or i in axes) else n for i, n in enumerate(src))

    def backward(g, xs, out):
        return (broadcast_to(reshape(g, kept), src),)

    return _node(np.asarray(data), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = x.data.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise DomainError("mean", "mean over an empty axis")
    return div(sum(x, axis=axes, keepdims=keepdims), float(count))


def max_over_axis(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; ties route the gradient to the first maximum."""
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    mask = np.zeros_like(x.data)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
    data = np.max(x.data, axis=axis, keepdims=keepdims)
    kept = tuple(1 if i == axis else n for i, n in enumerate(x.shape))
    src = x.shape

    def backward(g, xs, out):
        return (mul(broadcast_to(reshape(g, kept), src), Tensor(mask)),)

    return _node(np.asarray(data), (x,), backward, "max_over_axis")


def matmul(a, b) -> Tensor:
    a, b = _pair("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g, xs, out):
        x, y = xs
        return matmul(g, transpose(y)), matmul(transpose(x), g)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def gather_rows(x: Tensor, index) -> Tensor:
    """``out[i] = x[i, index[i]]`` for a 2-D ``x``."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError("gather_rows", x.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise DomainError("gather_rows", "index out of range")
    rows = np.arange(x.shape[0])
    mask = np.zeros_like(x.data)
    mask[rows, index] = 1.0
    n = x.shape[0]

    def backward(g, xs, out):
        return (mul(reshape(g, (n, 1)), Tensor(mask)),)

    return _node(x.data[rows, index], (x,), backward, "gather_rows")


def take_columns(x: Tensor, columns) -> Tensor:
    """Select columns of a 2-D tensor, as a product with a 0/1 selector."""
    columns = np.asarray(columns, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError("take_columns", x.shape)
    selector = np.zeros((x.shape[1], columns.size), dtype=x.dtype)
    selector[columns, np.arange(columns.size)] = 1.0
    return matmul(x, Tensor(selector))


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log-softmax along the last axis."""
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g, xs, out):
        return (sub(g, mul(exp(out), sum(g, axis=-1, keepdims=True))),)

    return _node(data, (x,), backward, "log_softmax")


def eval(node: Tensor) -> np.ndarray:  # noqa: A001
    """Value of a node.  Graphs are evaluated eagerly, so this is a lookup."""
    return node.data


# -- differentiation --------------------------------------------------------

def _reaching(root: Tensor, targets: set[int], horizon: int) -> list[Tensor]:
    """Nodes on some path from ``root`` down to a target, in topological order."""
    reaches: dict[int, bool] = {}
    order: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            hit = key in targets or any(reaches.get(id(p), False) for p in node._parents)
            reaches[key] = hit
            if hit:
                order.append(node)
            continue
        if key in reaches:
            continue
        if not node.requires_grad or node._seq < horizon:
            reaches[key] = False
            continue
        reaches[key] = False  # provisional; DAG so no cycles
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in reaches:
                stack.append((p, False))
    return order


def grad(root: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``root`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the results are graph nodes that can be
    differentiated again; otherwise they are constants.  Tensors that do not
    influence ``root`` get a zero gradient.
    """
    if root.shape != ():
        raise AutodiffError(f"grad: root must be a scalar, got shape {root.shape}")
    wrt = list(wrt)
    for w in wrt:
        if not w.requires_grad:
            raise AutodiffError("grad: every wrt tensor must have requires_grad=True")
    targets = {id(w) for w in wrt}
    horizon = min((w._seq for w in wrt), default=0)
    order = _reaching(root, targets, horizon)

    grads: dict[int, Tensor] = {}
    if order:
        grads[id(root)] = Tensor(np.ones((), dtype=root.dtype))
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        if create_graph:
            inputs, out = node._parents, node
        else:
            inputs, out = tuple(p.detach() for p in node._parents), node.detach()
        parent_grads = node._backward(g, inputs, out)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if not create_graph and pg.requires_grad:
                pg = pg.detach()
            key = id(parent)
            grads[key] = pg if key not in grads else add(grads[key], pg)

    result = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = Tensor(np.zeros(w.shape, dtype=w.dtype))
        elif g.shape != w.shape:
            g = reshape(g, w.shape)
        result.append(g)
    return result


def check_gradient(
    fn: Callable[[dict[str, Tensor]], Tensor],
    point: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> float:
    """Largest relative disagreement between :func:`grad` and central differences.

    ``fn`` maps a dict of leaf tensors to a scalar tensor.  The relative error
    of each coordinate uses ``max(|analytic|, |numeric|, 1e-12)`` as the
    denominator.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = {k: np.array(v, copy=True) for k, v in point.items()}

    def evaluate(values: Mapping[str, np.ndarray]) -> Tensor:
        return fn({k: Tensor(v, requires_grad=True) for k, v in values.items()})

    leaves = {k: Tensor(v, requires_grad=True) for k, v in base.items()}
    root = fn(leaves)
    if not np.all(np.isfinite(root.data)):
        raise AutodiffError("check_gradient: non-finite function value")
    analytic = dict(zip(leaves, (g.data for g in grad(root, list(leaves.values())))))

    worst = 0.0
    for name, value in base.items():
        a = analytic[name]
        if not np.all(np.isfinite(a)):
            raise AutodiffError(f"check_gradient: non-finite gradient for {name!r}")
        for i in np.ndindex(value.shape):
            up = dict(base)
            down = dict(base)
            up[name] = value.copy()
            up[name][i] += h
            down[name] = value.copy()
            down[name][i] -= h
            fu = float(evaluate(up).data)
            fd = float(evaluate(down).data)
            if not (np.isfinite(fu) and np.isfinite(fd)):
                raise AutodiffError(f"check_gradient: non-finite value near {name}{list(i)}")
            numeric = (fu - fd) / (2 * h)
            analytic_i = float(a[i])
            denom = max(abs(analytic_i), abs(numeric), 1e-12)
            worst = max(worst, abs(analytic_i - numeric) / denom)
    return worst


def grads_to_dict(names: Iterable[str], grads: Iterable[Tensor]) -> dict[str, Tensor]:
    return dict(zip(names, grads))
