"""Tape-based reverse-mode autodiff over numpy arrays.

Every differentiable quantity in the package is a :class:`Tensor`.  A tensor
that carries a node handle was produced by an operation recorded on a
:class:`Tape`; a tensor without one is a constant and operations on constants
are evaluated eagerly without recording anything.

Input gradients (needed by the eikonal and normal losses) are obtained with
:class:`Dual` values: a primal tensor plus a stack of tangent tensors, one per
seed direction.  The tangent arithmetic is itself built from tape operations,
so a gradient computed this way can be differentiated again with
:meth:`Tape.backward` (forward-over-reverse).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float32
SOFTPLUS_BETA = 100.0


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x if dtype is None or x.dtype == dtype else x.astype(dtype)
    if isinstance(x, np.generic) and dtype is None and x.dtype.kind == "f":
        # 0-d results come back from numpy as scalars; keep their precision
        return np.asarray(x)
    return np.asarray(x, dtype=dtype or DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_priority__ = 1000

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = _as_array(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def constant(x, dtype=None) -> Tensor:
    return Tensor(_as_array(x, dtype))


def _wrap(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(_as_array(x, dtype))


class Gradients(dict):
    """Map from node handle to gradient array, filled for every leaf."""

    def of(self, t: Tensor) -> np.ndarray:
        if t.node is None:
            raise KeyError("constant tensors have no gradient")
        return self[t.node]


class Tape:
    """Append-only record of operations, in topological order by construction."""

    def __init__(self):
        self._kinds: list[str] = []
        self._parents: list[tuple[int | None, ...]] = []
        self._vjps: list[Callable | None] = []
        self._shapes: list[tuple[int, ...]] = []
        self._dtypes: list = []
        self._leaves: list[int] = []
        self._finalized = False

    def __len__(self) -> int:
        return len(self._kinds)

    @property
    def finalized(self) -> bool:
        return self._finalized

    def reset(self) -> None:
        self.__init__()

    def leaf(self, value) -> Tensor:
        if self._finalized:
            raise TapeError("tape already consumed by backward(); call reset()")
        arr = _as_array(value)
        node = self._append("leaf", (), None, arr)
        self._leaves.append(node)
        return Tensor(arr, self, node)

    def _append(self, kind, parents, vjp, out) -> int:
        self._kinds.append(kind)
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._shapes.append(out.shape)
        self._dtypes.append(out.dtype)
        return len(self._kinds) - 1

    def record(self, kind: str, inputs: Sequence[Tensor], out: np.ndarray,
               vjp: Callable[[np.ndarray], tuple]) -> Tensor:
        if self._finalized:
            raise TapeError("tape already consumed by backward(); call reset()")
        parents = tuple(t.node if t.tape is self else None for t in inputs)
        node = self._append(kind, parents, vjp, out)
        return Tensor(out, self, node)

    def backward(self, loss: Tensor) -> Gradients:
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self._finalized:
            raise TapeError("backward() already called on this tape; call reset() first")
        if loss.tape is not None and loss.tape is not self:
            raise TapeError("loss was recorded on a different tape")
        self._finalized = True
        n = len(self._kinds)
        grads: list[np.ndarray | None] = [None] * n
        if loss.node is not None:
            grads[loss.node] = np.ones(loss.shape, dtype=loss.dtype)
        for i in range(n - 1, -1, -1):
            g = grads[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            parent_grads = vjp(g)
            for p, pg in zip(self._parents[i], parent_grads):
                if p is None or pg is None:
                    continue
                if grads[p] is None:
                    grads[p] = pg
                else:
                    grads[p] = grads[p] + pg
            if self._kinds[i] != "leaf":
                grads[i] = None
            self._vjps[i] = None
        out = Gradients()
        for leaf in self._leaves:
            g = grads[leaf]
            out[leaf] = g if g is not None else np.zeros(self._shapes[leaf], self._dtypes[leaf])
        return out


def record_op(kind: str, inputs: Sequence[Tensor], out: np.ndarray,
              vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    """Register ``out`` as the result of ``kind`` applied to ``inputs``.

    Returns a constant when no input is on a tape.  ``vjp`` maps the output
    cotangent to one cotangent (or None) per input.
    """
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise TapeError(f"{kind}: inputs live on different tapes")
    if tape is None:
        return Tensor(out)
    return tape.record(kind, inputs, out, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(kind, a: np.ndarray, b: np.ndarray):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---- elementwise binary -------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a, b.data if isinstance(b, Tensor) else None)
    b = _wrap(b, a.data)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return record_op("add", (a, b), a.data + b.data,
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _wrap(a, b.data if isinstance(b, Tensor) else None)
    b = _wrap(b, a.data)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return record_op("sub", (a, b), a.data - b.data,
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _wrap(a, b.data if isinstance(b, Tensor) else None)
    b = _wrap(b, a.data)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.node is not None else None
        gb = _unbroadcast(g * ad, bd.shape) if b.node is not None else None
        return ga, gb

    return record_op("mul", (a, b), ad * bd, vjp)


def div(a, b) -> Tensor:
    a = _wrap(a, b.data if isinstance(b, Tensor) else None)
    b = _wrap(b, a.data)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.node is not None else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.node is not None else None
        return ga, gb

    return record_op("div", (a, b), out, vjp)


def maximum(a, b) -> Tensor:
    a = _wrap(a, b.data if isinstance(b, Tensor) else None)
    b = _wrap(b, a.data)
    _check_broadcast("maximum", a.data, b.data)
    pick_a = a.data >= b.data
    return record_op("maximum", (a, b), np.where(pick_a, a.data, b.data),
                     lambda g: (_unbroadcast(g * pick_a, a.shape),
                                _unbroadcast(g * ~pick_a, b.shape)))


# ---- elementwise unary --------------------------------------------------

def neg(a: Tensor) -> Tensor:
    return record_op("neg", (a,), -a.data, lambda g: (-g,))


def sin(a: Tensor) -> Tensor:
    x = a.data
    return record_op("sin", (a,), np.sin(x), lambda g: (g * np.cos(x),))


def cos(a: Tensor) -> Tensor:
    x = a.data
    return record_op("cos", (a,), np.cos(x), lambda g: (-g * np.sin(x),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record_op("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return record_op("log", (a,), np.log(x), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return record_op("square", (a,), x * x, lambda g: (2 * g * x,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return record_op("sqrt", (a,), out, lambda g: (g / (2 * out),))


def abs_(a: Tensor) -> Tensor:
    x = a.data
    return record_op("abs", (a,), np.abs(x), lambda g: (g * np.sign(x),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return record_op("relu", (a,), np.maximum(x, 0), lambda g: (g * (x > 0),))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return record_op("sigmoid", (a,), out, lambda g: (g * out * (1 - out),))


def softplus(a: Tensor, beta: float = SOFTPLUS_BETA) -> Tensor:
    x = a.data
    bx = x * x.dtype.type(beta)
    e = np.exp(-np.abs(bx))
    out = (np.maximum(bx, 0) + np.log1p(e)) / x.dtype.type(beta)
    # d/dx softplus = sigmoid(beta x), from the same exponential
    slope = np.where(bx >= 0, 1, e) / (1 + e)
    return record_op("softplus", (a,), out, lambda g: (g * slope,))


# ---- linear algebra / structure ----------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and ``b`` of shape (k, m)."""
    a = _wrap(a)
    b = _wrap(b, a.data)
    ad, bd = a.data, b.data
    if bd.ndim != 2 or ad.ndim < 1 or ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")

    def vjp(g):
        ga = g @ bd.T if a.node is not None else None
        gb = None
        if b.node is not None:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, bd.shape[1])
        return ga, gb

    return record_op("matmul", (a, b), ad @ bd, vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got {a.shape}")
    return record_op("transpose", (a,), a.data.T, lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from None
    return record_op("reshape", (a,), out, lambda g: (g.reshape(src),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {src} to {shape}") from None
    return record_op("broadcast", (a,), np.ascontiguousarray(out),
                     lambda g: (_unbroadcast(g, src),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis
               for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    out = a.data[idx]
    basic = _is_basic_index(idx)
    src_shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record_op("slice", (a,), np.array(out, copy=basic) if basic else out, vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes "
                         + ", ".join(str(x.shape) for x in arrays)) from None
    splits = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return record_op("concat", tensors, out,
                     lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack: incompatible shapes "
                         + ", ".join(str(t.shape) for t in tensors)) from None
    n = len(tensors)
    return record_op("stack", tensors, out,
                     lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def scatter(base, idx, values: Tensor) -> Tensor:
    """Copy of constant ``base`` with rows ``idx`` replaced by ``values``."""
    base = _as_array(base.data if isinstance(base, Tensor) else base, values.dtype)
    out = base.copy()
    try:
        out[idx] = values.data
    except ValueError:
        raise ShapeError(f"scatter: cannot place {values.shape} into {base.shape}") from None
    return record_op("scatter", (values,), out, lambda g: (g[idx],))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` (a constant boolean mask) holds, else ``b``."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a = _wrap(a, b.data if isinstance(b, Tensor) else None)
    b = _wrap(b, a.data)
    out = np.where(cond, a.data, b.data)
    return record_op("where", (a, b), out,
                     lambda g: (_unbroadcast(np.where(cond, g, 0), a.shape),
                                _unbroadcast(np.where(cond, 0, g), b.shape)))


# ---- reductions (64-bit accumulation) ----------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = a.data
    out = np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    src = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(x.dtype),)

    return record_op("sum", (a,), np.asarray(out), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = a.data
    count = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    if count == 0:
        raise ShapeError("mean of an empty tensor")
    out = np.mean(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    src = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, src) / count).astype(x.dtype),)

    return record_op("mean", (a,), np.asarray(out), vjp)


def norm(a: Tensor, axis: int = -1, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    """Euclidean norm along ``axis``; ``eps`` guards the derivative at zero."""
    x = a.data
    out = np.sqrt(np.sum(x.astype(np.float64) ** 2, axis=axis, keepdims=True)).astype(x.dtype)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * x / np.maximum(out, eps) if eps else g * x / out,)

    return record_op("norm", (a,), out if keepdims else np.squeeze(out, axis), vjp)


# ---- forward-mode tangents recorded on the tape ------------------------

class Dual:
    """A primal tensor with ``m`` stacked tangents of shape ``(m, *primal.shape)``.

    Tangents are linear in the seed; each operation below propagates them with
    ordinary tape operations so the result stays reverse-differentiable.
    """

    __slots__ = ("primal", "tangent")

    def __init__(self, primal: Tensor, tangent: Tensor):
        primal, tangent = _wrap(primal), _wrap(tangent)
        if tangent.shape[1:] != primal.shape:
            raise ShapeError(f"dual: tangent {tangent.shape} does not match primal {primal.shape}")
        self.primal = primal
        self.tangent = tangent

    @property
    def shape(self):
        return self.primal.shape

    @property
    def num_seeds(self) -> int:
        return self.tangent.shape[0]

    def matmul(self, w: Tensor) -> "Dual":
        return Dual(matmul(self.primal, w), matmul(self.tangent, w))

    def add_const(self, b) -> "Dual":
        """Add a term that does not depend on the seeded input."""
        return Dual(add(self.primal, b), self.tangent)

    def add(self, other: "Dual") -> "Dual":
        return Dual(add(self.primal, other.primal), add(self.tangent, other.tangent))

    def scale(self, c) -> "Dual":
        return Dual(mul(self.primal, c), mul(self.tangent, c))

    def softplus(self, beta: float = SOFTPLUS_BETA) -> "Dual":
        z = self.primal
        slope = sigmoid(mul(z, beta))
        return Dual(softplus(z, beta), mul(self.tangent, slope))

    def relu(self) -> "Dual":
        mask = (self.primal.data > 0).astype(self.primal.dtype)
        return Dual(relu(self.primal), mul(self.tangent, mask))

    def sigmoid(self) -> "Dual":
        s = sigmoid(self.primal)
        return Dual(s, mul(self.tangent, mul(s, sub(1.0, s))))

    def sin(self) -> "Dual":
        return Dual(sin(self.primal), mul(self.tangent, cos(self.primal)))

    def cos(self) -> "Dual":
        return Dual(cos(self.primal), mul(self.tangent, neg(sin(self.primal))))

    def getitem(self, idx) -> "Dual":
        t_idx = (slice(None),) + (idx if isinstance(idx, tuple) else (idx,))
        return Dual(getitem(self.primal, idx), getitem(self.tangent, t_idx))

    @staticmethod
    def concat(duals: Sequence["Dual"], axis: int = -1) -> "Dual":
        if axis >= 0:
            raise ValueError("Dual.concat expects a negative axis")
        return Dual(concat([d.primal for d in duals], axis),
                    concat([d.tangent for d in duals], axis))


def seed_input(x, dims: int | None = None) -> Dual:
    """Dual for points ``x`` of shape (N, d) seeded with the standard basis."""
    x = _wrap(x)
    n, d = x.shape
    dims = d if dims is None else dims
    seeds = np.zeros((dims, n, d), dtype=x.dtype)
    for k in range(dims):
        seeds[k, :, k] = 1
    return Dual(x, Tensor(seeds))


def input_gradient(fn: Callable[[Dual], Dual], x) -> tuple[Tensor, Tensor]:
    """Value and spatial gradient of a scalar field at points ``x`` (N, 3).

    ``fn`` maps a Dual of shape (N, 3) to a Dual of shape (N, 1) or (N,).
    The gradient is assembled from one tangent pass per coordinate axis and
    remains differentiable with respect to anything recorded on the tape.
    """
    d = seed_input(x)
    out = fn(d)
    shape = out.primal.shape
    if not (len(shape) == 1 or (len(shape) == 2 and shape[1] == 1)):
        raise ShapeError(f"input_gradient needs a scalar field, got output shape {shape}")
    n = shape[0]
    value = reshape(out.primal, (n,))
    grad = transpose(reshape(out.tangent, (d.num_seeds, n)))
    return value, grad
