"""Dense float64 arrays with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a closure that maps
the output adjoint to input adjoints.  The graph is built dynamically on
each forward pass; :meth:`Tensor.backward` replays it in reverse
topological order and then drops the recorded closures, so a graph serves
exactly one backward pass.

Broadcasting follows numpy's trailing-dimension alignment; adjoints are
summed back to each operand's shape.
"""
import contextlib

import numpy as np
import scipy.linalg

from .errors import ContractError, DimensionError, DomainError, LinAlgError

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """An n-dimensional array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype == np.uint8 else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __pow__(self, p):
        return pow(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method aliases ---------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    """Wrap ``data`` as an op output; record the graph edge if needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


def _finite(arr, opname):
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{opname} produced a non-finite value")
    return arr


# -- elementwise binary -----------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(_finite(out, "div"), (a, b), bw)


def maximum(a, b):
    """Elementwise max; ties route the adjoint to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    pick_a = a.data >= b.data

    def bw(g):
        return (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _node(np.where(pick_a, a.data, b.data), (a, b), bw)


# -- elementwise unary ------------------------------------------------------
def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _finite(out, "exp")
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a nonpositive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def abs(a):
    # subgradient 0 at the kink
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sign(a):
    """Sign as a constant (zero gradient)."""
    return Tensor(np.sign(as_tensor(a).data))


def pow(a, p):
    """``a ** p`` for a constant real exponent ``p``."""
    a = as_tensor(a)
    if isinstance(p, Tensor):
        return exp(mul(p, log(a)))
    p = float(p)
    if p != int(p) and np.any(a.data < 0):
        raise DomainError("fractional power of a negative value")
    if p < 0 and np.any(a.data == 0):
        raise DomainError("negative power of zero")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data ** p
    _finite(out, "pow")

    def bw(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            d = p * a.data ** (p - 1) if p != 1 else np.ones_like(a.data)
        return (g * np.where(np.isfinite(d), d, 0.0),)

    return _node(out, (a,), bw)


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def bw(g):
        if np.any(out == 0):
            raise DomainError("sqrt gradient at zero")
        return (g * 0.5 / out,)

    return _node(out, (a,), bw)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    out = scipy_expit(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def scipy_expit(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: (g * scipy_expit(x),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# -- linear algebra ---------------------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _node(a.data @ b.data, (a, b), bw)


def transpose(a):
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError("transpose needs rank >= 2")
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def solve(a, b):
    """Solve ``a @ x = b`` for square ``a``.

    The adjoint solves the transposed system instead of forming an inverse:
    ``gb = a^{-T} g`` and ``ga = -gb x^T``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"solve needs a square matrix, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise DimensionError(f"solve: {a.shape} vs right-hand side {b.shape}")
    if not np.all(np.isfinite(a.data)):
        raise LinAlgError("solve: non-finite matrix")
    try:
        lu = scipy.linalg.lu_factor(a.data, check_finite=False)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise LinAlgError(str(exc)) from exc
    if np.any(np.abs(np.diag(lu[0])) < 1e-300):
        raise LinAlgError("solve: singular matrix")
    x = scipy.linalg.lu_solve(lu, b.data, check_finite=False)

    def bw(g):
        gb = scipy.linalg.lu_solve(lu, g, trans=1, check_finite=False)
        ga = -(gb.reshape(len(gb), -1) @ x.reshape(len(x), -1).T)
        return ga, gb

    return _node(x, (a, b), bw)


def solve_triangular(a, b, lower, unit_diagonal=False):
    """Solve ``a @ x = b`` with triangular ``a`` (entries outside the triangle ignored)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or b.shape[0] != a.shape[0]:
        raise DimensionError(f"solve_triangular: {a.shape} vs {b.shape}")
    x = scipy.linalg.solve_triangular(a.data, b.data, lower=lower,
                                      unit_diagonal=unit_diagonal, check_finite=False)

    def bw(g):
        gb = scipy.linalg.solve_triangular(a.data, g, lower=lower, trans=1,
                                           unit_diagonal=unit_diagonal, check_finite=False)
        ga = -(gb.reshape(len(gb), -1) @ x.reshape(len(x), -1).T)
        ga = np.tril(ga, -1 if unit_diagonal else 0) if lower else np.triu(ga, 1 if unit_diagonal else 0)
        return ga, gb

    return _node(_finite(x, "solve_triangular"), (a, b), bw)


# -- shape ops --------------------------------------------------------------
def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx):
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data
    out = a.data[idx]

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None
                for i in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            # basic indexing never aliases, so plain assignment suffices
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out), (a,), bw)


def permute(a, perm, axis=-1):
    """Reorder entries along ``axis`` by the permutation ``perm``."""
    a = as_tensor(a)
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    return _node(np.take(a.data, perm, axis=axis), (a,),
                 lambda g: (np.take(g, inv, axis=axis),))


def diag(v):
    """Square matrix with ``v`` on its diagonal."""
    v = as_tensor(v)
    return _node(np.diag(v.data), (v,), lambda g: (np.diag(g).copy(),))


def tril(a, k=0):
    a = as_tensor(a)
    return _node(np.tril(a.data, k), (a,), lambda g: (np.tril(g, k),))


def triu(a, k=0):
    a = as_tensor(a)
    return _node(np.triu(a.data, k), (a,), lambda g: (np.triu(g, k),))


def take_along_axis(a, indices, axis=-1):
    """``np.take_along_axis`` with an integer index array (not differentiated)."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    out = np.take_along_axis(a.data, indices, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        if indices.shape[axis] == 1:
            np.put_along_axis(full, indices, g, axis=axis)
        else:
            # duplicate indices must accumulate
            ax = axis % a.ndim
            grids = list(np.indices(indices.shape, sparse=True))
            grids[ax] = indices
            np.add.at(full, tuple(grids), g)
        return (full,)

    return _node(out, (a,), bw)


def where(cond, a, b):
    """Select from ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant mask."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    shape = np.broadcast_shapes(cond.shape, a.shape, b.shape)

    def bw(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    out = np.where(cond, a.data, b.data)
    return _node(np.broadcast_to(out, shape).copy(), (a, b), bw)


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty list")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
                t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise DimensionError(f"concat shapes differ: {[t.shape for t in ts]}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw)


def split(a, boundary, axis=-1):
    """Split along ``axis`` at ``boundary`` into a leading and trailing part."""
    a = as_tensor(a)
    if a.ndim == 0:
        raise DimensionError("cannot split a scalar")
    n = a.shape[axis]
    if not 0 < boundary < n:
        raise DimensionError(f"split boundary {boundary} outside (0, {n})")
    ax = axis % a.ndim
    lo = [slice(None)] * a.ndim
    hi = [slice(None)] * a.ndim
    lo[ax] = slice(0, boundary)
    hi[ax] = slice(boundary, None)
    return getitem(a, tuple(lo)), getitem(a, tuple(hi))


def pad_constant(a, before, after, value, axis=-1):
    """Append constant slabs of width ``before``/``after`` along ``axis``."""
    a = as_tensor(a)
    parts = []
    ax = axis % a.ndim
    for width in (before, after):
        shape = list(a.shape)
        shape[ax] = width
        parts.append(Tensor(np.full(shape, value, dtype=a.data.dtype)))
    pieces = ([parts[0]] if before else []) + [a] + ([parts[1]] if after else [])
    return concat(pieces, axis=ax)


# -- reductions -------------------------------------------------------------
def _check_axis(a, axis):
    if axis is None:
        return None
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise DimensionError(f"axis {ax} out of range for rank {a.ndim}")
    return tuple(ax % a.ndim for ax in axes)


def _expand(g, shape, axes, keepdims):
    if axes is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _check_axis(a, axis)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _node(np.asarray(out), (a,), lambda g: (_expand(g, a.shape, axes, keepdims),))


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _check_axis(a, axis)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _node(np.asarray(out), (a,),
                 lambda g: (_expand(g, a.shape, axes, keepdims) / count,))


def logsumexp(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _check_axis(a, axis)
    m = np.max(a.data, axis=axes, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    se = np.exp(a.data - m).sum(axis=axes, keepdims=True)
    out_k = np.log(se) + m
    if keepdims:
        out = out_k
    else:
        out = out_k.reshape(()) if axes is None else np.squeeze(out_k, axis=axes)
    soft = np.exp(a.data - out_k)

    def bw(g):
        return (_expand(g, a.shape, axes, keepdims) * soft,)

    return _node(np.asarray(out), (a,), bw)


def cumsum(a, axis=-1):
    a = as_tensor(a)
    ax = _check_axis(a, axis)[0]

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, ax), axis=ax), ax),)

    return _node(np.cumsum(a.data, axis=ax), (a,), bw)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    e = exp(a - shift)
    return e / sum(e, axis=axis, keepdims=True)


def log_softmax(a, axis=-1):
    return a - logsumexp(a, axis=axis, keepdims=True)


# -- backward pass ----------------------------------------------------------
def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d loss / d leaf into ``leaf.grad`` for every recorded leaf.

    ``loss`` must be a scalar produced while gradients were being recorded.
    The graph is released afterwards.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward needs a scalar loss")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node.requires_grad = False
