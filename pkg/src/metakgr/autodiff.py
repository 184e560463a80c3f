"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient the result records its parents and a closure that pushes the upstream
gradient back to them. Node ids come from a global counter, so sorting the
reachable nodes by id recovers execution order; :func:`backward` walks that
order in reverse and visits each node once.

Ops on tensors that do not require gradients record nothing, which makes
no-grad rollouts cheap while sharing one code path with training.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import InvalidArgument

LOG_FLOOR = 1e-12
_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def backward(self):
        backward(self)

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731


def tensor(data, requires_grad=False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _node(value, parents, backward_fn):
    """Wrap an op result, recording history only when some parent needs it."""
    if any(p.requires_grad for p in parents):
        return Tensor(value, True, parents, backward_fn)
    return Tensor(value)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidArgument(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_check("add", a, b)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _node(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_check("sub", a, b)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))
    return _node(a.data - b.data, (a, b), back)


def neg(a) -> Tensor:
    a = tensor(a)
    return _node(-a.data, (a,), lambda g: _accumulate(a, -g))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_check("mul", a, b)

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _node(a.data * b.data, (a, b), back)


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: _accumulate(a, g * mask))


def sigmoid(a) -> Tensor:
    a = tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (a,), lambda g: _accumulate(a, g * out * (1.0 - out)))


def tanh(a) -> Tensor:
    a = tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: _accumulate(a, g * (1.0 - out * out)))


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: _accumulate(a, g * out))


def softplus(a) -> Tensor:
    """``log(1 + exp(a))`` computed without overflow."""
    a = tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    slope = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (a,), lambda g: _accumulate(a, g * slope))


def log(a) -> Tensor:
    """Natural log with inputs floored at LOG_FLOOR; the floored region has zero gradient."""
    a = tensor(a)
    safe = np.maximum(a.data, LOG_FLOOR)
    live = a.data > LOG_FLOOR
    return _node(np.log(safe), (a,), lambda g: _accumulate(a, np.where(live, g / safe, 0.0)))


# ----------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))
    return _node(out, (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / count)


def softmax(a, axis=-1) -> Tensor:
    a = tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        _accumulate(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))
    return _node(out, (a,), back)


def log_softmax(a, axis=-1) -> Tensor:
    a = tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def back(g):
        _accumulate(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))
    return _node(out, (a,), back)


# ----------------------------------------------------------------- structure

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise InvalidArgument(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise InvalidArgument(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))
    return _node(out, (a, b), back)


def concat(tensors, axis=-1) -> Tensor:
    ts = [tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
                t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise InvalidArgument(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])
    return _node(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), back)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = tensor(a)
    return _node(np.swapaxes(a.data, -1, -2), (a,),
                 lambda g: _accumulate(a, np.swapaxes(g, -1, -2)))


def gather_rows(table, indices) -> Tensor:
    """Embedding lookup: ``table[indices]`` with shape ``indices.shape + table.shape[1:]``."""
    table = tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise InvalidArgument(f"gather_rows: index out of range for table of shape {table.shape}")

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        _accumulate(table, full)
    return _node(table.data[idx], (table,), back)


def take_along(a, indices, axis=-1) -> Tensor:
    """``np.take_along_axis`` (e.g. pick each row's chosen action)."""
    a = tensor(a)
    idx = np.asarray(indices, dtype=np.int64)

    def back(g):
        # put_along_axis would overwrite repeated indices; add.at sums them
        full = np.zeros_like(a.data)
        grid = list(np.ix_(*[np.arange(n) for n in idx.shape]))
        grid[axis] = idx
        np.add.at(full, tuple(grid), g)
        _accumulate(a, full)
    return _node(np.take_along_axis(a.data, idx, axis=axis), (a,), back)


def index_last(a, indices) -> Tensor:
    """``a[..., indices]`` for an arbitrary integer index array (used for im2col)."""
    a = tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    lead = a.shape[:-1]

    def back(g):
        full = np.zeros((int(np.prod(lead)), a.shape[-1]))
        np.add.at(full, (slice(None), idx), g.reshape((full.shape[0],) + idx.shape))
        _accumulate(a, full.reshape(a.shape))
    return _node(a.data[..., idx], (a,), back)


# ----------------------------------------------------------------- backward

def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable tensor."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise InvalidArgument(f"backward needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        return
    seen, stack, order = {loss._id}, [loss], []
    while stack:
        node = stack.pop()
        order.append(node)
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                seen.add(p._id)
                stack.append(p)
    order.sort(key=lambda n: n._id, reverse=True)
    loss.grad = np.ones_like(loss.data)
    for node in order:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node._backward = None  # each node contributes once; frees closures


def value_and_grad(fn, params):
    """Evaluate ``fn`` on leaf copies of ``params`` and return ``(value, grads)``.

    ``params`` maps names to arrays. Parameters the loss never touches get a
    zero gradient.
    """
    leaves = {name: Tensor(value, requires_grad=True) for name, value in params.items()}
    out = fn(leaves)
    backward(out)
    grads = {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
             for name, leaf in leaves.items()}
    return float(out.data.reshape(-1)[0]), grads


def finite_diff_check(fn, params, eps=1e-5, *, max_coords=None, rng=None, floor=1e-6):
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps a dict of Tensors to a scalar Tensor and must be deterministic.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps coordinates whose true gradient is ~0 from dividing round-off by zero.
    With ``max_coords`` only that many coordinates per tensor are probed.
    """
    if eps <= 0:
        raise InvalidArgument(f"finite-difference step must be positive, got {eps}")
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    _, grads = value_and_grad(fn, params)

    def f():
        return float(fn({k: Tensor(v) for k, v in params.items()}).data.reshape(-1)[0])

    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        g = grads[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = f()
            flat[i] = orig - eps
            down = f()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(g[i] - numeric) / max(abs(g[i]), abs(numeric), floor)
            worst = max(worst, err)
    return worst
