"""Small reverse-mode differentiation core over dense numpy arrays.

Every primitive returns a :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to the parents' gradients. Calling
:meth:`Tensor.backward` walks that record in reverse topological order.
The record is never mutated by the backward pass, so replaying it gives the
same gradients every time.
"""
import contextlib
import math
import threading

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording parents (inference / finite differences)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def backward(self, grad=None):
        """Populate ``.grad`` on every leaf reachable from this tensor.

        Gradients are recomputed from scratch on each call (no accumulation
        across calls).
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return self

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _check_finite(data, op):
    # sum() propagates NaN/Inf and is cheaper than isfinite().all()
    if data.dtype.kind == "f" and not math.isfinite(float(data.sum())):
        if not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite values produced by {op}")


def _make(data, parents, backward, op):
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# elementwise -----------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a):
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _sigmoid_grad(y):
    return y * (1.0 - y)


def sigmoid(a):
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (a,), lambda g: (g * _sigmoid_grad(y),), "sigmoid")


def relu(a):
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0), (a,), lambda g: (g * pos,), "relu")


def dropout(a, p, rng):
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None."""
    if p <= 0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# shape -------------------------------------------------------------------------

def reshape(a, shape):
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def take(table, idx):
    """Row gather ``table[idx]`` (embedding lookup); ``idx`` is an int array of any shape."""
    idx = np.asarray(idx)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"index out of range for table with {n} rows")

    flat = idx.reshape(-1)
    order = np.argsort(flat, kind="stable")
    sorted_idx = flat[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]]) if flat.size else flat

    def backward(g):
        out = np.zeros_like(table.data)
        if flat.size:
            rows = g.reshape(flat.size, *table.shape[1:])[order]
            out[sorted_idx[starts]] = np.add.reduceat(rows, starts, axis=0)
        return (out,)

    return _make(table.data[idx], (table,), backward, "take")


def pick(a, idx):
    """``a[..., idx[...]]`` along the last axis, one element per row."""
    idx = np.asarray(idx)[..., None]

    def backward(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return _make(np.take_along_axis(a.data, idx, axis=-1)[..., 0], (a,), backward, "pick")


# reductions ----------------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def masked_mean(x, mask, axis=1):
    """Mean of ``x`` over ``axis`` counting only positions where ``mask`` is true.

    ``mask`` has the shape of ``x`` without its trailing feature axis.
    """
    m = np.asarray(mask, dtype=x.dtype)
    counts = m.sum(axis=axis, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("masked_mean over a slice with no valid positions")
    w = (m / counts)[..., None]
    feat_axis = axis if axis >= 0 else axis - 1
    return sum(mul(x, w), axis=feat_axis)


# linear algebra ---------------------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy batching rules (covers batched matmul)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 2 and a.ndim > 2:
        # (..., k) @ (k, n): fold leading axes so weight gradients are one GEMM
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])

        def backward2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make((a2 @ b.data).reshape(*lead, b.shape[-1]), (a, b), backward2, "matmul")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


# normalisation / probabilities ---------------------------------------------------------

def softmax(a, axis=-1, mask=None):
    """Row softmax with max subtraction.

    ``mask`` (broadcastable boolean) removes entries from the normaliser; a
    slice with no allowed entry yields all zeros.
    """
    x = a.data
    if mask is None:
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
    else:
        mask = np.broadcast_to(mask, x.shape)
        m = np.where(mask, x, -np.inf).max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0)
        e = np.exp(np.where(mask, x - m, -np.inf))
        s = e.sum(axis=axis, keepdims=True)
        y = e / np.where(s > 0, s, 1)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=axis, keepdims=True)
    y = z - np.log(s)
    p = e / s

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), backward, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm affine shape mismatch: expected ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def l2_normalize(a, axis=-1):
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("cannot normalise a zero-norm vector")
    y = a.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (a,), backward, "l2_normalize")


def cosine_similarity(a, b):
    """Row-wise cosine of paired vectors along the last axis."""
    return sum(mul(l2_normalize(a), l2_normalize(b)), axis=-1)


# verification -------------------------------------------------------------------------

def grad_check(loss_fn, params, eps=1e-5, n_samples=64, seed=0, names=None):
    """Compare analytic gradients with central differences.

    ``loss_fn(params)`` builds a scalar Tensor, or a dict of named scalar
    Tensors, from the dict of leaf tensors ``params``. Tensors with more than
    ``n_samples`` entries are checked on a random subset of coordinates.
    Returns ``{param: max relative error}``, or ``{loss: {param: error}}``
    when ``loss_fn`` returns a dict.
    """
    names = list(params) if names is None else list(names)
    for n in names:
        if params[n].data.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, {n} is {params[n].data.dtype}")
        params[n].data = np.ascontiguousarray(params[n].data)
        params[n].requires_grad = True

    out = loss_fn(params)
    single = not isinstance(out, dict)
    losses = {"loss": out} if single else out

    def values():
        with no_grad():
            res = loss_fn(params)
        res = {"loss": res} if single else res
        return {k: float(v.data) for k, v in res.items()}

    if values() != {k: float(v.data) for k, v in losses.items()}:
        raise RuntimeError("loss_fn is not deterministic: two forward passes disagree")

    analytic = {}
    for key, loss in losses.items():
        loss.backward()
        analytic[key] = {n: (params[n].grad.copy() if params[n].grad is not None
                             else np.zeros_like(params[n].data)) for n in names}
        for n in names:
            params[n].grad = None

    rng = np.random.default_rng(seed)
    report = {key: {} for key in losses}
    for n in names:
        flat = params[n].data.reshape(-1)
        if flat.size <= n_samples:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=n_samples, replace=False))
        worst = dict.fromkeys(losses, 0.0)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = values()
            flat[c] = orig - eps
            down = values()
            flat[c] = orig
            for key in losses:
                cd = (up[key] - down[key]) / (2 * eps)
                an = float(analytic[key][n].reshape(-1)[c])
                err = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
                worst[key] = max(worst[key], err)
        for key in losses:
            report[key][n] = worst[key]
    return report["loss"] if single else report
