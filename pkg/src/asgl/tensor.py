"""A small numpy-backed tensor with tape-based reverse-mode differentiation.

Only the operations the model graph needs are provided. Every op records
its parents and a closure that maps the output gradient to parent
gradients; ``Tensor.backward`` replays the tape in reverse topological
order. First-order only.

Precision is global: float64 by default (test mode), float32 for training
speed via ``set_precision("f32")``.
"""

from __future__ import annotations

import contextlib
import hashlib
import threading

import numpy as np

from .errors import DimensionError, NumericError

_DTYPES = {"f64": np.float64, "f32": np.float32}
_state = threading.local()


def _dtype():
    return getattr(_state, "dtype", np.float64)


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


def _note_branch(pattern):
    branches = getattr(_state, "branches", None)
    if branches is not None:
        branches.update(np.ascontiguousarray(pattern).tobytes())


@contextlib.contextmanager
def track_branches():
    """Hash which side of its kink every non-smooth op evaluated inside the
    block landed on (sign for relu/leaky/sqrt, argmax for max/min)."""
    prev = getattr(_state, "branches", None)
    digest = hashlib.blake2b(digest_size=16)
    _state.branches = digest
    try:
        yield digest
    finally:
        _state.branches = prev


def set_precision(mode):
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {sorted(_DTYPES)}")
    _state.dtype = _DTYPES[mode]


def get_precision():
    return "f32" if _dtype() == np.float32 else "f64"


@contextlib.contextmanager
def precision(mode):
    prev = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(prev)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal instead")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for a {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward)


def broadcast_add_bias(x, bias):
    """Add a bias vector along the trailing (channel) axis."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"bias of shape {bias.shape} does not match channels of {x.shape}")
    return add(x, bias)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward)


# ---------------------------------------------------------------- pointwise

def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    _note_branch(pos)
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    pos = x.data > 0
    _note_branch(pos)
    scale = np.where(pos, 1.0, slope).astype(x.data.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x):
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    """Square root whose derivative at exactly zero is taken as zero."""
    x = as_tensor(x)
    _note_branch(x.data > 0)
    y = np.sqrt(x.data)

    def backward(g):
        safe = np.where(y > 0, y, 1.0)
        return (np.where(y > 0, g / (2.0 * safe), 0.0),)

    return _make(y, (x,), backward)


def power(x, p):
    x = as_tensor(x)
    y = np.power(x.data, p)
    return _make(y, (x,), lambda g: (g * p * np.power(x.data, p - 1),))


def where(cond, x, fill):
    """Keep ``x`` where ``cond`` holds, a constant ``fill`` elsewhere."""
    x = as_tensor(x)
    cond = np.broadcast_to(np.asarray(cond, dtype=bool), x.shape)
    return _make(np.where(cond, x.data, fill), (x,), lambda g: (np.where(cond, g, 0.0),))


# ---------------------------------------------------------------- reductions

def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is not None:
        axis = _check_axis(axis, x.ndim)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(data, (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[_check_axis(axis, x.ndim)]
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def max_(x, axis, keepdims=False):
    """Max along ``axis``. The gradient goes to the first maximal index."""
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    arg = np.argmax(x.data, axis=axis)
    _note_branch(arg)
    idx = np.expand_dims(arg, axis)
    data = np.take_along_axis(x.data, idx, axis=axis)
    if not keepdims:
        data = np.squeeze(data, axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        out = np.zeros_like(x.data)
        np.put_along_axis(out, idx, g, axis=axis)
        return (out,)

    return _make(data, (x,), backward)


def min_(x, axis, keepdims=False):
    return mul(max_(mul(x, -1.0), axis, keepdims), -1.0)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return _make(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a1, a2):
    axes = list(range(as_tensor(x).ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    axis = _check_axis(axis, tensors[0].ndim)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concat shapes {[t.shape for t in tensors]} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("stack of an empty list")
    nd = tensors[0].ndim + 1
    if not -nd <= axis < nd:
        raise DimensionError(f"axis {axis} out of range for stacking {nd - 1}-d tensors")
    axis %= nd
    expanded =[reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------- softmax family

def softmax(x, axis=-1, mask=None):
    """Numerically stabilised softmax. Entries where ``mask`` is False get exactly 0."""
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    if x.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis, shape {x.shape}")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise DimensionError("softmax row with every entry masked out")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def softmax_rows(x, mask=None):
    x = as_tensor(x)
    if x.ndim < 1 or x.data.size == 0:
        raise DimensionError(f"softmax_rows needs at least one row and column, got {x.shape}")
    return softmax(x, axis=-1, mask=mask)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    sm = np.exp(y)
    return _make(y, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------- convolutions

def conv_1x1(x, weight, bias=None):
    """Per-position channel mixing: ``x[..., c_in] @ weight[c_in, c_out] (+ bias)``."""
    out = matmul(x, weight)
    return out if bias is None else broadcast_add_bias(out, bias)


_PADDINGS = ("zero", "replicate", "circular")


def _temporal_index(n, ksize, padding):
    half = ksize // 2
    pos = np.arange(n)[:, None] + np.arange(ksize)[None, :] - half
    if padding == "circular":
        return pos % n, np.ones_like(pos, dtype=bool)
    valid = (pos >= 0) & (pos < n)
    if padding == "replicate":
        return np.clip(pos, 0, n - 1), np.ones_like(pos, dtype=bool)
    return np.clip(pos, 0, n - 1), valid


def conv1d_temporal(x, kernel, axis=1, padding="zero"):
    """Same-length 1-D cross-correlation along ``axis``.

    ``kernel`` is either ``(K,)`` (one kernel shared by all channels) or
    ``(C, K)`` (depthwise, C = trailing channel extent). K must be odd.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    axis = _check_axis(axis, x.ndim)
    if padding not in _PADDINGS:
        raise ValueError(f"padding must be one of {_PADDINGS}, got {padding!r}")
    if axis == x.ndim - 1 and kernel.ndim == 2:
        raise DimensionError("depthwise kernel needs a channel axis distinct from the time axis")
    ksize = kernel.shape[-1]
    if ksize % 2 != 1:
        raise DimensionError(f"temporal kernel length must be odd, got {ksize}")
    if kernel.ndim == 2 and kernel.shape[0] != x.shape[-1]:
        raise DimensionError(f"depthwise kernel {kernel.shape} does not match channels of {x.shape}")
    n = x.shape[axis]
    idx, valid = _temporal_index(n, ksize, padding)

    xt = np.moveaxis(x.data, axis, 0)  # (T, ..., C)
    gathered = xt[idx] * valid.reshape(valid.shape + (1,) * (xt.ndim - 1))  # (T, K, ..., C)
    kshape = (1, ksize) + (1,) * (xt.ndim - 2)
    if kernel.ndim == 1:
        kb = kernel.data.reshape(kshape + (1,))
    else:
        kb = kernel.data.T.reshape(kshape + (kernel.shape[0],))
    out = np.moveaxis((gathered * kb).sum(axis=1), 0, axis)

    def backward(g):
        gt = np.moveaxis(g, axis, 0)[:, None]  # (T, 1, ..., C)
        gx = None
        if x.requires_grad:
            contrib = gt * kb * valid.reshape(valid.shape + (1,) * (xt.ndim - 1))
            acc = np.zeros_like(xt)
            np.add.at(acc, idx.ravel(), contrib.reshape((-1,) + xt.shape[1:]))
            gx = np.moveaxis(acc, 0, axis)
        gk = None
        if kernel.requires_grad:
            prod = gathered * gt  # (T, K, ..., C)
            if kernel.ndim == 1:
                gk = prod.sum(axis=tuple(i for i in range(prod.ndim) if i != 1))
            else:
                red = tuple(i for i in range(prod.ndim) if i not in (1, prod.ndim - 1))
                gk = prod.sum(axis=red).T
        return gx, gk

    return _make(out, (x, kernel), backward)


# ---------------------------------------------------------------- gradient check

def branch_signature(f, inputs):
    """Digest of the branches taken by non-smooth ops while evaluating ``f``."""
    inputs = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    with no_grad(), track_branches() as digest:
        f(inputs)
    return digest.digest()


def grad_check(f, inputs, eps=1e-5, max_coords=None, seed=0, require_smooth=False):
    """Relative error between analytic and central-difference gradients.

    ``f`` maps the list of input tensors to a scalar tensor. The error is the
    worst ``|analytic - numeric|`` over every probed coordinate of every
    input, divided by the largest gradient magnitude over all inputs (floored
    at 1e-12). A shared scale keeps inputs whose gradient is structurally
    zero, or tiny next to the others, from turning rounding noise in the
    difference quotient into a spurious failure.
    ``max_coords`` limits the coordinates probed per input to a seeded random
    subset; the scale still uses the full analytic gradient.
    With ``require_smooth`` a perturbation that moves any relu/leaky/max
    across its kink raises ``NumericError`` instead of returning a
    meaningless difference quotient.
    """
    inputs = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(inputs)
    if out.data.size != 1:
        raise DimensionError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite at the check point")
    out.backward()
    base = branch_signature(f, inputs) if require_smooth else None
    rng = np.random.default_rng(seed)
    worst, scale = 0.0, 1e-12
    for t in inputs:
        analytic = (np.zeros_like(t.data) if t.grad is None else t.grad).reshape(-1)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(len(coords))
        with no_grad():
            for n, i in enumerate(coords):
                orig = flat[i]
                vals = []
                for x in (orig + eps, orig - eps):
                    flat[i] = x
                    if base is None:
                        vals.append(f(inputs).item())
                        continue
                    with track_branches() as digest:
                        vals.append(f(inputs).item())
                    if digest.digest() != base:
                        flat[i] = orig
                        raise NumericError(f"perturbing {t.name or 'input'}[{i}] by {eps:g} crosses a kink")
                flat[i] = orig
                numeric[n] = (vals[0] - vals[1]) / (2.0 * eps)
        if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
            raise NumericError("non-finite gradient encountered during grad_check")
        scale = max(scale, np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        worst = max(worst, float(np.abs(analytic[coords] - numeric).max(initial=0.0)))
    return worst / scale
