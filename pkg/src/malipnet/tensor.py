"""Dense tensors with reverse-mode automatic differentiation.

Storage is float32 by default. Reductions accumulate in float64 and cast
back. The working precision can be raised with :func:`precision`, which is
what the finite-difference checker uses.
"""

from __future__ import annotations

import contextlib
import math
from collections import OrderedDict

import numpy as np

_state = {"grad": True, "dtype": np.float32}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def precision(dtype):
    """Set the dtype used for newly created tensors inside the block."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


def grad_enabled():
    return _state["grad"]


def default_dtype():
    return _state["dtype"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- metadata -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # -- autodiff -------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable ``leaf.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)


def _topological_order(root):
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


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _state["dtype"]
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    """Wrap an op result, recording the graph edge only when needed."""
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _result_dtype(*tensors):
    return np.result_type(*[t.data.dtype for t in tensors])


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    dt = grad.dtype
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.reshape(shape).astype(dt, copy=False)


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise binary ----------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    dt = _result_dtype(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape).astype(dt, copy=False), _unbroadcast(g, b.shape).astype(dt, copy=False)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    dt = _result_dtype(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape).astype(dt, copy=False), (-_unbroadcast(g, b.shape)).astype(dt, copy=False)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    dt = _result_dtype(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape).astype(dt, copy=False) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape).astype(dt, copy=False) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    dt = _result_dtype(a, b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape).astype(dt, copy=False) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape).astype(dt, copy=False)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _make(a.data / b.data, (a, b), backward)


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def matmul(a, b):
    """Matrix product with numpy semantics for stacked (batched) operands."""
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"linear: input width {x.shape[-1]} does not match weight {weight.shape}"
        )
    out = matmul(x, transpose(weight, (1, 0)))
    return out + bias if bias is not None else out


# -- elementwise unary -----------------------------------------------------

def sigmoid(x, margin=0.0):
    """Logistic function; ``margin`` > 0 keeps the output inside [margin, 1 - margin]."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    if margin:
        np.clip(out, margin, 1.0 - margin, out=out)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward)


def tanh(x):
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), backward)


def relu(x):
    mask = x.data > 0
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return _make(out, (x,), backward)


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,))


def sqrt(x):
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2.0 * out),))


def elementwise(x, kind, other=None):
    """Dispatch by name: sigmoid, tanh, relu (unary) or mul, add (binary)."""
    unary = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
    binary = {"mul": mul, "add": add}
    if kind in unary:
        return unary[kind](x)
    if kind in binary:
        if other is None:
            raise ValueError(f"elementwise '{kind}' needs a second operand")
        return binary[kind](x, other)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- reductions ------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g, shape, axes, keepdims):
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def backward(g):
        return (np.ascontiguousarray(_expand_reduced(g, x.shape, axes, keepdims)),)

    return _make(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    out = x.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def backward(g):
        return (np.ascontiguousarray(_expand_reduced(g, x.shape, axes, keepdims)) / count,)

    return _make(out, (x,), backward)


def tmax(x, axis=None, keepdims=False):
    """Max reduction; the gradient goes to the first maximal element."""
    axes = _norm_axis(axis, x.ndim)
    keep = [a for a in range(x.ndim) if a not in axes]
    perm = keep + list(axes)
    moved = np.transpose(x.data, perm)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if keepdims:
        out = out.reshape([1 if a in axes else n for a, n in enumerate(x.shape)])

    def backward(g):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, arg[..., None], g.reshape(lead + (1,)), axis=-1)
        gm = gflat.reshape(moved.shape)
        return (np.transpose(gm, np.argsort(perm)),)

    return _make(out, (x,), backward)


def softmax(x, axis=-1):
    return exp(log_softmax(x, axis))


def log_softmax(x, axis=-1):
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted.astype(np.float64)).sum(axis=axis, keepdims=True))
    out = (shifted - lse).astype(d.dtype)

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype),)

    return _make(out, (x,), backward)


# -- shape ops -------------------------------------------------------------

def reshape(x, shape):
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    out = np.transpose(x.data, axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, index):
    out = x.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward)


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(out, tensors, backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward)


def unstack(x, axis=0):
    """Split along ``axis`` into a list of views sharing one backward edge each."""
    return [getitem(x, (slice(None),) * (axis % x.ndim) + (i,)) for i in range(x.shape[axis])]


def embedding(weight, ids):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValueError(f"token id out of range [0, {weight.shape[0]})")
    out = weight.data[ids]

    def backward(g):
        full = np.zeros(weight.shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _make(out, (weight,), backward)


# -- convolution and pooling -------------------------------------------------

def _as_tuple(v, n):
    if isinstance(v, int):
        return (v,) * n
    v = tuple(v)
    if len(v) != n:
        raise ValueError(f"expected {n} extents, got {v}")
    return v


def _out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv(x, weight, bias=None, dims=None, stride=1, padding=0):
    """N-d cross-correlation (``dims`` in 1, 2, 3) via an im2col matmul.

    ``x`` is (B, C_in, *spatial); ``weight`` is (C_out, C_in, *kernel).
    """
    if dims is None:
        dims = weight.ndim - 2
    if weight.ndim != dims + 2:
        raise ValueError(f"conv{dims}d: weight rank {weight.ndim} != {dims + 2}")
    if x.ndim != dims + 2:
        raise ValueError(f"conv{dims}d: input rank {x.ndim} != {dims + 2}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv{dims}d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}"
        )
    stride = _as_tuple(stride, dims)
    padding = _as_tuple(padding, dims)
    kernel = weight.shape[2:]
    B, C = x.shape[:2]
    spatial = x.shape[2:]
    out_sp = tuple(_out_extent(n, k, s, p) for n, k, s, p in zip(spatial, kernel, stride, padding))
    if any(o <= 0 for o in out_sp):
        raise ValueError(f"conv{dims}d: empty output for input {x.shape} and kernel {kernel}")
    Cout = weight.shape[0]

    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in padding]) if any(padding) else x.data
    K = math.prod(kernel)
    P = math.prod(out_sp)

    def window(offs):
        return (slice(None), slice(None)) + tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offs, stride, out_sp)
        )

    # cols: (B, C, *kernel, *out_sp) gathered one kernel offset at a time
    cols = np.empty((B, C) + kernel + out_sp, dtype=xp.dtype)
    for offs in np.ndindex(*kernel):
        cols[(slice(None), slice(None)) + offs] = xp[window(offs)]
    cols = cols.reshape(B, C * K, P)
    wmat = weight.data.reshape(Cout, C * K)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape((B, Cout) + out_sp)

    parents = (x, weight) + ((bias,) if bias is not None else ())

    def backward(g):
        gm = g.reshape(B, Cout, P)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0, dtype=np.float64)
            gw = gw.astype(g.dtype).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gm).reshape((B, C) + kernel + out_sp)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for offs in np.ndindex(*kernel):
                gxp[window(offs)] += gcols[(slice(None), slice(None)) + offs]
            crop = tuple(slice(p, p + n) for p, n in zip(padding, spatial))
            gx = gxp[(slice(None), slice(None)) + crop]
        grads = (gx, gw)
        if bias is not None:
            grads += (gm.sum(axis=(0, 2), dtype=np.float64).astype(g.dtype),)
        return grads

    return _make(out, parents, backward)


def pool(x, mode, window, stride=None):
    """Max or average pooling over the trailing ``len(window)`` axes.

    Max-pool backward sends the gradient to the first maximum of each
    window in row-major order.
    """
    dims = len(window)
    window = tuple(window)
    stride = window if stride is None else _as_tuple(stride, dims)
    spatial = x.shape[-dims:]
    if any(w > n for w, n in zip(window, spatial)):
        raise ValueError(f"pool window {window} larger than input extents {spatial}")
    lead = x.shape[:-dims]
    axes = tuple(range(x.ndim - dims, x.ndim))
    win = np.lib.stride_tricks.sliding_window_view(x.data, window, axis=axes)
    win = win[(slice(None),) * len(lead) + tuple(slice(None, None, s) for s in stride)]
    out_sp = win.shape[len(lead) : len(lead) + dims]
    flat = win.reshape(win.shape[: len(lead) + dims] + (-1,))
    wsize = flat.shape[-1]

    if mode == "max":
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    elif mode == "avg":
        arg = None
        out = flat.mean(axis=-1, dtype=np.float64).astype(x.data.dtype)
    else:
        raise ValueError(f"unknown pool mode {mode!r}")

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for k, offs in enumerate(np.ndindex(*window)):
            sl = tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offs, stride, out_sp))
            idx = (Ellipsis,) + sl
            if mode == "max":
                gx[idx] += g * (arg == k)
            else:
                gx[idx] += g / wsize
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), backward)


# -- parameters ------------------------------------------------------------

class ParameterStore:
    """Ordered name -> Tensor registry; the unit of checkpointing.

    Entries registered with ``trainable=False`` (e.g. batch-norm running
    statistics) are checkpointed but skipped by :meth:`parameters`.
    """

    def __init__(self):
        self._entries = OrderedDict()
        self._frozen = set()

    def add(self, name, value, trainable=True):
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float32), requires_grad=trainable, name=name)
        self._entries[name] = t
        if not trainable:
            self._frozen.add(name)
        return t

    def __getitem__(self, name):
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def items(self):
        return self._entries.items()

    def names(self):
        return list(self._entries)

    def is_trainable(self, name):
        return name not in self._frozen

    def parameters(self):
        return [(n, t) for n, t in self._entries.items() if n not in self._frozen]

    def view(self, prefix):
        return StoreView(self, prefix)

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def state(self):
        """Name -> float32 array snapshot, in registration order."""
        return OrderedDict((n, t.data.astype(np.float32)) for n, t in self._entries.items())

    def load_state(self, arrays):
        missing = set(self._entries) - set(arrays)
        extra = set(arrays) - set(self._entries)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, arr in arrays.items():
            t = self._entries[n]
            if tuple(arr.shape) != t.shape:
                raise ValueError(f"{n}: shape {tuple(arr.shape)} != {t.shape}")
            t.data = np.array(arr, dtype=np.float32)


class StoreView:
    """Prefix-scoped access into a :class:`ParameterStore`."""

    def __init__(self, store, prefix):
        self.store = store
        self.prefix = prefix

    def __getitem__(self, name):
        return self.store[f"{self.prefix}.{name}"]

    def __contains__(self, name):
        return f"{self.prefix}.{name}" in self.store

    def add(self, name, value, trainable=True):
        return self.store.add(f"{self.prefix}.{name}", value, trainable)

    def view(self, prefix):
        return StoreView(self.store, f"{self.prefix}.{prefix}")


def check_finite(named_arrays):
    """Raise FloatingPointError naming the first non-finite array."""
    for name, arr in named_arrays:
        if arr is not None and not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in {name}")
