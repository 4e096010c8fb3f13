"""Dense tensors with reverse-mode automatic differentiation.

Every primitive builds its output through :func:`_node`, which checks the
result for NaN/Inf and records a closure mapping the output gradient to one
gradient per parent.  ``Tensor.backward`` walks the graph in reverse
topological order and accumulates into leaves that have ``requires_grad``.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..errors import ContractError, NumericError, ShapeError

_state = threading.local()


def _dtype():
    return getattr(_state, "dtype", np.float32)


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors are created with.

    Float32 is the working precision; gradient checks switch to float64 so
    central differences are not swamped by rounding.
    """
    prev = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = _contiguous(data, _dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __len__(self):
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad=True")
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = g.astype(node.data.dtype, copy=True)
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _contiguous(data, dtype):
    # np.ascontiguousarray promotes 0-d input to 1-d; keep scalars scalar
    arr = np.asarray(data, dtype=dtype)
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


def _raise_item(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = _contiguous(data, _dtype())
    out.grad = None
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


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


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ---------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), backward, "div")


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


# -- elementwise unary ----------------------------------------------------
def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def silu(a):
    s = _sigmoid(a.data)
    out = a.data * s
    return _node(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _node(out, (a,), backward, "gelu")


# -- linear algebra and shape ---------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul: operands must have at least one dimension")
    squeeze_a = a.ndim == 1
    squeeze_b = b.ndim == 1
    A = a.data[None, :] if squeeze_a else a.data
    B = b.data[:, None] if squeeze_b else b.data
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = A @ B

    def backward(g):
        G = g
        if squeeze_a:
            G = np.expand_dims(G, -2)
        if squeeze_b:
            G = np.expand_dims(G, -1)
        ga = _unbroadcast(G @ np.swapaxes(B, -1, -2), A.shape).reshape(a.shape)
        gb = _unbroadcast(np.swapaxes(A, -1, -2) @ G, B.shape).reshape(b.shape)
        return ga, gb

    if squeeze_a:
        out = out[..., 0, :]
    if squeeze_b:
        out = out[..., 0]
    return _node(out, (a, b), backward, "matmul")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) or i is None
               for i in items)


def getitem(a, index):
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), backward, "slice")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: empty tensor list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), backward, "concat")


def take(a, indices, axis=0):
    """Gather along ``axis`` with an integer index array (embedding lookup)."""
    indices = np.asarray(indices)
    if indices.size and (indices.min() < -a.shape[axis] or indices.max() >= a.shape[axis]):
        raise ContractError(f"take: index out of range for axis of length {a.shape[axis]}")
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return _node(out, (a,), backward, "take")


def embedding(table, ids):
    return take(table, ids, axis=0)


def take_along(a, indices, axis=-1):
    indices = np.asarray(indices)
    out = np.take_along_axis(a.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        idx = list(np.indices(indices.shape, sparse=True))
        ax = axis % a.ndim
        idx[ax] = indices
        np.add.at(full, tuple(idx), g)
        return (full,)

    return _node(out, (a,), backward, "take_along")


def where(mask, a, b):
    """``a`` where ``mask`` else ``b``; mask is a plain boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        return (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                _unbroadcast(np.where(mask, 0.0, g), b.shape))

    return _node(out, (a, b), backward, "where")


# -- reductions -----------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum_(a, axes, keepdims), 1.0 / n)


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), backward, "log_softmax")


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean and unit variance, no affine.

    A constant row has zero variance and maps to all zeros.
    """
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _node(out, (a,), backward, "layer_norm")


# -- sequence ops ---------------------------------------------------------
def interp_matrix(src_len, dst_len, dtype=None):
    """Weights W (dst_len, src_len) for endpoint-aligned linear interpolation."""
    dtype = dtype or _dtype()
    W = np.zeros((dst_len, src_len), dtype=dtype)
    if src_len == 1 or dst_len == 1:
        W[:, 0] = 1.0
        return W
    pos = np.arange(dst_len) * (src_len - 1) / (dst_len - 1)
    lo = np.minimum(np.floor(pos).astype(int), src_len - 2)
    frac = pos - lo
    W[np.arange(dst_len), lo] = 1.0 - frac
    W[np.arange(dst_len), lo + 1] += frac
    return W


def interpolate_time(a, length, axis=-2):
    """Resample ``a`` to ``length`` steps along ``axis`` by linear interpolation."""
    if length < 1:
        raise ContractError("interpolate_time: target length must be >= 1")
    axis = axis % a.ndim
    src = a.shape[axis]
    if src < 1:
        raise ContractError("interpolate_time: empty source sequence")
    W = interp_matrix(src, length, a.data.dtype)
    moved = np.moveaxis(a.data, axis, -1)
    out = np.moveaxis(moved @ W.T, -1, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, -1) @ W
        return (np.moveaxis(gm, -1, axis),)

    return _node(out, (a,), backward, "interp")


def _windows(x, kernel, stride):
    # x: (B, T, C) already padded -> (B, T_out, kernel, C) view
    B, T, C = x.shape
    t_out = (T - kernel) // stride + 1
    s = x.strides
    return np.lib.stride_tricks.as_strided(
        x, shape=(B, t_out, kernel, C), strides=(s[0], s[1] * stride, s[1], s[2]),
        writeable=False)


def conv1d(x, weight, stride=1, padding=0):
    """Cross-correlation over time. x: (B, T, C_in), weight: (K, C_in, C_out)."""
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with weight {weight.shape}")
    K, Cin, Cout = weight.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    if xp.shape[1] < K:
        raise ShapeError(f"conv1d: sequence of length {x.shape[1]} shorter than kernel {K}")
    cols = _windows(xp, K, stride)
    B, To = cols.shape[:2]
    flat = cols.reshape(B * To, K * Cin)
    out = (flat @ weight.data.reshape(K * Cin, Cout)).reshape(B, To, Cout)

    def backward(g):
        g2 = g.reshape(B * To, Cout)
        gw = (flat.T @ g2).reshape(K, Cin, Cout)
        gcols = (g2 @ weight.data.reshape(K * Cin, Cout).T).reshape(B, To, K, Cin)
        gxp = np.zeros_like(xp)
        for k in range(K):
            gxp[:, k:k + stride * (To - 1) + 1:stride] += gcols[:, :, k]
        gx = gxp[:, padding:padding + x.shape[1]]
        return gx, gw

    return _node(out, (x, weight), backward, "conv1d")


def depthwise_conv1d(x, weight, padding=0):
    """Per-channel conv over time. x: (B, T, C), weight: (K, C); stride 1."""
    if x.ndim != 3 or weight.ndim != 2 or x.shape[2] != weight.shape[1]:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} incompatible with weight {weight.shape}")
    K = weight.shape[0]
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    To = xp.shape[1] - K + 1
    out = np.zeros((x.shape[0], To, x.shape[2]), dtype=x.data.dtype)
    for k in range(K):
        out += xp[:, k:k + To] * weight.data[k]

    def backward(g):
        gw = np.stack([(g * xp[:, k:k + To]).sum(axis=(0, 1)) for k in range(K)])
        gxp = np.zeros_like(xp)
        for k in range(K):
            gxp[:, k:k + To] += g * weight.data[k]
        return gxp[:, padding:padding + x.shape[1]], gw

    return _node(out, (x, weight), backward, "depthwise_conv1d")


# -- composites -----------------------------------------------------------
def l2_normalize(a, axis=-1, eps=1e-12):
    norm = sqrt(sum_(a * a, axis, keepdims=True) + eps)
    return a / norm


def masked_fill(a, mask, value):
    return where(mask, np.asarray(value, dtype=a.data.dtype), a)
