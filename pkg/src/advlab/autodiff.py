"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float32 by default, float64 available for
high-precision checking). Every operation that consumes a tensor with
``requires_grad`` records its parents and a backward closure on the output,
forming a dynamic graph that is rebuilt on every forward pass.
``Tensor.backward()`` walks that graph once in reverse topological order and
accumulates gradients additively into ``.grad``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NonFiniteError, UsageError

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Globally toggle NaN/Inf detection at operation boundaries."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


@contextmanager
def debug_checks():
    """Enable NaN/Inf detection for the duration of the block."""
    global _DEBUG_CHECKS
    prev = _DEBUG_CHECKS
    _DEBUG_CHECKS = True
    try:
        yield
    finally:
        _DEBUG_CHECKS = prev


class Tensor:
    """N-dimensional array with optional gradient tracking.

    ``data`` is always a numpy float array. ``grad`` stays ``None`` until a
    backward pass deposits a gradient; repeated backward passes accumulate.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # ------------------------------------------------------------------
    # basic introspection
    # ------------------------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._non_scalar()

    def _non_scalar(self):
        raise UsageError("item() requires a single-element tensor")

    def detach(self):
        """Copy of this tensor's value with no graph attachment."""
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op})"

    # ------------------------------------------------------------------
    # backward machinery
    # ------------------------------------------------------------------

    def backward(self):
        """Propagate d(self)/d(ancestor) into every tracked ancestor's grad.

        ``self`` must be a scalar participating in the graph. Contributions
        from multiple consumers are summed; calling backward again without
        clearing grads adds another full contribution.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not track gradients")
        order = _topo_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                node._backward(g, pending)

    # operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division is not provided; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        data = self.data[key]

        def backward(g, pending):
            full = np.zeros_like(self.data)
            full[key] = g
            _accumulate(pending, self, full)

        return _from_op(data, (self,), backward, "getitem")

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


# ----------------------------------------------------------------------
# graph helpers
# ----------------------------------------------------------------------


def _topo_order(root):
    """Ancestors-first ordering of the gradient-requiring subgraph."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accumulate(pending, parent, contribution):
    if not parent.requires_grad:
        return
    key = id(parent)
    current = pending.get(key)
    pending[key] = contribution if current is None else current + contribution


def _from_op(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._op = op
    if out.requires_grad:
        out._parents = tuple(p for p in parents if p.requires_grad or p._parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")
    return out


def _coerce(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False, dtype=dtype)


def _check_dtypes(a, b, op):
    if a.dtype != b.dtype:
        raise UsageError(f"{op}: mixed dtypes {a.dtype.name} and {b.dtype.name}")


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------
# elementwise and broadcasting primitives
# ----------------------------------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _check_dtypes(a, b, "add")

    def backward(g, pending):
        if a.requires_grad:
            _accumulate(pending, a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(pending, b, _unbroadcast(g, b.shape))

    return _from_op(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _check_dtypes(a, b, "mul")

    def backward(g, pending):
        if a.requires_grad:
            _accumulate(pending, a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(pending, b, _unbroadcast(g * a.data, b.shape))

    return _from_op(a.data * b.data, (a, b), backward, "mul")


def relu(x):
    mask = x.data > 0

    def backward(g, pending):
        _accumulate(pending, x, g * mask)

    return _from_op(np.where(mask, x.data, x.data.dtype.type(0)), (x,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Gaussian error linear unit (tanh form)."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d * d * d)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward(g, pending):
        sech2 = 1.0 - t * t
        local = 0.5 * (1.0 + t) + 0.5 * d * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        _accumulate(pending, x, g * local.astype(d.dtype))

    return _from_op(out.astype(d.dtype), (x,), backward, "gelu")


# ----------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------


def reshape(x, shape):
    old_shape = x.data.shape
    data = x.data.reshape(shape)

    def backward(g, pending):
        _accumulate(pending, x, g.reshape(old_shape))

    return _from_op(data, (x,), backward, "reshape")


def transpose(x, axes=None):
    data = np.transpose(x.data, axes)
    if axes is None:
        inverse = None
    else:
        inverse = tuple(np.argsort(axes))

    def backward(g, pending):
        _accumulate(pending, x, np.transpose(g, inverse))

    return _from_op(data, (x,), backward, "transpose")


def broadcast_to(x, shape):
    data = np.broadcast_to(x.data, shape)

    def backward(g, pending):
        _accumulate(pending, x, _unbroadcast(g, x.shape))

    return _from_op(data, (x,), backward, "broadcast_to")


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat requires at least one tensor")
    for t in tensors[1:]:
        _check_dtypes(tensors[0], t, "concat")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g, pending):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(pending, t, g[tuple(index)])

    return _from_op(data, tuple(tensors), backward, "concat")


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------


def _reduction_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x, axis=None, keepdims=False):
    axes = _reduction_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g, pending):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(pending, x, np.broadcast_to(g, x.shape).copy())

    return _from_op(data, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    axes = _reduction_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g, pending):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(pending, x, np.broadcast_to(g, x.shape) / x.data.dtype.type(count))

    return _from_op(data, (x,), backward, "mean")


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------


def matmul(a, b):
    """Matrix product with stacked-batch broadcasting; operands must be >= 2-D."""
    _check_dtypes(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul requires 2-D or higher operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g, pending):
        if a.requires_grad:
            _accumulate(pending, a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        if b.requires_grad:
            _accumulate(pending, b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return _from_op(data, (a, b), backward, "matmul")


def embedding_lookup(table, indices):
    """Rows of ``table`` gathered by an integer index array."""
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise UsageError("embedding_lookup indices must be integers")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise DimensionError("embedding_lookup index out of range")
    data = table.data[indices]

    def backward(g, pending):
        full = np.zeros_like(table.data)
        np.add.at(full, indices, g)
        _accumulate(pending, table, full)

    return _from_op(data, (table,), backward, "embedding_lookup")


# ----------------------------------------------------------------------
# normalization and losses
# ----------------------------------------------------------------------


def softmax(x, axis=-1):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g, pending):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(pending, x, out * (g - inner))

    return _from_op(out, (x,), backward, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({width},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g, pending):
        _accumulate(pending, bias, g.reshape(-1, width).sum(axis=0))
        _accumulate(pending, gain, (g * xhat).reshape(-1, width).sum(axis=0))
        gx = g * gain.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        _accumulate(pending, x, inv_std * (gx - m1 - xhat * m2))

    return _from_op(out, (x, gain, bias), backward, "layer_norm")


def log_softmax_values(logits):
    """Numerically-stable log-softmax on a plain array (no graph)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects logits of shape (N, K), got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise UsageError(f"cross_entropy label out of range [0, {k})")
    log_p = log_softmax_values(logits.data)
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean(dtype=logits.dtype)

    def backward(g, pending):
        grad = np.exp(log_p)
        grad[rows, labels] -= 1.0
        _accumulate(pending, logits, grad * (g / logits.dtype.type(n)))

    return _from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def per_sample_cross_entropy(logits_data, labels):
    """Per-row loss values on plain arrays; companion to ``cross_entropy``."""
    log_p = log_softmax_values(np.asarray(logits_data))
    return -log_p[np.arange(log_p.shape[0]), np.asarray(labels)]


# ----------------------------------------------------------------------
# spatial primitives
# ----------------------------------------------------------------------


def conv2d(x, kernel, stride=1, padding=0):
    """2-D cross-correlation of NCHW input with an FCKhKw kernel bank.

    Internally runs channels-last so the im2col gather and the col2im
    scatter both move C-contiguous runs; the heavy lifting is one GEMM each
    for the output, the kernel gradient, and the input gradient.
    """
    _check_dtypes(x, kernel, "conv2d")
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernel expects {ck}")
    if stride < 1 or padding < 0:
        raise UsageError("conv2d requires stride >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1

    xp = np.zeros((n, hp, wp, c), dtype=x.dtype)
    xp[:, padding : padding + h, padding : padding + w, :] = x.data.transpose(0, 2, 3, 1)
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (N, H*, W*, C, kh, kw)
    windows = windows[:, ::stride, ::stride].transpose(0, 1, 2, 4, 5, 3)  # (..., kh, kw, C)
    cols = windows.reshape(n * h_out * w_out, kh * kw * c)
    w_mat = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0)).reshape(kh * kw * c, f)
    out = (cols @ w_mat).reshape(n, h_out, w_out, f).transpose(0, 3, 1, 2)

    def backward(g, pending):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h_out * w_out, f)
        if kernel.requires_grad:
            gw = (cols.T @ g_mat).reshape(kh, kw, c, f).transpose(3, 2, 0, 1)
            _accumulate(pending, kernel, np.ascontiguousarray(gw))
        if x.requires_grad:
            g_cols = (g_mat @ w_mat.T).reshape(n, h_out, w_out, kh, kw, c)
            gxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, u : u + stride * h_out : stride, v : v + stride * w_out : stride, :] += g_cols[
                        :, :, :, u, v, :
                    ]
            gx = gxp[:, padding : padding + h, padding : padding + w, :]
            _accumulate(pending, x, np.ascontiguousarray(gx.transpose(0, 3, 1, 2)))

    return _from_op(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")


def max_pool2d(x, size=2, stride=None):
    """Max pooling over square windows of an NCHW tensor."""
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects a 4-D tensor, got {x.shape}")
    stride = size if stride is None else stride
    n, c, h, w = x.shape
    if size > h or size > w:
        raise DimensionError(f"max_pool2d window {size} larger than input {h}x{w}")
    h_out = (h - size) // stride + 1
    w_out = (w - size) // stride + 1
    windows = sliding_window_view(x.data, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, h_out, w_out, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    tiled = stride == size and h % size == 0 and w % size == 0

    def backward(g, pending):
        if tiled:
            # non-overlapping windows cover the input exactly: scatter by reshape
            gwin = np.zeros((n, c, h_out, w_out, size * size), dtype=g.dtype)
            np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
            gx = (
                gwin.reshape(n, c, h_out, w_out, size, size)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w)
            )
        else:
            ni, ci, hi, wi = np.indices((n, c, h_out, w_out))
            gx = np.zeros_like(x.data)
            np.add.at(gx, (ni, ci, hi * stride + arg // size, wi * stride + arg % size), g)
        _accumulate(pending, x, np.ascontiguousarray(gx))

    return _from_op(np.ascontiguousarray(out), (x,), backward, "max_pool2d")
