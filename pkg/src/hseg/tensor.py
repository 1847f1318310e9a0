"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when any
operand requires a gradient::

    with Tape() as tape:
        y = conv2d(x, w, b, padding=1)
        loss = y.sum()
    grads = tape.backward(loss)      # {leaf tensor: ndarray}

Tensors are never mutated after construction. Data is float32 unless an
explicit dtype is passed (the finite-difference checks run in float64).
"""

import os
import threading

import numpy as np

from hseg import kernels
from hseg.errors import DimensionError, GeometryError, UsageError

DEBUG_CHECKS = os.environ.get("HSEG_DEBUG", "") not in ("", "0")

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or np.float32, copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr, requires_grad):
        # internal constructor: takes ownership of a freshly computed array
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        return t

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)
    dtype = property(lambda self: self.data.dtype)

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    A tape belongs to the thread that opened it and must not be shared while
    recording.
    """

    def __init__(self):
        self.nodes = []
        self._produced = set()
        self._leaves = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def watch(self, *tensors):
        """Register leaves so they receive (possibly zero) gradients."""
        for t in tensors:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)

    def _record(self, out, inputs, backward):
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)
        self._produced.add(id(out))
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss):
        return backward(self, loss)


def backward(tape, loss):
    """Gradients of scalar ``loss`` w.r.t. every requires_grad leaf on ``tape``.

    Contributions from repeated uses of a tensor are summed. Leaves recorded
    on the tape that do not influence ``loss`` get zero arrays.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise UsageError(f"backward() needs a scalar loss tensor, got {shape}")
    if id(loss) not in tape._produced:
        raise UsageError("loss was not produced on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    out = {}
    for key, leaf in tape._leaves.items():
        g = grads.get(key)
        out[leaf] = np.zeros_like(leaf.data) if g is None else g.astype(leaf.dtype, copy=False)
    return out


def _pair(a, b):
    # python scalars / arrays adopt the dtype of the tensor operand
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    return a, b


def _emit(arr, inputs, backward_fn):
    """Wrap a forward result and record it when gradients are needed."""
    if DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite value produced by a forward operation")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs)
    tape = active_tape()
    if needs and tape is not None:
        tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _pair(a, b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _emit(out, (a, b), back)


def log(x):
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x, lo, hi):
    """Clamp into ``[lo, hi]``; the gradient is zero outside that interval."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def tsum(x, axis=None, keepdims=False):
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(out, (x,), back)


def tmean(x, axis=None, keepdims=False):
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x, shape):
    return _emit(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, idx):
    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(np.array(x.data[idx]), (x,), back)


# ---------------------------------------------------------------------------
# activations


def relu(x):
    mask = x.data > 0
    return _emit(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    z = x.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax_channels(x, axis=1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (x,), back)


# ---------------------------------------------------------------------------
# spatial operations on [N, C, H, W]


def _check_4d(name, t):
    if t.ndim != 4:
        raise DimensionError(f"{name} expects a 4-D [N,C,H,W] tensor, got shape {t.shape}")


def conv2d(x, kernel, bias, stride=1, padding=0):
    """2-D cross-correlation with zero padding."""
    _check_4d("conv2d input", x)
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be [F,C,kh,kw], got shape {kernel.shape}")
    n_f, n_c, kh, kw = kernel.shape
    if x.shape[1] != n_c:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias.shape != (n_f,):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise GeometryError(f"conv2d kernel size must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise GeometryError(f"invalid stride={stride} / padding={padding}")
    h, w = x.shape[2], x.shape[3]
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise GeometryError(
            f"conv2d output size not exact for input {x.shape}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")

    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(x.data)
    w_arr = np.ascontiguousarray(kernel.data)
    out = kernels.conv2d_forward(xp, w_arr, bias.data, stride)

    def back(g):
        g = np.ascontiguousarray(g)
        dxp, dw = kernels.conv2d_backward(xp, w_arr, g, stride)
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return dx, dw, g.sum(axis=(0, 2, 3))

    return _emit(out, (x, kernel, bias), back)


def maxpool2(x):
    """2x2 non-overlapping max pooling."""
    _check_4d("maxpool2 input", x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise GeometryError(f"maxpool2 needs even H and W, got shape {x.shape}")
    out, idx = kernels.maxpool2_forward(np.ascontiguousarray(x.data))
    return _emit(out, (x,), lambda g: (kernels.maxpool2_backward(np.ascontiguousarray(g), idx),))


def upsample_nearest2(x):
    _check_4d("upsample_nearest2 input", x)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def back(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _emit(out, (x,), back)


def concat_channels(a, b):
    _check_4d("concat_channels operand", a)
    _check_4d("concat_channels operand", b)
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise DimensionError(f"concat_channels N/H/W mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return _emit(np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :ca], g[:, ca:]))
