"""Dense tensors with a reverse-mode gradient tape.

Arrays are row-major numpy buffers in NCHW order; a W x H x C map is
stored here as C x H x W (one image) or N x C x H x W (a batch).

Operations run eagerly. While a GradientTape is active, every operation with at
least one ``requires_grad`` input is appended to the tape together with its
backward rule; ``backward(loss)`` replays the tape in reverse recorded order.
"""
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from centeruda.errors import ConfigError, GradientError, NumericalError, ShapeError
from centeruda.utils.config import Config

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12
DTYPES = (np.float32, np.float64)

_active_tapes = []


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._is_leaf = True
        self._retain = False

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item", f"only single-element tensors convert to float, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def retain_grad(self):
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        g = np.asarray(g, dtype=self.dtype)
        if g.shape != self.shape:
            g = np.broadcast_to(g, self.shape)
        self.grad = np.array(g, copy=True) if self.grad is None else self.grad + g

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
        return scalar_mul(self, -1.0)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise ShapeError("div", "only division by a Python scalar is supported")
        return scalar_mul(self, 1.0 / scalar)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(array):
    return Tensor(array, requires_grad=True)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


class GradientTape:
    """Ordered record of operations; replayable exactly once."""

    def __init__(self):
        self._entries = []
        self._consumed = False

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tapes.remove(self)
        return False

    def __len__(self):
        return len(self._entries)

    def record(self, output, inputs, backward_fn):
        if self._consumed:
            raise GradientError("cannot record on a tape that was already replayed")
        self._entries.append((output, inputs, backward_fn))

    def backward(self, loss):
        if self._consumed:
            raise GradientError("backward already ran on this tape; record a new forward pass")
        self._consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        if loss._retain:
            loss._accumulate(grads[id(loss)])
        for output, inputs, backward_fn in reversed(self._entries):
            g = grads.pop(id(output), None)
            if g is None:
                continue
            for tensor, gi in zip(inputs, backward_fn(g)):
                if gi is None or not tensor.requires_grad:
                    continue
                gi = _unbroadcast(gi, tensor.shape)
                if tensor._is_leaf:
                    tensor._accumulate(gi)
                    continue
                if tensor._retain:
                    tensor._accumulate(gi)
                key = id(tensor)
                grads[key] = gi if key not in grads else grads[key] + gi
        self._entries = []


def backward(loss):
    if not isinstance(loss, Tensor):
        raise GradientError(f"backward expects a Tensor, got {type(loss).__name__}")
    if loss.size != 1:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise GradientError("loss is detached from any gradient tape")
    loss._tape.backward(loss)


def _unbroadcast(grad, shape):
    grad = np.asarray(grad)
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(op, data, inputs, backward_fn):
    if Config.DEBUG_CHECKS and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NumericalError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    tape = _active_tapes[-1] if _active_tapes else None
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_leaf = False
        out._tape = tape
        tape.record(out, inputs, backward_fn)
    return out


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# elementwise

def add(a, b):
    a, b = _pair(a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _pair(a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _pair(a, b)
    return _make("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scalar_mul(x, s):
    s = float(s)
    return _make("scalar_mul", x.data * s, (x,), lambda g: (g * s,))


def power(x, p):
    p = float(p)
    out = x.data ** p
    return _make("power", out, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def square(x):
    return _make("square", x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def relu(x):
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x):
    s = np.exp(-np.logaddexp(0, -x.data)).astype(x.dtype)
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def log_clamped(x, eps=LOG_EPS):
    if eps <= 0:
        raise ConfigError(f"log_clamped needs eps > 0, got {eps}")
    safe = np.maximum(x.data, eps)
    live = x.data > eps
    return _make("log_clamped", np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0).astype(x.dtype),))


def abs(x):
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clamp(x, lo, hi):
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)
    return _make("clamp", out, (x,), lambda g: (g * inside,))


# reductions and shape

def sum(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make("sum", np.asarray(out, dtype=x.dtype), (x,), backward_fn)


def mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scalar_mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def reshape(x, shape):
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def channel_softmax(x, axis=1):
    if x.ndim <= axis or x.shape[axis] < 1:
        raise ShapeError("channel_softmax", f"no channel axis in shape {x.shape}", dim=axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("channel_softmax", s, (x,), backward_fn)


# spatial

def pool_argmax(data):
    """Index (0..8, row-major) of the 3x3 neighborhood maximum around every cell.

    Out-of-bounds neighbors count as -inf; ties resolve to the lowest index.
    Returns the padded array, the argmax map and the max values.
    """
    if data.ndim != 4:
        raise ShapeError("max_pool3x3", f"expected NCHW input, got shape {data.shape}")
    padded = np.pad(data, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    n, c, h, w = data.shape
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3)).reshape(n, c, h, w, 9)
    arg = windows.argmax(axis=-1)
    values = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    return padded, arg, values


def max_pool3x3(x):
    """3x3 max pool, stride 1, padding 1; gradient routed to the first argmax."""
    padded, arg, values = pool_argmax(x.data)

    def backward_fn(g):
        dy, dx = np.divmod(arg, 3)
        n, c, i, j = np.indices(arg.shape)
        gp = np.zeros(padded.shape, dtype=g.dtype)
        np.add.at(gp, (n, c, i + dy, j + dx), g)
        return (gp[:, :, 1:-1, 1:-1],)

    return _make("max_pool3x3", values.astype(x.dtype), (x,), backward_fn)


def upsample2x(x):
    if x.ndim != 4:
        raise ShapeError("upsample2x", f"expected NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _make("upsample2x", out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    if x.ndim != 4:
        raise ShapeError("conv2d", f"input must be NCHW, got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError("conv2d", f"weight must be O x C x k x k, got shape {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError("conv2d", f"kernel must be square, got {kh}x{kw}", dim=3)
    if kh % 2 == 0:
        raise ShapeError("conv2d", f"kernel size must be odd, got {kh}", dim=2)
    if c != cw:
        raise ShapeError("conv2d", f"input has {c} channels but weight expects {cw}", dim=1)
    if bias is not None and bias.shape != (o,):
        raise ShapeError("conv2d", f"bias shape {bias.shape} does not match {o} output channels", dim=0)
    if stride < 1:
        raise ShapeError("conv2d", f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError("conv2d", f"padding must be >= 0, got {padding}")
    k, s, p = kh, stride, padding
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", f"input {h}x{w} too small for kernel {k} with padding {p}", dim=2)

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward_fn(g):
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + w]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _make("conv2d", out, inputs, backward_fn)


# gradient checking

def numerical_gradient(fn, x, h=1e-5):
    """Central differences of scalar ``fn`` at float array ``x`` (restored on return)."""
    x = np.asarray(x)
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = float(fn(x))
        flat[i] = orig - h
        minus = float(fn(x))
        flat[i] = orig
        out[i] = (plus - minus) / (2 * h)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
