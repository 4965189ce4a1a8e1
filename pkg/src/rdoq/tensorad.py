"""Small dense-tensor engine with reverse-mode differentiation.

Covers exactly what the codec and the calibration loop need: strided and
transposed 2-D convolution, elementwise arithmetic with numpy broadcasting,
reductions, log/exp/sigmoid, clamp, ReLU, straight-through rounding and the
additive uniform-noise rounding proxy.  Tensors keep the dtype of the array
they wrap; the codec runs in float32, gradient checks in float64.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fixedpoint import round_half_away

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # arithmetic ---------------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        return Tensor(np.asarray(x))
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.shape).astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _binary_operands(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    # Python scalars follow the tensor operand's dtype.
    if a.data.ndim == 0 and b.data.dtype != a.data.dtype and not a.requires_grad:
        a = Tensor(a.data.astype(b.data.dtype))
    if b.data.ndim == 0 and a.data.dtype != b.data.dtype and not b.requires_grad:
        b = Tensor(b.data.astype(a.data.dtype))
    return a, b


# elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), "div", bw)


def power(x, p: float) -> Tensor:
    """``x ** p`` for a constant exponent; use on nonnegative ``x`` for non-integer ``p``."""
    x = as_tensor(x)
    out = np.power(x.data, p)

    def bw(g):
        _accum(x, g * p * np.power(x.data, p - 1))

    return _make(out, (x,), "pow", bw)


def abs_(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, g * np.sign(x.data))

    return _make(np.abs(x.data), (x,), "abs", bw)


def log(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, g / x.data)

    return _make(np.log(x.data), (x,), "log", bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def bw(g):
        _accum(x, g * out)

    return _make(out, (x,), "exp", bw)


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid_np(x.data)

    def bw(g):
        _accum(x, g * out * (1.0 - out))

    return _make(out, (x,), "sigmoid", bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        _accum(x, g * mask)

    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), "relu", bw)


def clamp(x, lo=None, hi=None) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient passes only where the input is inside.

    ``lo`` and ``hi`` may be arrays (broadcast against ``x``), never tensors.
    """
    x = as_tensor(x)
    lo_a = -np.inf if lo is None else lo
    hi_a = np.inf if hi is None else hi
    out = np.clip(x.data, lo_a, hi_a).astype(x.data.dtype, copy=False)
    mask = (x.data >= lo_a) & (x.data <= hi_a)

    def bw(g):
        _accum(x, g * mask)

    return _make(out, (x,), "clamp", bw)


def ste_round(x) -> Tensor:
    """Round half away from zero; gradient passes straight through."""
    x = as_tensor(x)

    def bw(g):
        _accum(x, g)

    return _make(round_half_away(x.data).astype(x.data.dtype), (x,), "ste_round", bw)


def ste_floor(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, g)

    return _make(np.floor(x.data), (x,), "ste_floor", bw)


def noise_round(x, rng: np.random.Generator) -> Tensor:
    """Rounding proxy: ``x + u`` with ``u ~ U[-0.5, 0.5)``; identity gradient."""
    x = as_tensor(x)
    u = rng.uniform(-0.5, 0.5, size=x.shape).astype(x.data.dtype)

    def bw(g):
        _accum(x, g)

    return _make(x.data + u, (x,), "noise_round", bw)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select with a constant boolean mask."""
    a, b = _binary_operands(a, b)

    def bw(g):
        _accum(a, np.where(mask, g, 0))
        _accum(b, np.where(mask, 0, g))

    return _make(np.where(mask, a.data, b.data), (a, b), "where", bw)


# shape and reductions ------------------------------------------------------
def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), "reshape", bw)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), "sum", bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return sum_(x, axis, keepdims) * (1.0 / n)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - dot))

    return _make(out, (x,), "softmax", bw)


# convolution ---------------------------------------------------------------
def _check_conv(x: np.ndarray, w: np.ndarray, cin_axis: int):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("convolution expects 4-D input (N,C,H,W) and 4-D weight")
    if x.shape[1] != w.shape[cin_axis]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {w.shape[cin_axis]}")


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of x (N,C,H,W) with w (O,C,kh,kw)."""
    _check_conv(x, w, 1)
    kh, kw = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError("kernel larger than padded input")
    cols = _windows(xp, kh, kw, stride)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    parents = [x, w]
    out = conv2d_forward(x.data, w.data, stride, padding)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ValueError("bias must have one entry per output channel")
        out = out + b.data.reshape(1, -1, 1, 1)
        parents.append(b)
    kh, kw = w.shape[2:]
    ho, wo = out.shape[2:]

    def bw(g):
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        if w.requires_grad:
            cols = _windows(xp, kh, kw, stride)
            _accum(w, np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])))
        if x.requires_grad:
            dcols = np.tensordot(g, w.data, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            _accum(x, dxp)
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))

    return _make(out, parents, "conv2d", bw)


def _tconv_out_size(n: int, k: int, stride: int, padding: int, output_padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k + output_padding


def conv2d_transpose_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0,
                             output_padding: int = 0) -> np.ndarray:
    """Transposed convolution of x (N,Cin,H,W) with w (Cin,Cout,kh,kw)."""
    _check_conv(x, w, 0)
    n, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    t = np.tensordot(x, w, axes=([1], [0]))  # N,H,W,Cout,kh,kw
    full = np.zeros((n, w.shape[1], (h - 1) * stride + kh + output_padding,
                     (wd - 1) * stride + kw + output_padding), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * h:stride, j:j + stride * wd:stride] += t[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    ho = _tconv_out_size(h, kh, stride, padding, output_padding)
    wo = _tconv_out_size(wd, kw, stride, padding, output_padding)
    if ho <= 0 or wo <= 0:
        raise ValueError("transposed convolution output would be empty")
    return np.ascontiguousarray(full[:, :, padding:padding + ho, padding:padding + wo])


def conv2d_transpose(x, w, b=None, stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    parents = [x, w]
    out = conv2d_transpose_forward(x.data, w.data, stride, padding, output_padding)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ValueError("bias must have one entry per output channel")
        out = out + b.data.reshape(1, -1, 1, 1)
        parents.append(b)
    n, _, h, wd = x.shape
    kh, kw = w.shape[2:]

    def bw(g):
        full = np.zeros((n, w.shape[1], (h - 1) * stride + kh + output_padding,
                         (wd - 1) * stride + kw + output_padding), dtype=g.dtype)
        full[:, :, padding:padding + g.shape[2], padding:padding + g.shape[3]] = g
        dt = _windows(full, kh, kw, stride)[:, :, :h, :wd]  # N,Cout,H,W,kh,kw
        if x.requires_grad:
            dx = np.tensordot(dt, w.data, axes=([1, 4, 5], [1, 2, 3]))  # N,H,W,Cin
            _accum(x, dx.transpose(0, 3, 1, 2))
        if w.requires_grad:
            _accum(w, np.tensordot(x.data, dt, axes=([0, 2, 3], [0, 2, 3])))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))

    return _make(out, parents, "conv2d_transpose", bw)


# graph ---------------------------------------------------------------------
class Graph:
    """Topologically ordered nodes reachable from an output tensor."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

    def __len__(self):
        return len(self.nodes)

    def backward(self):
        out = self.output
        if out.data.size != 1:
            raise ValueError("backward needs a scalar loss")
        for node in self.nodes:
            if node._parents:
                node.grad = None
        out.grad = np.ones_like(out.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf needing it."""
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    if not loss.requires_grad:
        return
    Graph(loss).backward()


# optimisation --------------------------------------------------------------
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def sgd_adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]],
                  state: dict, lr) -> list[np.ndarray]:
    """One Adam update; returns new parameter arrays and updates ``state``.

    ``lr`` is a float or one float per parameter.  ``state`` starts empty.
    """
    lrs = list(lr) if isinstance(lr, (list, tuple)) else [lr] * len(params)
    t = state.get("t", 0) + 1
    state["t"] = t
    m = state.setdefault("m", [np.zeros_like(p) for p in params])
    v = state.setdefault("v", [np.zeros_like(p) for p in params])
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            out.append(p)
            continue
        m[i] = ADAM_BETA1 * m[i] + (1 - ADAM_BETA1) * g
        v[i] = ADAM_BETA2 * v[i] + (1 - ADAM_BETA2) * g * g
        mhat = m[i] / (1 - ADAM_BETA1 ** t)
        vhat = v[i] / (1 - ADAM_BETA2 ** t)
        out.append((p - lrs[i] * mhat / (np.sqrt(vhat) + ADAM_EPS)).astype(p.dtype))
    return out


class Adam:
    """Adam over leaf tensors; ``groups`` is a list of (tensors, lr)."""

    def __init__(self, groups: Iterable[tuple[Sequence[Tensor], float]]):
        self.params: list[Tensor] = []
        self.lrs: list[float] = []
        for tensors, lr in groups:
            for t in tensors:
                self.params.append(t)
                self.lrs.append(lr)
        self.state: dict = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        new = sgd_adam_step([p.data for p in self.params], [p.grad for p in self.params],
                            self.state, self.lrs)
        for p, d in zip(self.params, new):
            p.data = d
