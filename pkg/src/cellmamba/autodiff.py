"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap a NumPy array. Every differentiable operation is a `Function`
subclass; calling it records a node on a dynamic tape (the graph is rebuilt on
every forward pass), and `Tensor.backward` walks that tape once in reverse
topological order.

Layout conventions: images and feature maps are channels-last ``(B, H, W, C)``,
token sequences are ``(B, L, C)``, convolution kernels are ``(k, k, Cin, Cout)``
and use cross-correlation semantics.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Any, Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_state = {"dtype": np.dtype(np.float32), "grad_enabled": True}


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """An operation was configured with parameters it cannot honour."""


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors (float32 or float64)."""
    previous = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


class Tensor:
    """A NumPy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = np.dtype(dtype) if dtype is not None else None
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                arr = data
            else:
                arr = np.asarray(data, dtype=_state["dtype"])
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: Function | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _as_tensor(other, self))

    def __radd__(self, other):
        return Add.apply(_as_tensor(other, self), self)

    def __sub__(self, other):
        return Sub.apply(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return Sub.apply(_as_tensor(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return Mul.apply(_as_tensor(other, self), self)

    def __truediv__(self, other):
        return Div.apply(self, _as_tensor(other, self))

    def __rtruediv__(self, other):
        return Div.apply(_as_tensor(other, self), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, _as_tensor(other, self))

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # -- methods ------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def max(self, axis: int, keepdims: bool = False):
        return Max.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def relu(self):
        return ReLU.apply(self)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype or _state["dtype"]))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_state["dtype"]), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_state["dtype"]), requires_grad=requires_grad)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing NumPy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Function:
    """A recorded operation.

    Subclasses implement ``forward`` on raw arrays and ``backward`` mapping the
    output gradient to one gradient (or None) per tensor input.
    """

    __slots__ = ("inputs", "ctx")

    def __init__(self, inputs: tuple[Tensor, ...]):
        self.inputs = inputs
        self.ctx: dict[str, Any] = {}

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(inputs)
        out = Tensor(fn.forward(*(t.data for t in inputs), **kwargs))
        if _state["grad_enabled"] and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._node = fn
        return out

    @property
    def op(self) -> str:
        return type(self).__name__


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        self.ctx["shapes"] = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        sa, sb = self.ctx["shapes"]
        return unbroadcast(g, sa), unbroadcast(g, sb)


class Sub(Function):
    def forward(self, a, b):
        self.ctx["shapes"] = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        sa, sb = self.ctx["shapes"]
        return unbroadcast(g, sa), unbroadcast(-g, sb)


class Mul(Function):
    def forward(self, a, b):
        self.ctx["ab"] = (a, b)
        return a * b

    def backward(self, g):
        a, b = self.ctx["ab"]
        ga = unbroadcast(g * b, a.shape) if self.inputs[0].requires_grad else None
        gb = unbroadcast(g * a, b.shape) if self.inputs[1].requires_grad else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        self.ctx["ab"] = (a, b)
        return a / b

    def backward(self, g):
        a, b = self.ctx["ab"]
        ga = unbroadcast(g / b, a.shape) if self.inputs[0].requires_grad else None
        gb = unbroadcast(-g * a / (b * b), b.shape) if self.inputs[1].requires_grad else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Pow(Function):
    def forward(self, a, exponent):
        self.ctx["a"], self.ctx["p"] = a, exponent
        return a**exponent

    def backward(self, g):
        a, p = self.ctx["a"], self.ctx["p"]
        return (g * p * a ** (p - 1),)


class Exp(Function):
    def forward(self, a):
        out = np.exp(a)
        self.ctx["out"] = out
        return out

    def backward(self, g):
        return (g * self.ctx["out"],)


class Log(Function):
    def forward(self, a):
        self.ctx["a"] = a
        return np.log(a)

    def backward(self, g):
        return (g / self.ctx["a"],)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # numerically stable for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


class Sigmoid(Function):
    def forward(self, a):
        out = _sigmoid(a)
        self.ctx["out"] = out
        return out

    def backward(self, g):
        s = self.ctx["out"]
        return (g * s * (1.0 - s),)


class ReLU(Function):
    def forward(self, a):
        mask = a > 0
        self.ctx["mask"] = mask
        return a * mask

    def backward(self, g):
        return (g * self.ctx["mask"],)


_GELU_C = float(np.sqrt(2.0 / np.pi))


class GELU(Function):
    """tanh approximation of GELU."""

    def forward(self, a):
        a2 = a * a
        t = np.tanh(_GELU_C * a * (1.0 + 0.044715 * a2))
        self.ctx.update(a=a, a2=a2, t=t)
        return 0.5 * a * (1.0 + t)

    def backward(self, g):
        a, a2, t = self.ctx["a"], self.ctx["a2"], self.ctx["t"]
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * a2)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner),)


class Softmax(Function):
    def forward(self, a, axis):
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)
        self.ctx["out"], self.ctx["axis"] = out, axis
        return out

    def backward(self, g):
        s, axis = self.ctx["out"], self.ctx["axis"]
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


class LogSigmoid(Function):
    def forward(self, a):
        self.ctx["a"] = a
        return -np.logaddexp(0.0, -a).astype(a.dtype, copy=False)

    def backward(self, g):
        return (g * _sigmoid(-self.ctx["a"]),)


def activation(x: Tensor, kind: str, axis: int | None = None) -> Tensor:
    """Apply ``sigmoid``, ``gelu``, ``relu`` or ``softmax`` (the latter needs ``axis``)."""
    if kind == "sigmoid":
        return Sigmoid.apply(x)
    if kind == "gelu":
        return GELU.apply(x)
    if kind == "relu":
        return ReLU.apply(x)
    if kind == "softmax":
        if axis is None:
            raise ConfigurationError("softmax needs an axis")
        return Softmax.apply(x, axis=axis)
    raise ConfigurationError(f"unknown activation {kind!r}")


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def gelu(x: Tensor) -> Tensor:
    return GELU.apply(x)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_sigmoid(x: Tensor) -> Tensor:
    return LogSigmoid.apply(x)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.ctx["shape"] = a.shape
        self.ctx["axis"] = _norm_axis(axis, a.ndim)
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        shape, axis = self.ctx["shape"], self.ctx["axis"]
        g = np.expand_dims(g, axis) if g.ndim != len(shape) else g
        return (np.broadcast_to(g, shape).copy(),)


class Mean(Function):
    def forward(self, a, axis, keepdims):
        axes = _norm_axis(axis, a.ndim)
        for ax in axes:
            if a.shape[ax] == 0:
                raise ShapeError(f"mean over empty axis {ax} of shape {a.shape}")
        self.ctx["shape"], self.ctx["axis"] = a.shape, axes
        self.ctx["count"] = int(np.prod([a.shape[ax] for ax in axes]))
        return np.asarray(a.mean(axis=axis, keepdims=keepdims))

    def backward(self, g):
        shape, axis = self.ctx["shape"], self.ctx["axis"]
        g = np.expand_dims(g, axis) if g.ndim != len(shape) else g
        return (np.broadcast_to(g / self.ctx["count"], shape).copy(),)


class Max(Function):
    """Max along one axis; the gradient goes to the first maximal index."""

    def forward(self, a, axis, keepdims):
        axis = axis % a.ndim
        if a.shape[axis] == 0:
            raise ShapeError(f"max over empty axis {axis} of shape {a.shape}")
        idx = np.argmax(a, axis=axis)
        idx = np.expand_dims(idx, axis)
        out = np.take_along_axis(a, idx, axis=axis)
        self.ctx.update(shape=a.shape, axis=axis, idx=idx, dtype=a.dtype)
        return out if keepdims else np.squeeze(out, axis=axis)

    def backward(self, g):
        shape, axis, idx = self.ctx["shape"], self.ctx["axis"], self.ctx["idx"]
        if g.ndim != len(shape):
            g = np.expand_dims(g, axis)
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)


def reduce(x: Tensor, axis: int, mode: str = "mean", keepdims: bool = False) -> Tensor:
    """Mean or max over ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    if mode == "mean":
        return Mean.apply(x, axis=axis, keepdims=keepdims)
    if mode == "max":
        return Max.apply(x, axis=axis, keepdims=keepdims)
    raise ConfigurationError(f"unknown reduce mode {mode!r}")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


class Reshape(Function):
    def forward(self, a, shape):
        self.ctx["shape"] = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.ctx["shape"]),)


class Transpose(Function):
    def forward(self, a, axes):
        axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
        self.ctx["axes"] = axes
        return a.transpose(axes)

    def backward(self, g):
        return (g.transpose(np.argsort(self.ctx["axes"])),)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


class GetItem(Function):
    def forward(self, a, index):
        self.ctx["shape"], self.ctx["index"], self.ctx["dtype"] = a.shape, index, a.dtype
        return np.array(a[index])

    def backward(self, g):
        full = np.zeros(self.ctx["shape"], dtype=g.dtype)
        index = self.ctx["index"]
        if _is_basic_index(index):
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis):
        axis = axis % arrays[0].ndim
        self.ctx["axis"] = axis
        self.ctx["sizes"] = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        splits = np.cumsum(self.ctx["sizes"])[:-1]
        return tuple(np.split(g, splits, axis=self.ctx["axis"]))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def split(x: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    """Split ``x`` into ``sections`` equal parts along ``axis``."""
    n = x.shape[axis]
    if n % sections:
        raise ShapeError(f"cannot split axis of size {n} into {sections} equal parts")
    step = n // sections
    axis = axis % x.ndim
    out = []
    for i in range(sections):
        index = [slice(None)] * x.ndim
        index[axis] = slice(i * step, (i + 1) * step)
        out.append(x[tuple(index)])
    return out


class Upsample2x(Function):
    """Nearest-neighbour 2x upsampling of a (B, H, W, C) map."""

    def forward(self, a):
        return a.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, g):
        b, h, w, c = g.shape
        return (g.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4)),)


def upsample_nearest2x(x: Tensor) -> Tensor:
    return Upsample2x.apply(x)


# ---------------------------------------------------------------------------
# linear algebra and layers
# ---------------------------------------------------------------------------


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        self.ctx["ab"] = (a, b)
        return a @ b

    def backward(self, g):
        a, b = self.ctx["ab"]
        ga = gb = None
        if self.inputs[0].requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
        if self.inputs[1].requires_grad:
            gb = unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


class Linear(Function):
    def forward(self, x, w, b=None):
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
        self.ctx["x"], self.ctx["w"] = x, w
        y = x @ w
        if b is not None:
            y += b
        return y

    def backward(self, g):
        x, w = self.ctx["x"], self.ctx["w"]
        gx = g @ w.T if self.inputs[0].requires_grad else None
        gw = None
        if self.inputs[1].requires_grad:
            gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if len(self.inputs) == 3:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if self.inputs[2].requires_grad else None
            return gx, gw, gb
        return gx, gw


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x @ w + b`` over the last axis of ``x``."""
    if b is None:
        return Linear.apply(x, w)
    return Linear.apply(x, w, b)


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        self.ctx.update(xhat=xhat, inv=inv, gamma=gamma)
        return xhat * gamma + beta

    def backward(self, g):
        xhat, inv, gamma = self.ctx["xhat"], self.ctx["inv"], self.ctx["gamma"]
        gx = None
        if self.inputs[0].requires_grad:
            gxhat = g * gamma
            gx = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        flat_g = g.reshape(-1, g.shape[-1])
        ggamma = (flat_g * xhat.reshape(flat_g.shape)).sum(axis=0)
        gbeta = flat_g.sum(axis=0)
        return gx, ggamma, gbeta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def _pads(padding) -> tuple[int, int]:
    if isinstance(padding, int):
        return padding, padding
    lo, hi = padding
    return int(lo), int(hi)


def conv_output_size(size: int, k: int, stride: int, padding) -> int:
    """Output length along one axis; raises unless the stride divides evenly."""
    lo, hi = _pads(padding)
    span = size + lo + hi - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv output size is not integral: (size {size} + pad {lo}+{hi} - k {k}) / stride {stride}"
        )
    return span // stride + 1


class Conv2d(Function):
    def forward(self, x, kernel, bias=None, stride=1, padding=0):
        if x.ndim != 4 or kernel.ndim != 4:
            raise ShapeError(f"conv2d expects (B,H,W,C) input and (k,k,Cin,Cout) kernel, got {x.shape}, {kernel.shape}")
        k, k2, cin, cout = kernel.shape
        if k != k2 or x.shape[-1] != cin:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
        b, h, w, _ = x.shape
        ho = conv_output_size(h, k, stride, padding)
        wo = conv_output_size(w, k, stride, padding)
        lo, hi = _pads(padding)
        self.ctx.update(xshape=x.shape, kernel=kernel, stride=stride, pads=(lo, hi), out_hw=(ho, wo))
        if k == 1 and stride == 1 and lo == hi == 0:
            cols = x.reshape(-1, cin)
        else:
            xp = np.pad(x, ((0, 0), (lo, hi), (lo, hi), (0, 0))) if lo or hi else x
            win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
            # win: (B, H', W', C, k, k) before striding
            win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
            cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, k * k * cin)
        self.ctx["cols"] = cols
        y = cols @ kernel.reshape(-1, cout)
        if bias is not None:
            y += bias
        return y.reshape(b, ho, wo, cout)

    def backward(self, g):
        cols, kernel = self.ctx["cols"], self.ctx["kernel"]
        k, _, cin, cout = kernel.shape
        b, h, w, _ = self.ctx["xshape"]
        ho, wo = self.ctx["out_hw"]
        stride = self.ctx["stride"]
        lo, hi = self.ctx["pads"]
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if self.inputs[1].requires_grad else None
        gx = None
        if self.inputs[0].requires_grad:
            if k == 1 and stride == 1 and lo == hi == 0:
                gx = (g2 @ kernel.reshape(-1, cout).T).reshape(b, h, w, cin)
            elif stride == 1:
                # full correlation of the output gradient with the flipped kernel
                flipped = kernel[::-1, ::-1].transpose(0, 1, 3, 2)
                gx = Conv2d(()).forward(g, flipped, stride=1, padding=(k - 1 - lo, k - 1 - hi))
            else:
                gcols = (g2 @ kernel.reshape(-1, cout).T).reshape(b, ho, wo, k, k, cin)
                gxp = np.zeros((b, h + lo + hi, w + lo + hi, cin), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += gcols[
                            :, :, :, i, j
                        ]
                gx = gxp[:, lo : lo + h, lo : lo + w]
        out = [gx, gk]
        if len(self.inputs) == 3:
            out.append(g2.sum(axis=0) if self.inputs[2].requires_grad else None)
        return tuple(out)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """Channels-last cross-correlation.

    ``padding`` is either one int applied on every side or a ``(before, after)``
    pair applied to both spatial axes. The output size must come out integral.
    """
    if bias is None:
        return Conv2d.apply(x, kernel, stride=stride, padding=padding)
    return Conv2d.apply(x, kernel, bias, stride=stride, padding=padding)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for parent in t._node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate (``+=``) across calls; clear them between steps.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = node.backward(g)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        # release saved activations
        t._node = None


def graph_nodes(root: Tensor) -> list[Function]:
    """Recorded operations reachable from ``root``, inputs before consumers."""
    return [t._node for t in _topological_order(root) if t._node is not None]


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-3,
    indices: Iterable[int] | None = None,
) -> float:
    """Compare autodiff gradients of scalar ``f`` at ``x`` with central differences.

    Returns max over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. ``indices`` restricts
    the check to flat coordinates of ``x``. ``f`` must be deterministic, so run it
    single-threaded if the BLAS backend is not.
    """
    if not x.requires_grad:
        raise ValueError("finite_difference_check needs x.requires_grad=True")
    x.grad = None
    out = f(x)
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data.sum())
            flat[i] = orig - h
            fm = float(f(x).data.sum())
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
