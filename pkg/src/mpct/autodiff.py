"""Double-precision tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When gradient recording is enabled and
any input requires a gradient, the output keeps references to its inputs and a
closure computing the vector-Jacobian product. Node ids are drawn from a
global counter, so creation order is a valid topological order of the graph
and :func:`gradients` replays it by sorting on ``node_id``.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericDomainError, ShapeError

LOG_EPS = 1e-8
SIGMOID_CLIP = 30.0

_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation passes)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def record_kinks() -> Iterator[list]:
    """Collect the side-of-kink pattern of every non-smooth op evaluated.

    Used by :func:`grad_check` to detect finite-difference probes that cross
    a relu/abs/log-clamp kink.
    """
    prev = getattr(_state, "kinks", None)
    log: list = []
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = prev


def _note_kink(pattern: np.ndarray) -> None:
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(pattern)


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "op", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericDomainError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.node_id = next(_ids)
        out.op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def parents(self) -> tuple:
        return self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.node_id = next(_ids)
        out.op = "detach"
        out._parents = ()
        out._backward = None
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g, needs):
        return (_unbroadcast(g * bd, ad.shape) if needs[0] else None,
                _unbroadcast(g * ad, bd.shape) if needs[1] else None)

    return Tensor._result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NumericDomainError("division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g, needs):
        return (_unbroadcast(g / bd, ad.shape) if needs[0] else None,
                _unbroadcast(-g * out / bd, bd.shape) if needs[1] else None)

    return Tensor._result(out, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_kink(mask)

    def backward(g, needs):
        return (g * mask,)

    return Tensor._result(x.data * mask, (x,), backward, "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    _note_kink(mask)
    scale = np.where(mask, 1.0, slope)

    def backward(g, needs):
        return (g * scale,)

    return Tensor._result(x.data * scale, (x,), backward, "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g, needs):
        return (g * (1.0 - y * y),)

    return Tensor._result(y, (x,), backward, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function with logits clipped to +-30 so the output stays in (0, 1)."""
    inside = np.abs(x.data) < SIGMOID_CLIP
    _note_kink(inside)
    z = np.clip(x.data, -SIGMOID_CLIP, SIGMOID_CLIP)
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g, needs):
        return (g * y * (1.0 - y) * inside,)

    return Tensor._result(y, (x,), backward, "sigmoid")


def log(x: Tensor, eps: float = LOG_EPS) -> Tensor:
    """log(max(x, eps)); the gradient is zero where the clamp is active."""
    x = as_tensor(x)
    live = x.data > eps
    _note_kink(live)
    safe = np.where(live, x.data, eps)

    def backward(g, needs):
        return (g * live / safe,)

    return Tensor._result(np.log(safe), (x,), backward, "log")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    _note_kink(sign)

    def backward(g, needs):
        return (g * sign,)

    return Tensor._result(np.abs(x.data), (x,), backward, "abs")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g, needs):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(y, (x,), backward, "log_softmax")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[a] for a in axes]))

    def backward(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return Tensor._result(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward, "mean")


def l1_distance(a, b) -> Tensor:
    """Sum of absolute differences, a scalar. Subgradient of |0| is 0."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "l1_distance")
    d = a.data - b.data
    sign = np.sign(d)
    _note_kink(sign)
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        gd = g * sign
        return (_unbroadcast(gd, sa) if needs[0] else None,
                _unbroadcast(-gd, sb) if needs[1] else None)

    return Tensor._result(np.asarray(np.abs(d).sum()), (a, b), backward, "l1_distance")


# ---------------------------------------------------------------- structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def backward(g, needs):
        return (g @ bd.T if needs[0] else None, ad.T @ g if needs[1] else None)

    return Tensor._result(ad @ bd, (a, b), backward, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None

    def backward(g, needs):
        return (g.reshape(src),)

    return Tensor._result(out, (x,), backward, "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def getitem(x: Tensor, idx) -> Tensor:
    src = x.shape

    def backward(g, needs):
        full = np.zeros(src)
        full[idx] = g
        return (full,)

    return Tensor._result(np.array(x.data[idx]), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            n != m for d, (n, m) in enumerate(zip(t.shape, ref)) if d != axis % len(ref)
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g, needs):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis),
                          tuple(tensors), backward, "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


# ---------------------------------------------------------------- convolution


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, H, W, C) -> contiguous (B*Ho*Wo, k*k*C) patch matrix, channels last."""
    b, c = xp.shape[0], xp.shape[3]
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, k * k * c)


def _col2im(cols: np.ndarray, b: int, c: int, ho: int, wo: int, out_hw: tuple, k: int,
            stride: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back, returns (B, C, H, W)."""
    g6 = cols.reshape(b, ho, wo, k, k, c)
    if c < wo:
        # few channels: scatter channels-first so the inner loops run along rows
        g6 = np.ascontiguousarray(g6.transpose(0, 5, 3, 4, 1, 2))
        out = np.zeros((b, c) + out_hw)
        for di in range(k):
            for dj in range(k):
                out[:, :, di : di + (ho - 1) * stride + 1 : stride,
                    dj : dj + (wo - 1) * stride + 1 : stride] += g6[:, :, di, dj]
        return out
    out = np.zeros((b,) + out_hw + (c,))
    for di in range(k):
        for dj in range(k):
            out[:, di : di + (ho - 1) * stride + 1 : stride,
                dj : dj + (wo - 1) * stride + 1 : stride, :] += g6[:, :, :, di, dj, :]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _pad_nhwc(x: np.ndarray, p: int) -> np.ndarray:
    """(B, C, H, W) -> zero-padded (B, H+2p, W+2p, C)."""
    b, c, h, w = x.shape
    out = np.zeros((b, h + 2 * p, w + 2 * p, c))
    out[:, p : p + h, p : p + w, :] = x.transpose(0, 2, 3, 1)
    return out


def _nhwc_rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(-1, x.shape[1])


def _check_conv(x: Tensor, w: Tensor, stride: int, padding: int, op: str, cin_axis: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"{op}: expected 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[cin_axis]:
        raise ShapeError(f"{op}: input {x.shape} has {x.shape[1]} channels, weight {w.shape} expects {w.shape[cin_axis]}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"{op}: only square kernels are supported, got {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"{op}: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding. ``w`` has shape (out, in, k, k)."""
    _check_conv(x, w, stride, padding, "conv2d", 1)
    b, c, h, wd = x.shape
    o, k = w.shape[0], w.shape[2]
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit input {x.shape} with padding {padding}")
    ho, wo = _out_extent(h, k, stride, padding), _out_extent(wd, k, stride, padding)
    cols = _im2col(_pad_nhwc(x.data, padding), k, stride, ho, wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    y = cols @ wmat.T
    if bias is not None:
        y += bias.data
    out = np.ascontiguousarray(y.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g, needs):
        gmat = _nhwc_rows(g)
        gx = gw = gb = None
        if needs[0] and stride == 1 and padding < k:
            # correlation of the padded output gradient with the flipped kernel
            gcols = _im2col(_pad_nhwc(g, k - 1 - padding), k, 1, h, wd)
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, k * k * o)
            gx = (gcols @ wflip.T).reshape(b, h, wd, c).transpose(0, 3, 1, 2)
        elif needs[0]:
            gxp = _col2im(gmat @ wmat, b, c, ho, wo, (h + 2 * padding, wd + 2 * padding), k, stride)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        if needs[1]:
            gw = (gmat.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        if len(needs) > 2 and needs[2]:
            gb = gmat.sum(axis=0)
        return (gx, gw, gb)[: len(parents)]

    return Tensor._result(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Gradient-of-conv2d upsampling. ``w`` has shape (in, out, k, k)."""
    _check_conv(x, w, stride, padding, "conv_transpose2d", 0)
    if not 0 <= output_padding < stride:
        raise ShapeError(f"conv_transpose2d: output_padding {output_padding} must be in [0, stride)")
    b, cin, h, wd = x.shape
    cout, k = w.shape[1], w.shape[2]
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (wd - 1) * stride - 2 * padding + k + output_padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: empty output for input {x.shape}, weight {w.shape}")
    xmat = _nhwc_rows(x.data)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(cin, k * k * cout)
    full_hw = ((h - 1) * stride + k + output_padding, (wd - 1) * stride + k + output_padding)
    full = _col2im(xmat @ wmat, b, cout, h, wd, full_hw, k, stride)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g, needs):
        gp = np.zeros((b,) + full_hw + (cout,))
        gp[:, padding : padding + ho, padding : padding + wo, :] = g.transpose(0, 2, 3, 1)
        gcols = _im2col(gp, k, stride, h, wd)
        gx = gw = gb = None
        if needs[0]:
            gx = (gcols @ wmat.T).reshape(b, h, wd, cin).transpose(0, 3, 1, 2)
        if needs[1]:
            gw = (xmat.T @ gcols).reshape(cin, k, k, cout).transpose(0, 3, 1, 2)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)[: len(parents)]

    return Tensor._result(out, parents, backward, "conv_transpose2d")


def normalize_instance(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
                       eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes, optional affine."""
    if x.ndim != 4:
        raise ShapeError(f"normalize_instance: expected (B, C, H, W), got {x.shape}")
    c = x.shape[1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"normalize_instance: {name} shape {p.shape} does not match {c} channels")
    n = x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=(2, 3), keepdims=True) + eps)
    xhat = centered * inv_std
    gdata = gamma.data[None, :, None, None] if gamma is not None else 1.0
    out = xhat * gdata
    if beta is not None:
        out = out + beta.data[None, :, None, None]
    parents = tuple(t for t in (x, gamma, beta) if t is not None)

    def backward(g, needs):
        grads = []
        if needs[0]:
            gh = g * gdata
            gx = (inv_std / n) * (n * gh - gh.sum(axis=(2, 3), keepdims=True)
                                  - xhat * (gh * xhat).sum(axis=(2, 3), keepdims=True))
            grads.append(gx)
        else:
            grads.append(None)
        if gamma is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)) if needs[len(grads)] else None)
        if beta is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if needs[len(grads)] else None)
        return tuple(grads)

    return Tensor._result(out, parents, backward, "normalize_instance")


# ---------------------------------------------------------------- parameters


class ParamSet:
    """Named parameter tensors in insertion order."""

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in items:
            self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def count(self) -> int:
        """Total number of scalar parameters."""
        return int(np.sum([t.size for t in self._params.values()])) if self._params else 0

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self._params.items():
            v.data[...] = state[k]

    @classmethod
    def merged(cls, groups: dict[str, "ParamSet"]) -> "ParamSet":
        out = cls()
        for prefix, ps in groups.items():
            for name, t in ps.items():
                out.add(f"{prefix}.{name}", t)
        return out


class Gradients(dict):
    """Mapping parameter name -> gradient array; ``unreached`` lists names
    the loss does not depend on (their gradient is an all-zero array)."""

    unreached: list[str]


def gradients(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """d(loss)/d(t) for each t in ``wrt``; zeros for tensors the loss does not reach."""
    return _backprop(loss, wrt)[0]


def _backprop(loss: Tensor, wrt: Sequence[Tensor]) -> tuple[list[np.ndarray], dict[int, bool]]:
    """Gradients plus the ids of every node reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    targets = {id(t) for t in wrt}
    needed: dict[int, bool] = {}
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack[-1]
        key = id(t)
        if key in needed:
            stack.pop()
            continue
        pending = [p for p in t._parents if id(p) not in needed]
        if pending:
            stack.extend(pending)
            continue
        stack.pop()
        hit = key in targets or any(needed[id(p)] for p in t._parents)
        needed[key] = hit
        if hit and t._parents:
            nodes.append(t)

    nodes.sort(key=lambda t: t.node_id, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    found: dict[int, np.ndarray] = {}
    for t in nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if id(t) in targets:
            found[id(t)] = g
        mask = tuple(needed[id(p)] for p in t._parents)
        for p, pg in zip(t._parents, t._backward(g, mask)):
            if pg is None or not needed[id(p)]:
                continue
            k = id(p)
            grads[k] = grads[k] + pg if k in grads else pg
    found.update((k, v) for k, v in grads.items() if k in targets and k not in found)
    return [np.array(found[id(t)], dtype=np.float64).reshape(t.shape) if id(t) in found
            else np.zeros(t.shape) for t in wrt], needed


def backward(loss: Tensor, params: ParamSet) -> Gradients:
    names = params.names()
    tensors = [params[n] for n in names]
    values, reach = _backprop(loss, tensors)
    grads = Gradients(zip(names, values))
    grads.unreached = [n for n, t in zip(names, tensors) if id(t) not in reach]
    return grads


def grad_check(f: Callable[[], Tensor], params: ParamSet, step: float = 1e-5, *,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               skip_kinks: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` re-evaluates the scalar objective from the current parameter values.
    With ``max_entries`` only that many randomly chosen entries per parameter
    are probed. Entries whose +-step probe flips the side of any relu, abs or
    log-clamp kink are skipped when ``skip_kinks`` is set.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step {step} outside [1e-7, 1e-3]")
    rng = rng if rng is not None else np.random.default_rng(0)
    with record_kinks() as base_kinks:
        loss = f()
    analytic = backward(loss, params)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            vals = []
            crossed = False
            for delta in (step, -step):
                flat[i] = orig + delta
                try:
                    with no_grad(), record_kinks() as kinks:
                        v = f().item()
                except NumericDomainError as exc:
                    flat[i] = orig
                    raise NumericDomainError(f"while probing parameter {name!r}: {exc}") from exc
                if not np.isfinite(v):
                    flat[i] = orig
                    raise NumericDomainError(f"non-finite objective while probing parameter {name!r}")
                if skip_kinks and not _same_pattern(base_kinks, kinks):
                    crossed = True
                vals.append(v)
            flat[i] = orig
            if crossed:
                continue
            num = (vals[0] - vals[1]) / (2 * step)
            an = a_flat[i]
            err = np.abs(an - num) / max(np.abs(an), np.abs(num), 1e-12)
            worst = max(worst, float(err))
    return worst


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))
