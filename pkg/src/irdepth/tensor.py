"""Dense NCHW tensors with a reverse-mode gradient tape.

Every differentiable operation records a node holding its parents and a
closure mapping the output gradient to input gradients. Nodes carry a
monotonically increasing id, so creation order is a valid topological
order and ``backward`` simply replays nodes by descending id.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "NumericError",
    "conv2d",
    "asymmetric_conv_pair",
    "pool2d",
    "upsample2x",
    "concat_channels",
    "split_channels",
    "activation",
    "relu",
    "leaky_relu",
    "sigmoid",
    "forward_diff",
    "backward",
    "gradcheck",
    "GradcheckReport",
    "no_grad",
]

_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class DimensionError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(ValueError):
    """An operation was invoked outside its contract."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A numpy array plus optional participation in the gradient tape."""

    __array_priority__ = 1000

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        _op: str = "",
    ):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._id = next(_node_ids)

    # -- basic protocol ---------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- arithmetic -------------------------------------------------------
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

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def abs(self) -> "Tensor":
        return tabs(self)

    def square(self) -> "Tensor":
        return mul(self, self)

    def backward(self) -> Dict["Tensor", np.ndarray]:
        return backward(self)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw, "div")


def tabs(x: Tensor) -> Tensor:
    # np.sign(0) == 0: subgradient at the kink is zero
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- activations ----------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    if not 0.0 < alpha < 1.0:
        raise ContractError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)
    return _make(x.data * slope, (x,), lambda g: (g * slope,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(x: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


# -- convolution ----------------------------------------------------------
def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of an NCHW input with an (out, in, kh, kw) kernel."""
    x = _as_tensor(x)
    weight = _as_tensor(weight, x)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ContractError(f"invalid stride {(sh, sw)} or padding {(ph, pw)}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d output would be empty: input {x.shape} vs kernel {weight.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = cols[:, :, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]
    # cols: (n, c, oh, ow, kh, kw)
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # (n, oh, ow, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + (oh - 1) * sh + 1 : sh, j : j + (ow - 1) * sw + 1 : sw] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, bw, "conv2d")


def asymmetric_conv_pair(
    x: Tensor,
    k: int,
    row_kernel: Tensor,
    col_kernel: Tensor,
    row_bias: Optional[Tensor] = None,
    col_bias: Optional[Tensor] = None,
) -> Tensor:
    """A 1xk convolution followed by a kx1 convolution, both size-preserving."""
    if k < 3 or k % 2 == 0:
        raise ContractError(f"asymmetric kernel size must be odd and >= 3, got {k}")
    if row_kernel.shape[2:] != (1, k) or col_kernel.shape[2:] != (k, 1):
        raise DimensionError(
            f"expected kernels of spatial size (1,{k}) and ({k},1), got {row_kernel.shape} and {col_kernel.shape}"
        )
    half = k // 2
    mid = conv2d(x, row_kernel, row_bias, stride=1, padding=(0, half))
    return conv2d(mid, col_kernel, col_bias, stride=1, padding=(half, 0))


# -- pooling and resampling ----------------------------------------------
def pool2d(x: Tensor, kind: str = "max", k: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if h < k or w < k:
        raise DimensionError(f"pool window {k} larger than input {x.shape}")
    if kind not in ("max", "avg"):
        raise ContractError(f"unknown pool kind {kind!r}")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    flat = win.reshape(n, c, oh, ow, k * k)

    def scatter(gwin):
        gx = np.zeros(x.shape, dtype=gwin.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += gwin[
                    ..., i * k + j
                ]
        return gx

    if kind == "avg":
        out = flat.mean(axis=-1)

        def bw(g):
            gwin = np.repeat((g / (k * k))[..., None], k * k, axis=-1)
            return (scatter(gwin),)

        return _make(out.astype(x.dtype), (x,), bw, "avg_pool")

    # argmax returns the first maximum in row-major window order
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gwin = np.zeros(g.shape + (k * k,), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        return (scatter(gwin),)

    return _make(np.ascontiguousarray(out), (x,), bw, "max_pool")


def _bilinear_matrix(size: int, dtype) -> np.ndarray:
    """(2*size, size) interpolation matrix for 2x half-pixel-centre upsampling."""
    m = np.zeros((2 * size, size), dtype=dtype)
    for o in range(2 * size):
        src = (o + 0.5) / 2.0 - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), size - 1)
        hi_c = min(max(lo + 1, 0), size - 1)
        m[o, lo_c] += 1.0 - frac
        m[o, hi_c] += frac
    return m


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    if mode == "nearest":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3)

        def bw(g):
            n, c, h2, w2 = g.shape
            return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

        return _make(out, (x,), bw, "upsample_nearest")
    if mode != "bilinear":
        raise ContractError(f"unknown upsample mode {mode!r}")
    ah = _bilinear_matrix(x.shape[2], x.dtype)
    aw = _bilinear_matrix(x.shape[3], x.dtype)
    out = np.einsum("ph,nchw,qw->ncpq", ah, x.data, aw, optimize=True)

    def bw(g):
        return (np.einsum("ph,ncpq,qw->nchw", ah, g, aw, optimize=True),)

    return _make(out, (x,), bw, "upsample_bilinear")


# -- channel plumbing ------------------------------------------------------
def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"cannot concatenate channels of {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


def concat_many(parts: Sequence[Tensor]) -> Tensor:
    out = parts[0]
    for p in parts[1:]:
        out = concat_channels(out, p)
    return out


def split_channels(x: Tensor, at: int) -> Tuple[Tensor, Tensor]:
    c = x.shape[1]
    if not 0 <= at <= c:
        raise DimensionError(f"split point {at} outside channel range of {x.shape}")

    def piece(lo, hi):
        def bw(g):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[:, lo:hi] = g
            return (full,)

        return _make(np.ascontiguousarray(x.data[:, lo:hi]), (x,), bw, "split")

    return piece(0, at), piece(at, c)


def forward_diff(x: Tensor, axis: int) -> Tensor:
    """x[i+1] - x[i] along ``axis``; the last slice is zero (edge replication)."""
    if x.shape[axis] < 2:
        raise DimensionError(f"forward difference needs size >= 2 along axis {axis}, got {x.shape}")
    d = np.diff(x.data, axis=axis)
    pad = [(0, 0)] * x.ndim
    pad[axis] = (0, 1)
    out = np.pad(d, pad)

    def bw(g):
        gi = np.take(g, range(g.shape[axis] - 1), axis=axis)
        gx = np.zeros(x.shape, dtype=g.dtype)
        lead = [slice(None)] * x.ndim
        tail = [slice(None)] * x.ndim
        lead[axis] = slice(1, None)
        tail[axis] = slice(None, -1)
        gx[tuple(lead)] += gi
        gx[tuple(tail)] -= gi
        return (gx,)

    return _make(out, (x,), bw, "forward_diff")


# -- tape replay -----------------------------------------------------------
def _collect(root: Tensor) -> list:
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t._id, reverse=True)
    return nodes


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Returns a mapping from each such leaf to the gradient contributed by
    this call (before accumulation with any earlier value).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: Dict[Tensor, np.ndarray] = {}
    for node in _collect(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            result[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return result


# -- finite-difference check -----------------------------------------------
@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def gradcheck(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
    indices: Optional[Sequence[int]] = None,
    analytic: Optional[np.ndarray] = None,
    atol: float = 1e-6,
) -> GradcheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Relative error per element is |a - n| / max(|a|, |n|, atol). Central
    differences carry round-off of roughly eps * |f| / h (~1e-11 for O(1)
    losses at h=1e-5), so ``atol`` keeps near-zero gradient entries from
    being judged on noise alone. ``analytic`` overrides the tape gradient (used for negative
    controls).
    """
    x64 = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    out = f(x64)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("gradcheck: function output is not finite")
    if analytic is None:
        backward(out)
        analytic = x64.grad if x64.grad is not None else np.zeros_like(x64.data)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    flat = x64.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    count = 0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x64.data)).item()
        flat[i] = orig - h
        fm = f(Tensor(x64.data)).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"gradcheck: non-finite output when perturbing element {i}")
        num = (fp - fm) / (2 * h)
        a = analytic[i]
        err = abs(a - num) / max(abs(a), abs(num), atol)
        worst = max(worst, err)
        count += 1
    return GradcheckReport(max_rel_error=float(worst), tol=tol, checked=count)
