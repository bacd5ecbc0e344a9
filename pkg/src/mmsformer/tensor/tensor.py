"""Dense tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient, the
output carries a :class:`Node` holding its parents and a closure that maps the
output gradient to input gradients. :meth:`Tensor.backward` walks the nodes
reachable from a scalar in reverse topological order exactly once.
"""
from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from ..errors import GraphError, GroupingError, NumericError, ShapeError, UnsupportedError
from . import kernels

_DTYPES = {"float32": np.float32, "float64": np.float64}


class _State:
    dtype = np.float32
    grad_enabled = True
    debug = os.environ.get("MMSFORMER_DEBUG", "") not in ("", "0")


_state = _State()


def default_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(name: str):
    """Run the enclosed block with tensors created in ``name`` ("float32" or "float64")."""
    prev = _state.dtype
    _state.dtype = _DTYPES[name]
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def set_debug(flag: bool) -> None:
    """Toggle the NaN/Inf check applied to every op output."""
    _state.debug = bool(flag)


class Node:
    __slots__ = ("parents", "backward_fn", "released")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn
        self.released = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or _state.dtype
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if self._node is None:
            if self.requires_grad:
                self.grad = self.grad + grad
            return
        if self._node.released:
            raise GraphError("backward() called twice on the same graph; rerun the forward pass first")

        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            node = t._node
            if node is None:
                if g is not None and t.requires_grad:
                    t.grad += g
                continue
            if g is not None:
                parent_grads = node.backward_fn(g)
                for p, pg in zip(node.parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node.backward_fn = None
            node.released = True

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _state.debug and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {getattr(backward_fn, '__qualname__', 'op')}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._node = None
    out.grad = None
    out.requires_grad = False
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(tuple(parents), backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.dtype)


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    a = a if isinstance(a, Tensor) else _lift(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None,
        )

    return _result(ad / bd, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _result(y, (x,), lambda g: (g * y * (1 - y),))


_INV_SQRT2 = 1 / np.sqrt(2.0)
_INV_SQRT_2PI = 1 / np.sqrt(2 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    d = x.data
    cdf = (0.5 * (1 + erf(d * _INV_SQRT2))).astype(x.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * d * d) * _INV_SQRT_2PI
        return (g * (cdf + d * pdf).astype(d.dtype),)

    return _result(d * cdf, (x,), backward)


# -- shape manipulation ---------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return _result(y, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.data.transpose(axes))
    return _result(y, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat needs at least one tensor")
    ref = xs[0].shape
    ax = axis % len(ref)
    for i, t in enumerate(xs):
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeError(f"concat: tensor {i} has shape {t.shape}, incompatible with {ref} along axis {axis}")
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in xs], axis=ax), xs, backward)


# -- reductions -------------------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    y = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(y, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def global_avg_pool(x: Tensor) -> Tensor:
    """[C, H, W] -> [C]."""
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool expects [C,H,W], got {x.shape}")
    return mean(x, axis=(1, 2))


# -- linear algebra ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands or batched 3-D operands with equal batch extent."""
    if a.ndim not in (2, 3) or a.ndim != b.ndim or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Token-major affine map: x[N, in] @ w[in, out] + b[out]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear dimension mismatch: input {x.shape}, weight {w.shape}")
    xd, wd = x.data, w.data
    y = xd @ wd
    if b is not None:
        y += b.data

    def backward(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(y, parents, backward)


def pointwise_linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-pixel channel map (a 1x1 convolution): x[Cin,H,W], w[Cin,Cout] -> [Cout,H,W]."""
    if x.ndim != 3 or w.ndim != 2 or x.shape[0] != w.shape[0]:
        raise ShapeError(f"pointwise_linear dimension mismatch: input {x.shape}, weight {w.shape}")
    cin, H, W = x.shape
    xd = x.data.reshape(cin, H * W)
    wd = w.data
    y = wd.T @ xd
    if b is not None:
        y += b.data[:, None]

    def backward(g):
        g2 = g.reshape(-1, H * W)
        gx = (wd @ g2).reshape(cin, H, W) if x.requires_grad else None
        gw = xd @ g2.T if w.requires_grad else None
        gb = g2.sum(axis=1) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(y.reshape(-1, H, W), parents, backward)


# -- normalisation & attention helpers -----------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: last extent {C} does not match gamma {gamma.shape} / beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    y = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (
                dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _result(y, (x, gamma, beta), backward)


# -- spatial ops ------------------------------------------------------------
def _conv_extent(n: int, k: int, stride: int, pad: int, exact: bool, what: str) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded {what} extent {n + 2 * pad}")
    if exact and span % stride:
        raise ShapeError(
            f"conv2d: non-integral output {what} extent ({n} + 2*{pad} - {k})/{stride} + 1"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0,
           groups: int = 1, exact: bool = True) -> Tensor:
    """Cross-correlation of x[Cin,H,W] with w[Cout,Cin/groups,k,k].

    With ``exact=True`` the output extent must divide evenly; ``exact=False``
    floors it, which overlapping patch embeddings rely on.
    """
    if x.ndim != 3 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d expects x[Cin,H,W] and w[Cout,Cin/g,k,k], got {x.shape} and {w.shape}")
    cin, H, W = x.shape
    cout, cpg, k, _ = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise GroupingError(f"conv2d: Cin={cin} and Cout={cout} must both be divisible by groups={groups}")
    if cpg != cin // groups:
        raise ShapeError(f"conv2d: weight {w.shape} expects {cpg * groups} input channels, got {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match Cout={cout}")
    Ho = _conv_extent(H, k, stride, pad, exact, "height")
    Wo = _conv_extent(W, k, stride, pad, exact, "width")
    xd, wd = x.data, w.data

    if groups == cin == cout:
        wk = wd.reshape(cout, k, k)
        y = kernels.dwconv_forward(xd, wk, stride, pad)
        if bias is not None:
            y += bias.data[:, None, None]

        def backward(g):
            g = np.ascontiguousarray(g)
            gx, gw = kernels.dwconv_backward(g, xd, wk, stride, pad)
            gb = g.sum(axis=(1, 2)) if bias is not None else None
            return gx, gw.reshape(wd.shape), gb

    else:
        cout_g = cout // groups
        cols = [kernels.im2col(np.ascontiguousarray(xd[i * cpg:(i + 1) * cpg]), k, stride, pad) for i in range(groups)]
        w2 = wd.reshape(groups, cout_g, cpg * k * k)
        y = np.concatenate([w2[i] @ cols[i] for i in range(groups)], axis=0).reshape(cout, Ho, Wo)
        if bias is not None:
            y += bias.data[:, None, None]

        def backward(g):
            g2 = g.reshape(groups, cout_g, Ho * Wo)
            gw = np.stack([g2[i] @ cols[i].T for i in range(groups)]).reshape(wd.shape) if w.requires_grad else None
            gx = None
            if x.requires_grad:
                gx = np.concatenate(
                    [kernels.col2im(np.ascontiguousarray(w2[i].T @ g2[i]), cpg, H, W, k, stride, pad) for i in range(groups)],
                    axis=0,
                )
            gb = g.sum(axis=(1, 2)) if bias is not None else None
            return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(y, parents, backward)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Half-pixel-centre bilinear upsampling of x[C,H,W] with edge clamping."""
    if x.ndim != 3:
        raise ShapeError(f"bilinear_upsample expects [C,H,W], got {x.shape}")
    _, H, W = x.shape
    if out_h < H or out_w < W:
        raise UnsupportedError(f"bilinear_upsample only enlarges: ({H},{W}) -> ({out_h},{out_w})")
    if (out_h, out_w) == (H, W):
        return x
    y = kernels.upsample_forward(x.data, out_h, out_w)
    return _result(y, (x,), lambda g: (kernels.upsample_backward(np.ascontiguousarray(g), H, W),))
