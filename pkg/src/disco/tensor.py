"""Minimal reverse-mode autodiff over numpy buffers.

A :class:`Tensor` wraps an ndarray plus an optional backward closure. Ops
record graph nodes only when some input requires gradients, so inference
paths (frozen teachers, momentum encoders) run as plain numpy. Every op
validates that its output is finite; NaN or Inf anywhere is an error, not
a value.

Precision is a process-global switch (``f32`` default, ``f64`` for
gradient checking); tensors are created in the active dtype and ops
require their operands to agree.
"""

from __future__ import annotations

import contextlib
import hashlib
import warnings

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "set_precision",
    "get_precision",
    "precision",
    "no_grad",
    "rng_from_key",
    "derive_seed",
    "constant",
    "matmul",
    "conv2d",
    "div",
    "relu",
    "global_avg_pool",
    "reshape",
    "transpose",
    "concatenate",
    "l2_normalize",
    "softmax",
    "log_softmax",
    "log",
    "exp",
    "sqrt",
    "absolute",
    "mean",
    "tsum",
    "squared_difference",
]


class ShapeError(ValueError):
    """Operand shapes do not fit the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype = np.float32
_grad_enabled = True


def set_precision(mode: str) -> None:
    """Switch the global dtype for newly created tensors ('f32' or 'f64')."""
    global _dtype
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}, expected 'f32' or 'f64'")
    _dtype = _PRECISIONS[mode]


def get_precision() -> str:
    return "f32" if _dtype == np.float32 else "f64"


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch global precision (restores the prior mode on exit)."""
    prior = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(prior)


def default_dtype():
    return _dtype


@contextlib.contextmanager
def no_grad():
    """Suppress graph recording, e.g. for evaluation-only forward passes."""
    global _grad_enabled
    prior = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prior


def _key_hash(parts, digest_size: int) -> bytes:
    h = hashlib.blake2b(digest_size=digest_size)
    for part in parts:
        if isinstance(part, (int, np.integer)):
            h.update(b"i" + int(part).to_bytes(16, "little", signed=True))
        elif isinstance(part, str):
            h.update(b"s" + part.encode("utf-8"))
        else:
            raise TypeError(f"rng key parts must be int or str, got {type(part).__name__}")
        h.update(b"\x00")
    return h.digest()


def rng_from_key(*parts) -> np.random.Generator:
    """Deterministic generator keyed by a tuple of ints/strings.

    The key is hashed with blake2b into a Philox counter key, so any
    (seed, epoch, index, slot) tuple names an independent stream that is
    stable across processes and platforms.
    """
    key = int.from_bytes(_key_hash(parts, 16), "little")
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(*parts) -> int:
    """Fold a key tuple into a non-negative 63-bit integer seed."""
    return int.from_bytes(_key_hash(parts, 8), "little") >> 1


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """An ndarray with an optional autodiff tape entry.

    ``backward()`` on a scalar walks the graph in reverse topological
    order and accumulates gradients into ``.grad`` of every reachable
    tensor with ``requires_grad``. Repeated backward calls keep
    accumulating; call ``zero_grad`` (or the optimizer's) to reset.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
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

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = "detach"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff core ---------------------------------------------------

    def backward(self) -> None:
        if self.data.shape != ():
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=self.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy() if node._backward is None else g
                else:
                    node.grad = node.grad + g
                if not np.all(np.isfinite(node.grad)):
                    raise NumericError(f"non-finite gradient at {node._op} node")
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, _wrap(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self.dtype))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def constant(data, dtype=None) -> Tensor:
    """A tensor that never tracks gradients (labels, masks, queue banks)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _require_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcastable(sa: tuple, sb: tuple) -> bool:
    for x, y in zip(reversed(sa), reversed(sb)):
        if x != y and x != 1 and y != 1:
            return False
    return True


# -- arithmetic -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dtype(a, b, "add")
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dtype(a, b, "sub")
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dtype(a, b, "mul")
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), backward, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def backward(g):
        return (g * s,)

    return _node(out, (a,), backward, "scale")


def div(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dtype(a, b, "div")
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    _check_finite(out, "div")

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward, "div")


def squared_difference(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (a - b)^2."""
    _require_same_dtype(a, b, "squared_difference")
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(
            f"squared_difference: shapes {a.shape} and {b.shape} do not broadcast")
    diff = a.data - b.data
    out = diff * diff

    def backward(g):
        gd = 2.0 * g * diff
        return _unbroadcast(gd, a.shape), _unbroadcast(-gd, b.shape)

    return _node(out, (a, b), backward, "squared_difference")


# -- matmul / conv ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports 2-D operands and equal-batch stacked matmul."""
    _require_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        if not (a.ndim == 2 and b.ndim == 2):
            raise ShapeError(
                f"matmul: batch dims of {a.shape} and {b.shape} must match")
    with np.errstate(over="ignore"):  # the finite check is the signal
        out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            ph: int, pw: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) does not fit input {x.shape} "
                         f"with stride ({sh},{sw}) padding ({ph},{pw})")
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # windows: (n, c, kh, kw, ho, wo) gathered by strided slicing
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(gcols: np.ndarray, xshape: tuple, kh: int, kw: int, sh: int, sw: int,
            ph: int, pw: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = xshape
    g = gcols.reshape(n, c, kh, kw, ho, wo)
    buf = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += g[:, :, i, j]
    if ph or pw:
        buf = buf[:, :, ph:ph + h, pw:pw + w]
    return buf


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride=1, padding=0) -> Tensor:
    """2-D cross-correlation over NCHW input via im2col.

    ``w`` has shape (filters, in_channels, kh, kw); ``b``, if given, has
    shape (filters,) and is broadcast over batch and space.
    """
    _require_same_dtype(x, w, "conv2d")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input and FCHW weight, "
                         f"got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != weight channels "
                         f"{w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, wid = x.shape
    f, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x.data, kh, kw, sh, sw, ph, pw)  # (n, c*kh*kw, L)
    wmat = w.data.reshape(f, -1)
    out = np.matmul(wmat, cols).reshape(n, f, ho, wo)
    if b is not None:
        out = out + b.data.reshape(1, f, 1, 1)

    def backward(g):
        gmat = g.reshape(n, f, ho * wo)
        gw = np.einsum("nfl,nkl->fk", gmat, cols, optimize=True).reshape(w.shape)
        gcols = np.matmul(wmat.T, gmat)
        gx = _col2im(gcols, x.shape, kh, kw, sh, sw, ph, pw, ho, wo)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward, "conv2d")


# -- shape ops ----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from e

    def backward(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) for a in axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _node(out, (x,), backward, "transpose")


def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concatenate: empty tensor list")
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError("concatenate: mixed dtypes")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(
            f"concatenate: shapes {[t.shape for t in tensors]} on axis {axis}") from e
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), backward, "concatenate")


# -- nonlinearities and reductions ---------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return _node(out, (x,), backward, "relu")


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC mean over the spatial grid."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    inv = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], x.shape).astype(x.dtype),)

    return _node(out, (x,), backward, "global_avg_pool")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).astype(x.dtype),)

    return _node(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.shape[a] for a in axis]))
    else:
        count = x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)
    inv = 1.0 / count

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g * inv, x.shape).astype(x.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg * inv, x.shape).astype(x.dtype),)

    return _node(np.asarray(out), (x,), backward, "mean")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log: domain requires strictly positive input")
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _node(out, (x,), backward, "log")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    _check_finite(out, "exp")

    def backward(g):
        return (g * out,)

    return _node(out, (x,), backward, "exp")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NumericError("sqrt: negative input")
    out = np.sqrt(x.data)

    def backward(g):
        # Kink at exactly zero is the caller's problem; add an epsilon upstream.
        denom = 2.0 * out
        if np.any(denom == 0):
            raise NumericError("sqrt: gradient at zero is unbounded")
        return (g / denom,)

    return _node(out, (x,), backward, "sqrt")


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.data)

    def backward(g):
        return (g * np.sign(x.data),)

    return _node(out, (x,), backward, "absolute")


def l2_normalize(x: Tensor, axis: int = -1, zero_warns: bool = True) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.

    An all-zero slice maps to zeros (its gradient contribution is zeroed
    too) and emits a RuntimeWarning, so degenerate embeddings surface in
    logs instead of becoming NaN.
    """
    norms = np.sqrt(np.sum(np.square(x.data), axis=axis, keepdims=True))
    zero = norms == 0
    if np.any(zero):
        if zero_warns:
            warnings.warn("l2_normalize: zero-norm slice mapped to zeros",
                          RuntimeWarning, stacklevel=2)
        safe = np.where(zero, 1.0, norms)
    else:
        safe = norms
    out = x.data / safe

    def backward(g):
        # d/dx (x/|x|) = (g - (g.y) y) / |x| with y the unit output.
        dot = np.sum(g * out, axis=axis, keepdims=True)
        gx = (g - dot * out) / safe
        if np.any(zero):
            gx = np.where(zero, 0.0, gx)
        return (gx.astype(x.dtype, copy=False),)

    return _node(out, (x,), backward, "l2_normalize")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward, "log_softmax")
