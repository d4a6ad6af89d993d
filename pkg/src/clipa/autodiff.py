"""Dense tensors with define-by-run reverse-mode differentiation.

A small numpy-backed engine: each op computes its forward value eagerly and,
when any input tracks gradients, records a closure that maps the output
gradient to input gradients.  ``Tensor.backward`` walks the recorded graph
once in reverse topological order and accumulates (``+=``) into ``.grad``.

Compute runs in float32 by default; ``precision(np.float64)`` switches every
newly created tensor to float64 (used by gradient checks).

Matmuls report multiply-accumulates to any active :class:`FlopCounter`; this
is the measured side of the FLOPs accounting in :mod:`clipa.cost`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_state = {"dtype": np.float32, "grad": True}
_counters: list["FlopCounter"] = []


def get_dtype():
    return _state["dtype"]


def set_precision(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    old = _state["dtype"]
    set_precision(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


class FlopCounter:
    """Counts matmul multiply-accumulates issued while active.

    >>> with FlopCounter() as fc:
    ...     _ = matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    >>> fc.macs
    24
    """

    def __init__(self):
        self.macs = 0

    def __enter__(self):
        _counters.append(self)
        return self

    def __exit__(self, *exc):
        _counters.remove(self)
        return False


def _count(macs: int) -> None:
    for c in _counters:
        c.macs += int(macs)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=get_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self):
        g = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{g})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out.op = "leaf"
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ----------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

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

    # -- backward -------------------------------------------------------------
    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def topological_order(root: Tensor) -> list[Tensor]:
    """Tracked nodes reachable from ``root``, inputs before outputs, each once."""
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    track = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# -- elementwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad / bd, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * ad / (bd * bd), bd.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _result(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(y, (a,), backward, "gelu")


# -- reductions and shape ops ----------------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    """Permute axes; with no ``axes`` swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose needs >= 2 dims, got shape {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(_check_axis(ax, a.ndim) for ax in axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, old),), "broadcast")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = _check_axis(axis, tensors[0].ndim)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# -- linear algebra -----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading dims.

    Backward: ``dA = dC @ B^T``, ``dB = A^T @ dC`` (summed over broadcast dims).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    m, k = ad.shape[-2:]
    n = bd.shape[-1]
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    _count(batch * m * k * n)

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            # fold batch dims into one GEMM for the shared right operand
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(out, (a, b), backward, "matmul")


# -- normalizations -----------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    sm = np.exp(y)
    return _result(y, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layernorm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    if eps <= 0:
        raise ValueError(f"layernorm eps must be > 0, got {eps}")
    a = as_tensor(a)
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gs = g.sum(axis=-1, keepdims=True)
        gx = (g * xhat).sum(axis=-1, keepdims=True)
        return (inv / n * (n * g - gs - xhat * gx),)

    return _result(xhat, (a,), backward, "layernorm")


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    if eps <= 0:
        raise ValueError(f"l2_normalize eps must be > 0, got {eps}")
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    clamped = norm <= eps
    denom = np.where(clamped, eps, norm)
    y = x / denom

    def backward(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(clamped, g / denom, (g - y * proj) / denom),)

    return _result(y, (a,), backward, "l2_normalize")


# -- indexing ---------------------------------------------------------------------

def gather_rows(a, indices) -> Tensor:
    """Select rows along the token axis.

    ``a`` of shape ``[n, d]`` with ``indices`` of shape ``[k]``, or batched
    ``a`` of shape ``[B, n, d]`` with per-sample ``indices`` of shape ``[B, k]``.
    """
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    n = a.shape[-2] if a.ndim >= 2 else 0
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for {n} rows")
    x = a.data
    if x.ndim == 2 and idx.ndim == 1:
        out = x[idx]

        def backward(g):
            full = np.zeros_like(x)
            np.add.at(full, idx, g)
            return (full,)
    elif x.ndim == 3 and idx.ndim == 2 and idx.shape[0] == x.shape[0]:
        out = np.take_along_axis(x, idx[:, :, None], axis=1)
        rows = np.arange(x.shape[0])[:, None]

        def backward(g):
            full = np.zeros_like(x)
            np.add.at(full, (rows, idx), g)
            return (full,)
    else:
        raise DimensionError(f"gather_rows: cannot index {a.shape} with indices {idx.shape}")
    return _result(out, (a,), backward, "gather_rows")


def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array of any shape."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"id out of range for table of {weight.shape[0]} rows")
    w = weight.data

    def backward(g):
        full = np.zeros_like(w)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, w.shape[1]))
        return (full,)

    return _result(w[ids], (weight,), backward, "embedding")


# -- gradient checking --------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-6) -> float:
    """Max over parameter entries of ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` is re-evaluated with each entry perturbed in place, so it must read
    the current values of ``params``.  Requires float64 mode.
    """
    params = list(params)
    if get_dtype() is not np.float64 or any(p.data.dtype != np.float64 for p in params):
        raise NumericError("grad_check requires 64-bit mode")
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise NumericError("non-finite function value")
    if out.requires_grad:
        out.backward()
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data.sum())
                flat[i] = orig - eps
                fm = float(f().data.sum())
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError(f"non-finite value while perturbing {p.name or 'param'}[{i}]")
                numeric = (fp - fm) / (2 * eps)
                a = float(analytic.reshape(-1)[i])
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
