"""A small dense-tensor engine with tape-based reverse-mode autodiff.

Only the primitives an encoder MLM needs are provided. Arrays are numpy;
single precision is the default and double precision is used by gradient
checks.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def default_precision(dtype):
    global _DEFAULT_DTYPE
    prev, _DEFAULT_DTYPE = _DEFAULT_DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> "Tape":
        tape = Tape.record(self)
        tape.backward(self, grad)
        return tape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag})"

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / other)

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
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    else:
        out.op = op
    return out


class Tape:
    """Executed operations in topological order (inputs before outputs)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
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
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def backward(self, root: Tensor, grad=None) -> None:
        if not root.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if root.data.size != 1:
                raise RuntimeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(root.data)
        pending: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.dtype)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) else as_tensor(a, like=b)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) else as_tensor(a, like=b)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        # scalar or constant array: keep the tensor's dtype
        c = np.asarray(b, dtype=a.dtype)

        def backward_c(g):
            return (_unbroadcast(g * c, a.shape),)

        return _result(a.data * c, (a,), backward_c, "scale")
    a = as_tensor(a, like=b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        k, n = b.shape

        def backward2(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

        return _result(a.data @ b.data, (a, b), backward2, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "bmm")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(a.data, axes), (a,), backward, "transpose")


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        return (g * (1 - y * y),)

    return _result(y, (a,), backward, "tanh")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    c = x.dtype.type(SQRT_2_OVER_PI)
    k = x.dtype.type(GELU_CUBIC)
    t = np.tanh(c * (x + k * x * x * x))
    y = 0.5 * x * (1 + t)

    def backward(g):
        dt = (1 - t * t) * c * (1 + 3 * k * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * dt),)

    return _result(y, (a,), backward, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise DimensionError(
            f"layer_norm over width {h} got gamma {gamma.shape} and beta {beta.shape}")
    if not eps > 0:
        raise ValueError("layer_norm eps must be > 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    y = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dy = g * gamma.data
            dx = rstd * (dy - dy.mean(axis=-1, keepdims=True)
                         - xhat * (dy * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _result(y, (x, gamma, beta), backward, "layer_norm")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; backward scatter-adds into the looked-up rows."""
    ids = np.asarray(ids)
    if ids.size and not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"ids must be integers, got {ids.dtype}")
    ids = ids.astype(np.int64)
    n = table.shape[0]
    bad = np.flatnonzero((ids < 0) | (ids >= n))
    if bad.size:
        pos = int(bad[0])
        raise IndexError(f"id {int(ids.reshape(-1)[pos])} at position {pos} is outside [0, {n})")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    return _result(table.data[ids], (table,), backward, "gather_rows")


def softmax_cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-softmax of ``targets`` over rows selected by ``mask``."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [n, V], got {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if targets.shape[0] != n or mask.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {targets.shape[0]} targets, {mask.shape[0]} mask")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("no supervised positions")
    sel_t = targets[mask]
    if sel_t.min() < 0 or sel_t.max() >= v:
        raise IndexError(f"target outside [0, {v})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.flatnonzero(mask)
    nll = logsum[rows] - z[rows, sel_t]
    loss = np.asarray(nll.sum() / count, dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, sel_t] -= 1
        p[~mask] = 0
        return (p * (g / count),)

    return _result(loss, (logits,), backward, "softmax_xent")


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float | None = None) -> float:
    """Largest gap between reverse-mode and central-difference gradients.

    The gap is ``max|analytic - numeric|`` over every coordinate of every input
    that requires grad, divided by the largest gradient magnitude seen by
    either method. Coordinates with a vanishing true gradient therefore do not
    turn round-off into a spurious relative error.
    """
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite function value")
    out.backward()
    gap = scale = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        step = eps if eps is not None else (1e-6 if t.dtype == np.float64 else 3e-3)
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        numeric = np.zeros(t.shape, dtype=np.float64)
        flat = t.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                hi, lo = flat.dtype.type(orig + step), flat.dtype.type(orig - step)
                flat[i] = hi
                fp = float(f(*inputs).data)
                flat[i] = lo
                fm = float(f(*inputs).data)
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise FloatingPointError(f"non-finite value perturbing coordinate {i}")
                numeric.reshape(-1)[i] = (fp - fm) / (float(hi) - float(lo))
        if not np.isfinite(analytic).all():
            raise FloatingPointError("non-finite analytic gradient")
        gap = max(gap, float(np.abs(analytic - numeric).max(initial=0.0)))
        scale = max(scale, float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    return gap / scale if scale > 0 else gap
