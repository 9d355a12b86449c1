"""Dense-tensor core with reverse-mode automatic differentiation.

Tensors wrap numpy arrays and record their producing op through parent
links, so the computation graph is the linked structure itself (append
order is a topological order by construction). `backward` replays the
graph in reverse and accumulates vector-Jacobian products into the
`requires_grad` leaves. Every op output is checked for NaN/Inf on the
spot; non-finite values raise instead of propagating.

float64 is the test precision; float32 is allowed for training builds.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class GraphError(ValueError):
    """Contract violation in graph construction or backward."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by op '{op}'")


class Tensor:
    """N-d array node in the autodiff graph.

    `data` is row-major float32/float64; `grad` is filled by `backward`.
    Values are immutable once produced by an op; only the optimizer
    writes into parameter `data`.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        _check_finite(arr, "leaf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    # -- construction of op outputs ------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"],
                 vjp: Callable[[np.ndarray], tuple]) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out.parents = ()
            out._vjp = None
        return out

    # -- basic properties ----------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _scale(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return _scale(self, 1.0 / float(other))
        raise TypeError("tensor/tensor division not supported; multiply by a reciprocal")

    def __neg__(self):
        return _scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        if p != 2:
            raise TypeError("only **2 supported")
        return mul(self, self)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return sum_(self, axis=axis)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def backward(self, params: Iterable["Tensor"] | None = None):
        backward(self, params)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- primitive ops ------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, "add", (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _scale(a, float(b))
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(out, "mul", (a, b), vjp)


def _scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def vjp(g):
        return (g * c,)

    return Tensor._from_op(out, "scale", (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise GraphError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise GraphError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(out, "matmul", (a, b), vjp)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation:
    0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
    """
    c = np.sqrt(2.0 / np.pi)
    xd = x.data
    inner = c * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        d_inner = c * (1.0 + 3 * 0.044715 * xd ** 2)
        grad = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * d_inner
        return (g * grad,)

    return Tensor._from_op(out, "gelu", (x,), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction for stability."""
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return Tensor._from_op(s, "softmax_rows", (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then affine."""
    d = x.shape[-1]
    if d < 2:
        raise GraphError("layer_norm over a single feature is degenerate")
    if eps <= 0:
        raise GraphError("layer_norm eps must be > 0")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xd - mu) * inv
    out = y * gamma.data + beta.data

    def vjp(g):
        dgamma = _unbroadcast(g * y, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        dy = g * gamma.data
        # dx = inv * (dy - mean(dy) - y * mean(dy*y)), means over last axis
        m1 = dy.mean(axis=-1, keepdims=True)
        m2 = (dy * y).mean(axis=-1, keepdims=True)
        dx = inv * (dy - m1 - y * m2)
        return dx, dgamma, dbeta

    return Tensor._from_op(out, "layer_norm", (x, gamma, beta), vjp)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):   # the finite guard raises on overflow
        out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return Tensor._from_op(out, "exp", (x,), vjp)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def vjp(g):
        return (g / x.data,)

    return Tensor._from_op(out, "log", (x,), vjp)


def sum_(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
        g_exp = np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, x.shape).astype(x.dtype, copy=True),)

    return Tensor._from_op(out, "sum", (x,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.shape[a] for a in axis]))
    else:
        n = x.shape[axis]
    return _scale(sum_(x, axis=axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(out, "reshape", (x,), vjp)


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inverse = np.argsort(axes)
    out = x.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inverse),)

    return Tensor._from_op(out, "transpose", (x,), vjp)


def index(x: Tensor, key) -> Tensor:
    """Basic slicing (no fancy indexing; use `take` for index arrays)."""
    out = x.data[key]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return Tensor._from_op(out, "index", (x,), vjp)


def take(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0; `idx` may be any integer-array shape.

    Output shape is idx.shape + x.shape[1:]. Used for positional-table
    lookups (idx of shape (B, M) against a (max_tokens, D) table).
    """
    idx = np.asarray(idx)
    out = x.data[idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor._from_op(out, "take", (x,), vjp)


def take_tokens(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along axis 1 of a (B, S, D) tensor.

    `idx` is 1-d (shared across the batch) or (B, K) per-sample.
    """
    idx = np.asarray(idx)
    if idx.ndim == 1:
        out = x.data[:, idx, :]
    elif idx.ndim == 2:
        out = np.take_along_axis(x.data, idx[:, :, None], axis=1)
    else:
        raise GraphError(f"take_tokens index must be 1-d or 2-d, got {idx.shape}")

    def vjp(g):
        gx = np.zeros_like(x.data)
        b = np.arange(x.shape[0])[:, None]
        np.add.at(gx, (b, idx if idx.ndim == 2 else idx[None, :]), g)
        return (gx,)

    return Tensor._from_op(out, "take_tokens", (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return Tensor._from_op(out, "concat", tuple(tensors), vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise GraphError(f"dropout rate out of range: {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = x.data * keep

    def vjp(g):
        return (g * keep,)

    return Tensor._from_op(out, "dropout", (x,), vjp)


# -- reverse pass --------------------------------------------------------


def topo_order(loss: Tensor) -> list[Tensor]:
    """Graph nodes reachable from `loss`, inputs before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Reverse-mode accumulation from a scalar loss.

    Fills `.grad` on every `requires_grad` leaf reached from `loss`.
    Leaves listed in `params` but not reached get an explicit zero
    gradient (disconnected != absent). The graph is left intact.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
