"""Dense float64 tensors with reverse-mode differentiation.

Every primitive is a pair ``(forward, vjp)``. ``forward`` maps numpy arrays to an
output array plus whatever it wants saved for the adjoint; ``vjp`` maps the output
cotangent back to one cotangent per input. Broadcasting is undone generically, so
elementwise adjoints may return cotangents in the broadcast shape.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, NamedTuple, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


class ContractViolation(ValueError):
    """Raised when a caller breaks an operation's precondition."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Primitive(NamedTuple):
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    vjp: Callable[..., Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "saved", "kwargs", "name")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.op: Primitive | None = None
        self.saved: Any = None
        self.kwargs: dict = {}
        self.name = name

    # -- array-ish surface -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def relu(self):
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def apply(prim: Primitive, *inputs, **kwargs) -> Tensor:
    tensors = tuple(as_tensor(t) for t in inputs)
    out, saved = prim.forward(*(t.data for t in tensors), **kwargs)
    result = Tensor(out)
    if _GRAD_ENABLED and any(t.requires_grad for t in tensors):
        result.requires_grad = True
        result.parents = tensors
        result.op = prim
        result.saved = saved
        result.kwargs = kwargs
    return result


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractViolation(
            f"backward() needs a scalar loss, got shape {getattr(loss, 'shape', None)}"
        )
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        in_grads = node.op.vjp(g, node.saved, *(p.data for p in node.parents), **node.kwargs)
        for p, gp in zip(node.parents, in_grads):
            if gp is None or not p.requires_grad:
                continue
            gp = _unbroadcast(np.asarray(gp, dtype=DTYPE), p.data.shape)
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp


@dataclass
class ComputationRecord:
    """Topologically ordered trace of the primitives that produced an output."""

    nodes: list[Tensor] = field(default_factory=list)

    @property
    def ops(self) -> list[str]:
        return [n.op.name for n in self.nodes if n.op is not None]

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded node from the leaves' current values."""
        values: dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            if node.op is None:
                values[id(node)] = node.data
            else:
                args = [values.get(id(p), p.data) for p in node.parents]
                values[id(node)], _ = node.op.forward(*args, **node.kwargs)
            outs.append(values[id(node)])
        return outs


def trace(output: Tensor) -> ComputationRecord:
    return ComputationRecord(_toposort(output))


# ---------------------------------------------------------------------------
# Primitive definitions
# ---------------------------------------------------------------------------

def _prim(name, fwd, vjp) -> Primitive:
    return Primitive(name, fwd, vjp)


_ADD = _prim("add", lambda a, b: (a + b, None), lambda g, s, a, b: (g, g))
_SUB = _prim("sub", lambda a, b: (a - b, None), lambda g, s, a, b: (g, -g))
_MUL = _prim("mul", lambda a, b: (a * b, None), lambda g, s, a, b: (g * b, g * a))
_DIV = _prim("div", lambda a, b: (a / b, None), lambda g, s, a, b: (g / b, -g * a / (b * b)))
_NEG = _prim("neg", lambda a: (-a, None), lambda g, s, a: (-g,))
_POW = _prim(
    "pow",
    lambda a, p: (a**p, None),
    lambda g, s, a, p: (g * p * a ** (p - 1),),
)


def _exp_fwd(a):
    out = np.exp(a)
    return out, out


_EXP = _prim("exp", _exp_fwd, lambda g, out, a: (g * out,))
_LOG = _prim("log", lambda a: (np.log(a), None), lambda g, s, a: (g / a,))


def _tanh_fwd(a):
    out = np.tanh(a)
    return out, out


_TANH = _prim("tanh", _tanh_fwd, lambda g, out, a: (g * (1.0 - out * out),))


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _sigmoid_fwd(a):
    out = _sigmoid(a)
    return out, out


_SIGMOID = _prim("sigmoid", _sigmoid_fwd, lambda g, out, a: (g * out * (1.0 - out),))
_SOFTPLUS = _prim(
    "softplus",
    lambda a: (np.logaddexp(0.0, a), None),
    lambda g, s, a: (g * _sigmoid(a),),
)
_RELU = _prim("relu", lambda a: (np.maximum(a, 0.0), None), lambda g, s, a: (g * (a > 0),))


def _matmul_vjp(g, s, a, b):
    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


_MATMUL = _prim("matmul", lambda a, b: (a @ b, None), _matmul_vjp)


def _sum_vjp(g, s, a, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape),)


_SUM = _prim(
    "sum",
    lambda a, axis, keepdims: (np.sum(a, axis=axis, keepdims=keepdims), None),
    _sum_vjp,
)
_RESHAPE = _prim(
    "reshape",
    lambda a, shape: (a.reshape(shape), None),
    lambda g, s, a, shape: (g.reshape(a.shape),),
)


def _transpose_vjp(g, s, a, axes):
    if axes is None:
        return (g.T,)
    return (np.transpose(g, np.argsort(axes)),)


_TRANSPOSE = _prim("transpose", lambda a, axes: (np.transpose(a, axes), None), _transpose_vjp)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer, type(None), type(Ellipsis))) for p in parts)


def _getitem_vjp(g, s, a, idx):
    out = np.zeros_like(a)
    if _is_basic_index(idx):
        out[idx] = g
    else:
        np.add.at(out, idx, g)
    return (out,)


_GETITEM = _prim("getitem", lambda a, idx: (a[idx], None), _getitem_vjp)


def _concat_fwd(*arrays, axis):
    return np.concatenate(arrays, axis=axis), None


def _concat_vjp(g, s, *arrays, axis):
    cuts = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


_CONCAT = _prim("concat", _concat_fwd, _concat_vjp)


def _softmax_fwd(a, axis):
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return out, out


def _softmax_vjp(g, out, a, axis):
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


_SOFTMAX = _prim("softmax", _softmax_fwd, _softmax_vjp)
_CUMSUM = _prim(
    "cumsum",
    lambda a, axis: (np.cumsum(a, axis=axis), None),
    lambda g, s, a, axis: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),),
)


def _gather_vjp(g, s, a, index, axis):
    out = np.zeros_like(a)
    grids = list(np.indices(index.shape, sparse=True))
    grids[axis] = index
    np.add.at(out, tuple(grids), g)
    return (out,)


_GATHER = _prim(
    "gather",
    lambda a, index, axis: (np.take_along_axis(a, index, axis=axis), None),
    _gather_vjp,
)


def _embedding_vjp(g, s, table, ids):
    out = np.zeros_like(table)
    np.add.at(out, ids, g)
    return (out,)


_EMBEDDING = _prim("embedding", lambda table, ids: (table[ids], None), _embedding_vjp)
_WHERE = _prim(
    "where",
    lambda a, b, cond: (np.where(cond, a, b), None),
    lambda g, s, a, b, cond: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)),
)


def _layer_norm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def _layer_norm_vjp(g, saved, x, gamma, beta, eps):
    xhat, inv = saved
    dxhat = g * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, g * xhat, g


_LAYER_NORM = _prim("layer_norm", _layer_norm_fwd, _layer_norm_vjp)


def _conv1d_fwd(x, w, b):
    k, cin, cout = w.shape
    T = x.shape[1]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, k - 1 - pad), (0, 0)))
    cols = np.stack([xp[:, j : j + T, :] for j in range(k)], axis=2)
    cols = cols.reshape(x.shape[0], T, k * cin)
    return cols @ w.reshape(k * cin, cout) + b, cols


def _conv1d_vjp(g, cols, x, w, b):
    k, cin, cout = w.shape
    B, T, _ = x.shape
    pad = k // 2
    gw = (cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(k, cin, cout)
    gcols = (g @ w.reshape(k * cin, cout).T).reshape(B, T, k, cin)
    gxp = np.zeros((B, T + k - 1, cin))
    for j in range(k):
        gxp[:, j : j + T, :] += gcols[:, :, j, :]
    return gxp[:, pad : pad + T, :], gw, g


_CONV1D = _prim("conv1d", _conv1d_fwd, _conv1d_vjp)
_DROPOUT = _prim(
    "dropout",
    lambda x, keep, p: (x * keep / (1.0 - p), None),
    lambda g, s, x, keep, p: (g * keep / (1.0 - p),),
)


# ---------------------------------------------------------------------------
# Public functional surface
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    return apply(_ADD, a, b)


def sub(a, b) -> Tensor:
    return apply(_SUB, a, b)


def mul(a, b) -> Tensor:
    return apply(_MUL, a, b)


def div(a, b) -> Tensor:
    return apply(_DIV, a, b)


def neg(a) -> Tensor:
    return apply(_NEG, a)


def power(a, p: float) -> Tensor:
    return apply(_POW, a, p=float(p))


def exp(a) -> Tensor:
    return apply(_EXP, a)


def log(a) -> Tensor:
    return apply(_LOG, a)


def tanh(a) -> Tensor:
    return apply(_TANH, a)


def sigmoid(a) -> Tensor:
    return apply(_SIGMOID, a)


def softplus(a) -> Tensor:
    return apply(_SOFTPLUS, a)


def relu(a) -> Tensor:
    return apply(_RELU, a)


def sqrt(a) -> Tensor:
    return apply(_POW, a, p=0.5)


def matmul(a, b) -> Tensor:
    return apply(_MATMUL, a, b)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    if isinstance(axis, list):
        axis = tuple(axis)
    return apply(_SUM, a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def masked_mean(a, mask) -> Tensor:
    """Mean of ``a`` over positions where ``mask`` is true; 0 if the mask is empty."""
    m = np.broadcast_to(np.asarray(mask, dtype=DTYPE), as_tensor(a).shape)
    n = m.sum()
    if n == 0:
        return tsum(as_tensor(a) * 0.0)
    return tsum(as_tensor(a) * m) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    return apply(_RESHAPE, a, shape=tuple(shape))


def transpose(a, axes=None) -> Tensor:
    return apply(_TRANSPOSE, a, axes=None if axes is None else tuple(axes))


def getitem(a, idx) -> Tensor:
    return apply(_GETITEM, a, idx=idx)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    return apply(_CONCAT, *tensors, axis=axis)


def softmax(a, axis: int = -1) -> Tensor:
    return apply(_SOFTMAX, a, axis=axis)


def cumsum(a, axis: int = -1) -> Tensor:
    return apply(_CUMSUM, a, axis=axis)


def gather(a, index: np.ndarray, axis: int) -> Tensor:
    """``np.take_along_axis`` with a scatter-add adjoint."""
    a = as_tensor(a)
    return apply(_GATHER, a, index=np.asarray(index, dtype=np.intp), axis=axis % a.ndim)


def embedding(table, ids: np.ndarray) -> Tensor:
    return apply(_EMBEDDING, table, ids=np.asarray(ids, dtype=np.intp))


def where(cond: np.ndarray, a, b) -> Tensor:
    return apply(_WHERE, a, b, cond=np.asarray(cond, dtype=bool))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return apply(_LAYER_NORM, x, gamma, beta, eps=eps)


def conv1d(x, w, b) -> Tensor:
    """Same-padded 1-D convolution. ``x``: (B, T, Cin), ``w``: (k, Cin, Cout), ``b``: (Cout,)."""
    return apply(_CONV1D, x, w, b)


def dropout(x, keep: np.ndarray, p: float) -> Tensor:
    """Inverted dropout with an explicit keep-mask drawn by the caller."""
    return apply(_DROPOUT, x, keep=np.asarray(keep, dtype=bool), p=float(p))
