"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records its
parents and a backward closure on the output. :func:`backward` walks that
tape in reverse topological order, accumulates gradients into the leaves and
then drops the tape, so a graph lives for exactly one forward/backward pass.

Broadcasting is limited to leading dimensions: the smaller operand's shape
must be a suffix of the larger one. Anything else needs an explicit reshape.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, DomainError, NumericError, VocabError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self.name = name

    # -- introspection -------------------------------------------------
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
    def op(self) -> str:
        return self._op

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def is_valid(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators ------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=-1):
        return max_(self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op``; ``backward_fn(g)`` returns one grad per parent."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    else:
        out._op = op
    return out


# -- graph records --------------------------------------------------------

@dataclass
class OpRecord:
    kind: str
    input_ids: tuple
    output_id: int


@dataclass
class Graph:
    nodes: list = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)


def _topo_order(root: Tensor) -> list:
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


def graph_of(root: Tensor) -> Graph:
    """Snapshot of the tape below ``root`` in topological order (inputs first)."""
    order = _topo_order(root)
    ids = {id(n): i for i, n in enumerate(order)}
    g = Graph()
    for i, n in enumerate(order):
        g.nodes.append(OpRecord(n._op, tuple(ids[id(p)] for p in n._parents if id(p) in ids), i))
    return g


def backward(root: Tensor):
    """Populate ``.grad`` on every leaf reachable from scalar ``root``, then free the tape."""
    if root.shape != ():
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}", module="tensor-autodiff")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    grads = {id(root): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None


# -- shape helpers --------------------------------------------------------

def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if len(a) <= len(b) and b[len(b) - len(a):] == a:
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    raise DimensionError(f"{op}: shapes {a} and {b} differ beyond leading dimensions")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.reshape((-1,) + shape).sum(axis=0)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_op(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "negate")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: argument must be strictly positive")
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)

    def bw(g):
        s = np.empty_like(ad)
        pos = ad >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
        e = np.exp(ad[~pos])
        s[~pos] = e / (1.0 + e)
        return (g * s,)

    return make_op(out, (a,), bw, "softplus")


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    shape = a.shape
    x = a.data.reshape(-1)
    out, t = kernels.gelu_fwd(x)
    return make_op(
        out.reshape(shape), (a,), lambda g: (kernels.gelu_bwd(np.ascontiguousarray(g).reshape(-1), x, t).reshape(shape),), "gelu"
    )


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def xlogx(a) -> Tensor:
    """Elementwise ``x * log(x)`` with the convention 0 * log 0 = 0."""
    a = as_tensor(a)
    ad = a.data
    if np.any(ad < 0.0):
        raise DomainError("xlogx: argument must be nonnegative")
    pos = ad > 0.0
    safe = np.where(pos, ad, 1.0)
    out = np.where(pos, ad * np.log(safe), 0.0)
    return make_op(out, (a,), lambda g: (np.where(pos, g * (np.log(safe) + 1.0), 0.0),), "xlogx")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_op(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


# -- reductions -----------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return make_op(out, (a,), lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
    out = a.data.mean(axis=axes, keepdims=keepdims) if axes else a.data.copy()
    return make_op(out, (a,), lambda g: (np.broadcast_to(g.reshape(kept) / n, shape).copy(),), "mean")


def max_(a, axis=-1) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    ax = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax).squeeze(ax)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return make_op(out, (a,), bw, "max")


# -- softmax family -------------------------------------------------------

def _mask_2d(mask, shape) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.ndim > len(shape) or tuple(shape[len(shape) - m.ndim:]) != m.shape:
        raise DimensionError(f"mask shape {m.shape} is not a suffix of {tuple(shape)}")
    if m.ndim == 1:
        m = m[None]
    return np.ascontiguousarray(m.reshape(-1, shape[-1])).view(np.uint8)


def masked_softmax(a, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` (True = visible).

    Masked entries come out exactly 0. A row with no visible entry raises.
    """
    a = as_tensor(a)
    shape = a.shape
    m2 = _mask_2d(mask, shape)
    x2 = a.data.reshape(-1, shape[-1])
    y, bad = kernels.masked_softmax_fwd(x2, m2)
    if bad >= 0:
        raise ContractError(f"masked softmax: row {bad} has no visible entry", module="tensor-autodiff")
    y = y.reshape(shape)

    def bw(g):
        return (kernels.softmax_bwd(y.reshape(-1, shape[-1]), np.ascontiguousarray(g).reshape(-1, shape[-1])).reshape(shape),)

    return make_op(y, (a,), bw, "masked_softmax")


def softmax(a) -> Tensor:
    a = as_tensor(a)
    return masked_softmax(a, np.ones(a.shape[-1], dtype=bool))


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make_op(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    shape = a.shape
    C = shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"layer_norm: affine params must have shape ({C},)")
    y, xhat, rstd = kernels.layer_norm_fwd(a.data.reshape(-1, C), gamma.data, beta.data, eps)

    def bw(g):
        gx, gg, gb = kernels.layer_norm_bwd(np.ascontiguousarray(g).reshape(-1, C), xhat, rstd, gamma.data)
        return gx.reshape(shape), gg, gb

    return make_op(y.reshape(shape), (a, gamma, beta), bw, "layer_norm")


# -- linear algebra and structure -----------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul: operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions {a.shape} @ {b.shape} do not match")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_op(ad @ bd, (a, b), bw, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {shape}: {exc}") from None
    return make_op(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: nothing to concatenate")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {ax}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return make_op(out, ts, lambda g: tuple(np.split(g, sizes, axis=ax)), "concat")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_op(np.ascontiguousarray(out), (a,), bw, "slice")


def embedding(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise VocabError(f"token id out of range [0, {n})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return make_op(table.data[ids], (table,), bw, "embedding")


_OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sub": sub,
    "div": div,
    "exp": exp,
    "log": log,
    "negate": neg,
    "sum": sum_,
    "mean": mean,
    "max": max_,
    "softmax": softmax,
    "masked_softmax": masked_softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "concat": lambda *ts, axis=0: concat(ts, axis),
    "slice": getitem,
    "reshape": reshape,
    "transpose": transpose,
    "embedding": embedding,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "clip": clip,
    "square": square,
    "xlogx": xlogx,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply the op named ``kind`` (same names as the tape records)."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}", module="tensor-autodiff") from None
    return fn(*inputs, **kwargs)


# -- finite-difference checking ------------------------------------------

def grad_check(f, point, h: float = 1e-5, max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps the list of point tensors to a scalar tensor. Entries of
    ``point`` that are plain arrays are wrapped as fresh leaves; Tensor
    entries are perturbed in place and restored, which lets ``f`` close over
    model parameters. ``max_coords`` caps the coordinates probed per tensor
    (sampled with ``seed``). Error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if h <= 0:
        raise ContractError("grad_check: step must be positive", module="tensor-autodiff")
    leaves = []
    for p in point:
        if isinstance(p, Tensor):
            p.requires_grad = True
            p.grad = None
            leaves.append(p)
        else:
            leaves.append(Tensor(np.array(p, dtype=np.float64), requires_grad=True))
    y = f(leaves)
    if not y.is_valid():
        raise NumericError("grad_check: non-finite objective", module="tensor-autodiff")
    backward(y)
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for leaf, ga in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = f(leaves).item()
                flat[i] = orig - h
                fm = f(leaves).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("grad_check: non-finite value under perturbation", module="tensor-autodiff")
                num = (fp - fm) / (2.0 * h)
                err = abs(ga.reshape(-1)[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
    return worst
