"""Dense float64 tensors with tape-free reverse-mode autodiff.

Every op returns a new :class:`Tensor` holding its parents and a closure that
pushes the output gradient back to them. Node ids come from one process-wide
counter, so a node always outranks its inputs (even when a model built in one
thread is used from another) and sorting by id gives a topological order.
"""

from __future__ import annotations

import itertools
import re
import threading
from dataclasses import dataclass, field

import numpy as np

LN_EPS = 1e-5

_LAYER_RE = re.compile(r"(?:^|\.)layers\.(\d+)\.")


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class GraphError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


_ids = itertools.count(1)


def _next_id() -> int:
    return next(_ids)  # atomic under the GIL


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = _next_id()
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, id={self.node_id})"

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
            return mul(self, pow_(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A named leaf tensor owned by a model."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable, op="param")
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.requires_grad = bool(value)

    @property
    def layer_index(self) -> int | None:
        return layer_index_of(self.name)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def layer_index_of(name: str) -> int | None:
    """Layer number encoded as ``layers.<k>.`` in a parameter name, else None."""
    m = _LAYER_RE.search(name)
    return int(m.group(1)) if m else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str, node_id: int) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite output from op {op!r} at node {node_id}")


def _make(data, op: str, parents: tuple, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, op=op, parents=parents if needs else (), backward=backward if needs else None)
    _check_finite(out.data, op, out.node_id)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, "mul", (a, b), backward)


def pow_(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data**exponent

    def backward(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _make(data, "pow", (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError below
        data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * data)

    return _make(data, "exp", (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(data, "log", (a,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    data = 0.5 * x * (1.0 + th)

    def backward(g):
        # d/dx = 0.5(1+th) + 0.5 x (1-th^2) c (1 + 3k x^2), built in place
        d = th * th
        np.subtract(1.0, d, out=d)
        d *= x
        d *= (0.5 * _GELU_C) * (1.0 + 3 * 0.044715 * x2)
        d += 0.5
        d += 0.5 * th
        d *= g
        _accumulate(a, d)

    return _make(data, "gelu", (a,), backward)


def dropout(a, mask: np.ndarray | None, p: float) -> Tensor:
    """Inverted dropout with an externally drawn keep-mask (True = keep)."""
    a = as_tensor(a)
    if mask is None or p <= 0.0:
        return a
    if mask.shape != a.shape:
        raise ShapeError(f"dropout: mask shape {mask.shape} != input {a.shape}")
    scale = mask.astype(np.float64) / (1.0 - p)
    data = a.data * scale

    def backward(g):
        _accumulate(a, g * scale)

    return _make(data, "dropout", (a,), backward)


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                ga = a.data.reshape(-1, a.shape[-1])
                _accumulate(b, ga.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(data, "matmul", (a, b), backward)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for ndim {a.ndim}")
    inverse = np.argsort(axes)
    data = np.transpose(a.data, axes)

    def backward(g):
        _accumulate(a, np.transpose(g, inverse))

    return _make(data, "transpose", (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(data, "reshape", (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _accumulate(t, np.take(g, np.arange(lo, hi), axis=axis))

    return _make(data, "concat", tuple(ts), backward)


def slice_(a, idx) -> Tensor:
    """Basic or advanced indexing; backward scatters with ``np.add.at``."""
    a = as_tensor(a)
    try:
        data = a.data[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: bad index for shape {a.shape}") from exc
    data = np.array(data, copy=True)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(data, "slice", (a,), backward)


def embedding(weight, ids: np.ndarray) -> Tensor:
    weight = as_tensor(weight)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table of {weight.shape[0]} rows")
    data = weight.data[ids]

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _accumulate(weight, full)

    return _make(data, "embedding", (weight,), backward)


# ---------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(data, "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    return _make(data, "mean", (a,), backward)


# ---------------------------------------------------------------- nn ops


def layernorm(a, gamma, beta, eps: float = LN_EPS) -> Tensor:
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    data = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, _unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _accumulate(beta, _unbroadcast(g, beta.shape))
        if a.requires_grad:
            gx = g * gamma.data
            d = x.shape[-1]
            dx = rstd / d * (d * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
            _accumulate(a, dx)

    return _make(data, "layernorm", (a, gamma, beta), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(a, data * (g - (g * data).sum(axis=axis, keepdims=True)))

    return _make(data, "softmax", (a,), backward)


def cross_entropy(logits, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean softmax cross-entropy over rows of an ``(N, V)`` logit matrix."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise GraphError("cross_entropy: no weighted target rows")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - z[rows, targets]
    data = np.array((w * nll).sum() / total)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        _accumulate(logits, g * p * (w / total)[:, None])

    return _make(data, "cross_entropy", (logits,), backward)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt((a.data**2).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    data = a.data / denom

    def backward(g):
        proj = (g * data).sum(axis=axis, keepdims=True)
        active = norm > eps
        _accumulate(a, np.where(active, (g - data * proj) / denom, g / denom))

    return _make(data, "l2_normalize", (a,), backward)


def weighted_pool(hidden, weights: np.ndarray) -> Tensor:
    """Pool ``(n, T, D)`` hidden states with fixed ``(n, T)`` position weights."""
    hidden = as_tensor(hidden)
    weights = np.asarray(weights, dtype=np.float64)
    if hidden.ndim != 3 or weights.shape != hidden.shape[:2]:
        raise ShapeError(f"weighted_pool: weights {weights.shape} vs hidden {hidden.shape}")
    data = np.einsum("nt,ntd->nd", weights, hidden.data)

    def backward(g):
        _accumulate(hidden, weights[:, :, None] * g[:, None, :])

    return _make(data, "pool", (hidden,), backward)


def masked_mean_pool(hidden, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=np.float64)
    counts = mask.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ShapeError("masked_mean_pool: a row has no unmasked positions")
    return weighted_pool(hidden, mask / counts)


# ---------------------------------------------------------------- backward


@dataclass
class HookHandle:
    """Retrieves the gradient that reached a registered node during backward."""

    node: Tensor
    _grad: np.ndarray | None = field(default=None, repr=False)
    _fired: bool = False

    @property
    def grad(self) -> np.ndarray:
        if not self._fired:
            raise GraphError(f"stale hook handle for node {self.node.node_id}: backward has not reached it")
        return self._grad


_pending = threading.local()


def _pending_hooks() -> list:
    if not hasattr(_pending, "hooks"):
        _pending.hooks = []
    return _pending.hooks


def register_hook(node: Tensor) -> HookHandle:
    """Ask the next :func:`backward` on this thread to keep the gradient reaching ``node``."""
    if not isinstance(node, Tensor):
        raise GraphError("register_hook needs a Tensor")
    if node._backward is None and node.op != "param" and not node.requires_grad:
        raise GraphError(f"node {node.node_id} ({node.op}) is detached from the graph")
    handle = HookHandle(node)
    _pending_hooks().append(handle)
    return handle


def backward(loss: Tensor, params=None, hooks=()) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar loss.

    Returns a gradient for each trainable parameter (zeros when a parameter is
    not on the loss path). ``params`` defaults to every parameter reached.
    Hooks registered on this thread since the last backward, plus any passed
    explicitly, are filled in place. The graph is released afterwards.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending = _pending_hooks()
    hooks = list({id(h): h for h in [*pending, *hooks]}.values())
    pending.clear()
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes:
            continue
        nodes[t.node_id] = t
        stack.extend(t._parents)
    for h in hooks:
        h._grad = None
        h._fired = False

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    found_params: dict[str, Parameter] = {}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is not None:
            for h in hooks:
                if h.node is t:
                    h._grad = g
                    h._fired = True
        if isinstance(t, Parameter):
            found_params[t.name] = t
            t.grad = g if t.requires_grad else None
            continue
        if g is None or t._backward is None:
            continue
        parents = list({id(p): p for p in t._parents}.values())
        for p in parents:
            p.grad = None
        t._backward(g)
        for p in parents:
            if p.grad is not None:
                pg, p.grad = p.grad, None
                grads[p.node_id] = grads[p.node_id] + pg if p.node_id in grads else pg
    for h in hooks:
        if not h._fired:
            # node not on the loss path contributes nothing
            h._grad = np.zeros_like(h.node.data)
            h._fired = True

    # release graph
    for t in nodes.values():
        if not isinstance(t, Parameter):
            t._parents = ()
            t._backward = None

    out: dict[str, np.ndarray] = {}
    if params is None:
        params = [p for p in found_params.values() if p.requires_grad]
    for p in params:
        if not p.requires_grad:
            continue
        g = found_params[p.name].grad if p.name in found_params else None
        out[p.name] = np.zeros_like(p.data) if g is None else np.array(g, dtype=np.float64)
    for p in found_params.values():
        p.grad = None
    return out
