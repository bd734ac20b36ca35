"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation records a node holding its parents and a
backward rule. Nodes are stamped with a global recording sequence number;
``Tensor.backward`` replays the rules of every node reachable from the loss
in reverse recording order, which is the tape order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

MAX_RANK = 3

_seq = itertools.count()
_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class DimensionError(ValueError):
    """Raised on incompatible operand shapes."""


class RankError(ValueError):
    """Raised when a tensor has an unsupported rank for the requested operation."""


class EmptyInputError(ValueError):
    """A pooling reduction received zero agents."""


class OptimizerStateError(RuntimeError):
    """Raised when an optimizer step finds a parameter without a gradient."""


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {where}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise RankError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = next(_seq)
        self._op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t._seq = next(_seq)
        t._op = "leaf"
        return t

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- differentiation --------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        ``self`` must hold a single value. Gradients add onto whatever the
        leaves already hold; call ``zero_grad`` between steps.
        """
        if self.data.size != 1:
            raise RankError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append(p)
        nodes.sort(key=lambda n: n._seq, reverse=True)

        grads = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                _check_finite(g, "backward")
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _record(out: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(out, op)
    if out.ndim > MAX_RANK:
        raise RankError(f"{op} produced rank {out.ndim}")
    t = Tensor._wrap(out)
    t._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(out, (a, b), backward, "mul")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry one leading batch axis.

    ``b`` is either a matrix shared across the batch or a batch of matrices.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 3 and (a.ndim != 3 or a.shape[0] != b.shape[0]):
        raise DimensionError(f"batched matmul batch sizes differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Fused ``x @ weight + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, parents, backward, "linear")


# -- elementwise ----------------------------------------------------------

def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def elu(x: Tensor) -> Tensor:
    pos = x.data > 0
    y = np.where(pos, x.data, np.expm1(np.minimum(x.data, 0.0)))
    return _record(y, (x,), lambda g: (np.where(pos, g, g * (y + 1.0)),), "elu")


def abs_(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _record(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS = {
    "tanh": tanh,
    "elu": elu,
    "sigmoid": sigmoid,
    "relu": relu,
    "identity": identity,
}


def elementwise(op: str, x: Tensor) -> Tensor:
    try:
        fn = ACTIVATIONS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(as_tensor(x))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# -- reductions and shape ops ---------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _record(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),), "mean")


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum_axis")


def _check_agents(x: Tensor, op: str) -> None:
    if x.ndim < 2:
        raise RankError(f"{op} needs an agent axis, got shape {x.shape}")
    if x.shape[-2] == 0:
        raise EmptyInputError(f"{op}: empty agent axis")


def mean_over_agents(x: Tensor, keepdims: bool = False) -> Tensor:
    """Column-wise mean over the agent axis (second to last)."""
    _check_agents(x, "mean_over_agents")
    n, shape = x.shape[-2], x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, -2)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record(x.data.mean(axis=-2, keepdims=keepdims), (x,), backward, "mean_over_agents")


def sum_over_agents(x: Tensor, keepdims: bool = False) -> Tensor:
    _check_agents(x, "sum_over_agents")
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, -2)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(x.data.sum(axis=-2, keepdims=keepdims), (x,), backward, "sum_over_agents")


def max_over_agents(x: Tensor, keepdims: bool = False) -> Tensor:
    """Elementwise max over agents; the gradient goes to the first maximal row."""
    _check_agents(x, "max_over_agents")
    idx = np.argmax(x.data, axis=-2)[..., None, :]
    out = np.take_along_axis(x.data, idx, axis=-2)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, -2)
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx, g, axis=-2)
        return (gx,)

    if not keepdims:
        out = out.squeeze(-2)
    return _record(out, (x,), backward, "max_over_agents")


POOLINGS = {"mean": mean_over_agents, "sum": sum_over_agents, "max": max_over_agents}


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {shape}") from exc
    return _record(out, (x,), lambda g: (g.reshape(old),), "reshape")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(out, tuple(tensors), backward, "stack")


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[..., index[...]]``: one entry of the last axis per leading position."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise DimensionError(f"gather index shape {index.shape} != {x.shape[:-1]}")
    idx = index[..., None]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return _record(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), backward, "gather")


# -- losses ---------------------------------------------------------------

def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all entries."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    return mean_all(square(sub(pred, target)))


def masked_mse(pred: Tensor, target, mask: np.ndarray) -> Tensor:
    """Sum of squared errors over entries with mask 1, divided by the mask count."""
    mask = np.asarray(mask, dtype=np.float64)
    err = mul(square(sub(pred, as_tensor(target))), mask)
    return mul(sum_all(err), 1.0 / max(mask.sum(), 1.0))


# -- recurrent cell -------------------------------------------------------

def gru_cell(x: Tensor, h: Tensor, w_in: Tensor, w_hid: Tensor, b_in: Tensor, b_hid: Tensor) -> Tensor:
    """One GRU step applied row-wise; gate columns are ordered (reset, update, candidate).

    r = sigmoid(x Wr + h Ur), z = sigmoid(x Wz + h Uz),
    n = tanh(x Wn + bn + r * (h Un + cn)), h' = (1 - z) * n + z * h.
    """
    hs = h.shape[-1]
    if x.shape[:-1] != h.shape[:-1]:
        raise DimensionError(f"gru: input rows {x.shape[:-1]} != hidden rows {h.shape[:-1]}")
    if w_in.shape != (x.shape[-1], 3 * hs) or w_hid.shape != (hs, 3 * hs):
        raise DimensionError("gru: weight shapes do not match input/hidden widths")
    xd, hd = x.data, h.data
    gi = xd @ w_in.data + b_in.data
    gh = hd @ w_hid.data + b_hid.data
    rz = _sigmoid(gi[..., :2 * hs] + gh[..., :2 * hs])
    r, z = rz[..., :hs], rz[..., hs:]
    ghn = gh[..., 2 * hs:]
    n = np.tanh(gi[..., 2 * hs:] + r * ghn)
    out = n + z * (hd - n)

    def backward(g):
        dgi = np.empty(gi.shape)
        dn = g * (1.0 - z) * (1.0 - n * n)
        dgi[..., :hs] = dn * ghn * r * (1.0 - r)
        dgi[..., hs:2 * hs] = g * (hd - n) * z * (1.0 - z)
        dgi[..., 2 * hs:] = dn
        dgh = dgi.copy()
        dgh[..., 2 * hs:] *= r
        dgi2 = dgi.reshape(-1, 3 * hs)
        dgh2 = dgh.reshape(-1, 3 * hs)
        dx = dgi @ w_in.data.T
        dh = dgh @ w_hid.data.T + g * z
        dw_in = xd.reshape(-1, xd.shape[-1]).T @ dgi2
        dw_hid = hd.reshape(-1, hs).T @ dgh2
        return dx, dh, dw_in, dw_hid, dgi2.sum(axis=0), dgh2.sum(axis=0)

    return _record(out, (x, h, w_in, w_hid, b_in, b_hid), backward, "gru_cell")


# -- optimisation ---------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """In-place bias-corrected Adam update. Gradients are left untouched."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise OptimizerStateError(f"parameter {i} with shape {p.shape} has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise OptimizerStateError("parameter list changed since the first step")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.state)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total
