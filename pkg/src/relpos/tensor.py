"""Dense tensors with reverse-mode automatic differentiation.

Every operation builds a node holding its inputs and a local backward rule.
``Tensor.backward`` walks the graph in reverse topological order and
accumulates gradient contributions by addition.

Two precision modes exist: float32 for training and float64 for gradient
verification. The mode is global and read when a tensor is created.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_grad_enabled = True


class NumericError(FloatingPointError):
    """A forward result or gradient contained NaN or Inf."""


def set_precision(mode: str) -> None:
    global _dtype
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[mode]


def get_dtype():
    return _dtype


def precision_name() -> str:
    return "float64" if _dtype is np.float64 else "float32"


@contextlib.contextmanager
def precision(mode: str):
    previous = precision_name()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """A node in the compute graph.

    ``data`` is a numpy array in the active precision. ``grad`` is filled by
    ``backward`` and always has the shape of ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        arr = arr.astype(dtype or _dtype, copy=False)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
        op: str = "custom",
    ) -> "Tensor":
        """Wrap an op result. ``backward`` maps the output gradient to one
        gradient (or None) per parent."""
        _check_finite(data, f"forward result of {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        out.op = op
        return out

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

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        if self.data.size != 1 or self.data.ndim > 1:
            raise ValueError(f"backward needs a scalar root, got shape {self.shape}")
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
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
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children."""
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _suffix_broadcast(big: tuple, small: tuple) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))).reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if not (_suffix_broadcast(a.shape, b.shape) or _suffix_broadcast(b.shape, a.shape)):
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} differ beyond leading dimensions")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)),
        "add",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor.from_op(
        ad * bd,
        (a, b),
        lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)),
        "mul",
    )


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix shared across ``a``'s leading axes or has
    exactly the same leading axes as ``a``.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul: leading dimensions differ in {a.shape} and {b.shape}")
    shared = bd.ndim == 2

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor.from_op(ad @ bd, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose"
    )


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor.from_op(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
    )


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return Tensor.from_op(
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
        "mean",
    )


def _stable_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    if logits.shape[axis] < 1:
        raise ValueError("softmax over an empty axis")
    y = _stable_softmax(logits.data, axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (logits,), backward, "softmax")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    x = logits.data
    z = x - x.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (logits,), backward, "log_softmax")


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows.

    ``logits`` is ``[n]`` with an integer target, or ``[rows, n]`` with an
    integer array of targets.
    """
    x = logits.data
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n_classes = x2.shape[-1]
    if x2.ndim != 2 or t.shape != (x2.shape[0],):
        raise ValueError(f"cross_entropy: logits {x.shape} do not match targets {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise IndexError(f"cross_entropy: target outside [0, {n_classes})")
    rows = x2.shape[0]
    if rows == 0:
        raise ValueError("cross_entropy over zero rows")
    z = x2 - x2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(rows), t]
    loss = np.asarray((logsum - picked).mean(), dtype=x.dtype)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(rows), t] -= 1.0
        p *= g / rows
        return (p.reshape(x.shape),)

    return Tensor.from_op(loss, (logits,), backward, "cross_entropy")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
        return (g * d,)

    return Tensor.from_op(out, (a,), backward, "gelu")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    h = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gd
        dx = inv / h * (
            h * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return Tensor.from_op(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


def gather(table: Tensor, index) -> Tensor:
    """Rows of ``table`` picked by an integer array; output ``index.shape + row``."""
    idx = np.asarray(index, dtype=np.int64)
    shape = table.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, *shape[1:]))
        return (out,)

    return Tensor.from_op(table.data[idx], (table,), backward, "gather")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor.from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat"
    )


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor] | dict[str, Tensor],
    epsilon: float = 1e-5,
    max_coords_per_param: int | None = 32,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Error per coordinate is ``|a - n| / (|a| + |n| + 1e-12)``. At most
    ``max_coords_per_param`` coordinates of each parameter are sampled
    (``None`` checks every coordinate). Only meaningful in float64.
    """
    if isinstance(params, dict):
        params = list(params.values())
    else:
        params = list(params)
    if _dtype is not np.float64:
        raise RuntimeError("finite_diff_check requires float64 precision")
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords_per_param is not None and flat.size > max_coords_per_param:
                coords = rng.choice(flat.size, max_coords_per_param, replace=False)
            a_flat = a.reshape(-1)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + epsilon
                up = loss_fn().item()
                flat[c] = orig - epsilon
                down = loss_fn().item()
                flat[c] = orig
                num = (up - down) / (2 * epsilon)
                err = abs(a_flat[c] - num) / (abs(a_flat[c]) + abs(num) + 1e-12)
                worst = max(worst, err)
    return worst
