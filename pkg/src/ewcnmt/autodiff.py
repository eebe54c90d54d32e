"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the operations needed by the transformer and the two regularizers are
provided. A forward computation records a graph of :class:`Tensor` nodes;
:func:`backward` walks it in reverse topological order and returns gradients
for every *named* leaf reachable from the loss.

Training runs in float32. Gradient checks cast parameters to float64 and rely
on every op preserving the dtype of its inputs.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DeterminismError, DimensionError, EmptyBatchError, NumericError

LAYER_NORM_EPS = 1e-6
REL_ERROR_FLOOR = 1e-8

GradientMap = dict  # canonical parameter name -> np.ndarray


class Tensor:
    """A node in the computation graph.

    Leaves created with a ``name`` are trainable parameters and show up in the
    gradient map returned by :func:`backward`. Unnamed leaves are constants.
    """

    __slots__ = ("data", "name", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, name: str | None = None, requires_grad: bool | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.name = name
        self.requires_grad = (name is not None) if requires_grad is None else requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self):
        return sum_all(self)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    req = any(p.requires_grad for p in parents)
    out.requires_grad = req
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Register a custom differentiable op.

    ``backward(grad_out)`` must return one gradient (or ``None``) per parent.
    """
    return _node(data, parents, backward)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=np.float32))
    return Tensor(x)


def parameters(store: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap a parameter store as named leaf tensors."""
    return {name: Tensor(value, name=name) for name, value in store.items()}


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        return _node(a.data + b, (a,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        return _node(a.data * b, (a,), lambda g: (g * b,))
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad * bd, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or no RNG is supplied."""
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * (1.0 / (1.0 - p))
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


# -- shape ------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple | None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _node(np.asarray(x.data.sum(), dtype=dtype), (x,), lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return mul(sum_all(x), 1.0 / n)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading axes of either operand."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _node(ad @ bd, (a, b), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range for vocabulary of size {vocab}")
    shape, dtype = table.shape, table.dtype

    def backward(g):
        grad = np.zeros(shape, dtype=dtype)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (grad,)

    return _node(table.data[ids], (table,), backward)


# -- normalization / probabilities -------------------------------------------


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), backward)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array log-softmax (no graph), used by decoding and evaluation."""
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _node(out, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, targets, mask=None, reduction: str = "mean") -> Tensor:
    """Masked negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` has shape ``(..., vocab)``; ``targets`` and ``mask`` match the
    leading shape. ``reduction="mean"`` averages over unmasked positions,
    ``"sum"`` returns their total.
    """
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    tgt = np.asarray(targets).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise DimensionError(f"cross_entropy: {tgt.shape[0]} targets for {flat.shape[0]} positions")
    m = np.ones(tgt.shape, dtype=bool) if mask is None else np.asarray(mask).reshape(-1).astype(bool)
    count = int(m.sum())
    if count == 0:
        raise EmptyBatchError("cross_entropy: every position is masked")
    live = tgt[m]
    if live.min() < 0 or live.max() >= vocab:
        raise IndexError(f"target id out of range for vocabulary of size {vocab}")
    safe = np.where(m, tgt, 0)
    logp = log_softmax(flat)
    picked = logp[np.arange(tgt.shape[0]), safe]
    total = -(picked * m).sum()
    scale = 1.0 / count if reduction == "mean" else 1.0
    value = np.asarray(total * scale, dtype=logits.dtype)
    if not np.isfinite(value):
        raise NumericError("cross_entropy produced a non-finite value")
    shape = logits.shape

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(tgt.shape[0]), safe] -= 1.0
        grad *= (m * (scale * g)).astype(grad.dtype)[:, None]
        return (grad.reshape(shape),)

    return _node(value, (logits,), backward)


# -- backward pass ------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> GradientMap:
    """Gradients of a scalar ``loss`` for every named leaf it depends on."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward expects a scalar Tensor")
    result: GradientMap = {}
    if not loss.requires_grad:
        return result
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.name is not None:
                prev = result.get(node.name)
                result[node.name] = g if prev is None else prev + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    for name, g in result.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    return result


# -- finite-difference oracle ------------------------------------------------


def check_gradients(
    computation: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-6,
    max_coords: int = 8,
    seed: int = 0,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Parameters are copied to float64. Tensors with more than ``max_coords``
    entries are checked on a random subset of coordinates.
    """
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def run() -> float:
        return float(computation(parameters(work)).data)

    loss = computation(parameters(work))
    if float(loss.data) != run():
        raise DeterminismError("computation is not deterministic: two forward passes disagree")
    analytic = backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(names if names is not None else work):
        arr = work[name]
        flat = arr.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        grad = analytic.get(name)
        grad_flat = np.zeros(n) if grad is None else np.asarray(grad, dtype=np.float64).reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = run()
            flat[i] = orig - epsilon
            down = run()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = grad_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), REL_ERROR_FLOOR)
            worst = max(worst, err)
    return worst
