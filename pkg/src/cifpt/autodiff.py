"""Dense float64 tensors with reverse-mode differentiation.

The primitive set is deliberately small: matmul, add, mul, div, exp, log,
tanh, sigmoid, softmax, layer_norm, concat, slicing, row gather, sum/mean
and masked_fill, plus the shape plumbing (reshape, transpose, expand) that
multi-head attention needs. Everything else in the package is composed
from these.

Broadcasting between two tensors is limited to a shared trailing shape
(e.g. a ``(D,)`` bias added to a ``(B, T, D)`` activation) when the smaller
operand records gradients. Any other broadcast must go through ``expand``.
Constant operands (numpy arrays, python scalars, tensors that do not
require grad) may use ordinary numpy broadcasting as long as they do not
enlarge the result.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

class _GradMode(threading.local):
    enabled = True


_GRAD_MODE = _GradMode()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = _GRAD_MODE.enabled
    _GRAD_MODE.enabled = False
    try:
        yield
    finally:
        _GRAD_MODE.enabled = prev


def is_grad_enabled() -> bool:
    return _GRAD_MODE.enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return add(other, neg(self))

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

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or tuple(reversed(range(self.ndim))))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Create a leaf tensor owning a float64 copy of ``data``."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_MODE.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead > 0 else g


def _binary_operands(a, b) -> tuple[Tensor, Tensor, tuple]:
    a, b = _wrap(a), _wrap(b)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape}") from exc
    for t in (a, b):
        if t.shape == out_shape:
            continue
        if t.requires_grad:
            if out_shape[len(out_shape) - t.ndim:] != t.shape:
                raise ValueError(
                    f"shape {t.shape} only broadcasts over leading batch dims of {out_shape}; use expand()"
                )
        elif t.ndim > len(out_shape):
            raise ValueError(f"constant of shape {t.shape} enlarges result {out_shape}")
    return a, b, out_shape


# -- elementwise binary ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _node(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _node(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b, _ = _binary_operands(a, b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), backward)


def neg(a) -> Tensor:
    return mul(a, -1.0)


# -- elementwise unary ----------------------------------------------------
def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


# -- normalisation --------------------------------------------------------
def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, (a,), backward)


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)``."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"batched matmul needs equal leading dims, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward)


# -- structure ------------------------------------------------------------
def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_wrap(t) for t in tensors)
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                out.append(g[tuple(idx)])
            else:
                out.append(None)
        return tuple(out)

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def getitem(a: Tensor, key) -> Tensor:
    """Basic slicing (ints, slices, None, Ellipsis)."""
    keys = key if isinstance(key, tuple) else (key,)
    for k in keys:
        if not (k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice))):
            raise TypeError("tensor indexing supports basic slicing only; use take() for gathers")

    def backward(g):
        z = np.zeros_like(a.data)
        z[key] = g
        return (z,)

    return _node(a.data[key], (a,), backward)


def take(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` along axis 0 (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")

    def backward(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids, g)
        return (z,)

    return _node(table.data[ids], (table,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast of size-1 (or missing leading) dims to ``shape``."""
    shape = tuple(shape)
    lead = len(shape) - a.ndim
    if lead < 0:
        raise ValueError("expand cannot drop dims")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1
    )

    def backward(g):
        return (g.sum(axis=axes, keepdims=True).reshape(a.shape),)

    return _node(np.broadcast_to(a.data, shape), (a,), backward)


# -- reductions -----------------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; those entries get no gradient."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    keep = ~mask

    return _node(np.where(mask, value, a.data), (a,), lambda g: (g * keep,))


# -- compositions ---------------------------------------------------------
def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis, built from shift/exp/sum/log."""
    shift = a.data.max(axis=-1, keepdims=True)
    z = a - shift
    lse = log(tsum(exp(z), axis=-1, keepdims=True))
    return z - expand(lse, z.shape)


def logsumexp(terms: Sequence[Tensor]) -> Tensor:
    """Elementwise log(sum(exp(t))) over a list of same-shape tensors."""
    shift = np.max(np.stack([t.data for t in terms]), axis=0)
    total = exp(terms[0] - shift)
    for t in terms[1:]:
        total = total + exp(t - shift)
    return log(total) + shift


def sqrt(a: Tensor) -> Tensor:
    return exp(mul(log(a), 0.5))


def abs_(a: Tensor) -> Tensor:
    """|a| with subgradient 0 at 0."""
    return mul(a, np.sign(a.data))


# -- backward -------------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Backpropagate from a scalar loss.

    Gradients accumulate into the ``grad`` field of every leaf that
    requires grad. The recorded graph is released afterwards; a second
    call on the same loss raises ``RuntimeError``.

    Returns:
        Mapping from ``id(leaf)`` to that leaf's accumulated gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("graph already consumed by a previous backward(); re-run the forward pass")
    if not loss.requires_grad:
        raise ValueError("loss is detached: no recorded operation requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._parents:
            if g is not None:
                for p, gp in zip(node._parents, node._backward(g)):
                    if gp is None or not p.requires_grad:
                        continue
                    k = id(p)
                    grads[k] = grads[k] + gp if k in grads else gp
            node._parents = ()
            node._backward = None
            node._consumed = True
        elif g is not None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            leaves[id(node)] = node.grad
    loss._consumed = True
    return leaves


# -- gradient checking ----------------------------------------------------
@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error < tol


def grad_check(
    f: Callable[[], Tensor],
    inputs: Mapping[str, Tensor],
    step: float = 1e-5,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``f`` takes no arguments and must rebuild its graph from the tensors in
    ``inputs`` on every call. Each coordinate of each input is perturbed by
    ``+-step`` in place and restored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for t in inputs.values():
        if not t.data.flags.writeable or not t.data.flags.c_contiguous:
            t.data = np.array(t.data)
        t.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("f is non-finite at the base point")
    backward(loss)
    report = GradCheckReport()
    selected = list(inputs) if names is None else list(names)
    with no_grad():
        for name in selected:
            t = inputs[name]
            analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
            flat = t.data.reshape(-1)
            numeric = np.empty(t.size)
            for i in range(t.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f().data)
                flat[i] = orig - step
                fm = float(f().data)
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise FloatingPointError(f"f is non-finite when probing {name}[{i}]")
                numeric[i] = (fp - fm) / (2.0 * step)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
            rel = np.abs(analytic - numeric) / denom
            report.errors[name] = float(rel.max()) if rel.size else 0.0
    return report
