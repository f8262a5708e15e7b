"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays.  Every operation that receives at least one
input with ``requires_grad`` records a node holding its parents and a
closure that maps the output gradient to one gradient per parent.
:func:`backward` walks those nodes once in reverse topological order.

Layout convention for skeleton features is time-major ``(T, B, V, C)``;
:func:`temporal_conv1d` convolves along axis 0 and mixes the last axis.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "GraphConsumedError",
    "tensor",
    "add",
    "sub",
    "neg",
    "multiply",
    "divide",
    "matmul",
    "relu",
    "exp",
    "log",
    "reduce_sum",
    "reduce_mean",
    "softmax_with_temperature",
    "log_softmax_with_temperature",
    "l2_normalize_rows",
    "mean_center_rows",
    "batchnorm",
    "temporal_conv1d",
    "reshape",
    "transpose",
    "concat",
    "index_select",
    "cast",
    "stop_gradient",
    "backward",
    "no_grad",
    "finite_difference_check",
    "NORM_EPS",
]

NORM_EPS = 1e-12


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class GraphConsumedError(AutodiffError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self.parents: tuple = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    __hash__ = object.__hash__


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a.data)
    b = _as_tensor(b)
    return _as_tensor(a, b.data), b


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph nodes."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn: Callable) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), "sub", bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def multiply(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "multiply")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "multiply", bw)


def divide(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "divide")
    if np.any(b.data == 0):
        raise ZeroDivisionError("divide: denominator contains zeros")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), "divide", bw)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {exc}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim == 2 and g.ndim > 2:
                # (m, k) @ (..., k, n): fold the stacked axes into one product
                gb = np.matmul(a.data.T, g)
                gb = _unbroadcast(gb, b.shape)
            elif b.ndim == 2 and g.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), "matmul", bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), "relu",
                 lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value")
    return _make(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


# ----------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), "reduce_sum", bw)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(np.asarray(out), (x,), "reduce_mean", bw)


# ----------------------------------------------------------------------
# normalisations


def softmax_with_temperature(x: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of ``x / tau`` along ``axis`` with max subtraction."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = x.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / tau,)

    return _make(out, (x,), "softmax_with_temperature", bw)


def log_softmax_with_temperature(x: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = x.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        return ((g - soft * g.sum(axis=axis, keepdims=True)) / tau,)

    return _make(out, (x,), "log_softmax_with_temperature", bw)


def l2_normalize_rows(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Unit-normalise along the last axis; norms below ``eps`` are clamped."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    clamped = norm < eps
    denom = np.where(clamped, eps, norm)
    out = x.data / denom

    def bw(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(clamped, g / eps, (g - out * proj) / denom),)

    return _make(out, (x,), "l2_normalize_rows", bw)


def mean_center_rows(x: Tensor) -> Tensor:
    """Subtract the per-column mean taken over axis 0 (the batch)."""
    out = x.data - x.data.mean(axis=0, keepdims=True)
    return _make(out, (x,), "mean_center_rows", lambda g: (g - g.mean(axis=0, keepdims=True),))


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over every axis but the last.

    In train mode the batch statistics are used and the running buffers are
    updated in place as ``momentum * running + (1 - momentum) * batch``.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: affine parameters must have shape ({c},)")
    axes = tuple(range(x.ndim - 1))
    if train:
        n = x.data.size // c
        mean = x.data.mean(axis=axes)
        centred = x.data - mean
        var = (centred * centred).mean(axis=axes)
        unbiased = var * n / max(n - 1, 1)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
        centred = x.data - mean
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if train:
                gx = inv_std * (
                    gxhat
                    - gxhat.mean(axis=axes)
                    - xhat * (gxhat * xhat).mean(axis=axes)
                )
            else:
                gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), "batchnorm", bw)


# ----------------------------------------------------------------------
# convolution and shape manipulation


def temporal_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Convolve along axis 0 with zero padding that keeps the length.

    ``x`` has shape ``(T, ..., C_in)``, ``weight`` has shape
    ``(k, C_in, C_out)`` with odd ``k``; the result is ``(T, ..., C_out)``.
    """
    k, cin, cout = weight.shape
    if k % 2 == 0:
        raise ShapeError("temporal kernel size must be odd")
    if x.shape[-1] != cin:
        raise ShapeError(f"temporal_conv1d: input has {x.shape[-1]} channels, weight expects {cin}")
    pad = (k - 1) // 2
    t = x.shape[0]
    widths = [(pad, pad)] + [(0, 0)] * (x.ndim - 1)
    xp = np.pad(x.data, widths)
    out = np.zeros(x.shape[:-1] + (cout,), dtype=np.result_type(x.data, weight.data))
    for j in range(k):
        out += xp[j:j + t] @ weight.data[j]
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError("temporal_conv1d: bias must have shape (C_out,)")
        out += bias.data
        parents.append(bias)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            wt = np.ascontiguousarray(weight.data.transpose(0, 2, 1))
            gxp = np.zeros(xp.shape, dtype=out.dtype)
            for j in range(k):
                gxp[j:j + t] += g @ wt[j]
            gx = gxp[pad:pad + t]
        if weight.requires_grad:
            g2 = g.reshape(-1, cout)
            gw = np.stack([xp[j:j + t].reshape(-1, cin).T @ g2 for j in range(k)])
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _make(out, parents, "temporal_conv1d", bw)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _make(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), "transpose",
                 lambda g: (np.transpose(g, inverse),))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, "concat", bw)


def index_select(x: Tensor, indices, axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError("index_select: index out of range")
    out = np.take(x.data, idx, axis=axis)

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _make(out, (x,), "index_select", bw)


def cast(x: Tensor, dtype) -> Tensor:
    src = x.dtype
    return _make(x.data.astype(dtype), (x,), "cast", lambda g: (g.astype(src),))


# ----------------------------------------------------------------------
# stop-gradient with replay support for the finite-difference checker

_stop_tape: list | None = None
_stop_replay: Iterable | None = None


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass, zero contribution in the backward pass."""
    global _stop_replay
    if _stop_replay is not None:
        data = next(_stop_replay)
    else:
        data = x.data
        if _stop_tape is not None:
            _stop_tape.append(data.copy())
    out = Tensor(data)
    out.op = "stop_gradient"
    return out


@contextlib.contextmanager
def _recording_stops():
    global _stop_tape
    _stop_tape = []
    try:
        yield _stop_tape
    finally:
        _stop_tape = None


@contextlib.contextmanager
def _replaying_stops(tape: list):
    global _stop_replay
    _stop_replay = iter(tape)
    try:
        yield
    finally:
        _stop_replay = None


# ----------------------------------------------------------------------
# backward pass


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a mapping from leaf tensor to its gradient from this call.  The
    interior of the graph is released afterwards; a second call through the
    same nodes raises :class:`GraphConsumedError`.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("graph already consumed by a previous backward call")
    leaves: dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return leaves
    order = _topological(loss)
    for node in order:
        if node._consumed:
            raise GraphConsumedError("graph already consumed by a previous backward call")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is None:
                continue
            leaves[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            contribs = node._backward(g)
            for parent, c in zip(node.parents, contribs):
                if c is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + c
                else:
                    grads[key] = c
        node._backward = None
        node._consumed = True
    return leaves


# ----------------------------------------------------------------------
# finite differences


def finite_difference_check(
    f: Callable[..., Tensor],
    point,
    epsilon: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``point`` is one array or a sequence of arrays, passed to ``f`` as
    tensors.  Error per coordinate is ``|analytic - numeric| / max(1,
    |analytic|)``.  Values produced by :func:`stop_gradient` during the
    unperturbed evaluation are replayed unchanged for every perturbed
    evaluation, so only gradient-carrying paths are compared.
    """
    single = isinstance(point, np.ndarray) or np.isscalar(point)
    arrays = [np.array(point, dtype=np.float64)] if single else [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with _recording_stops() as tape:
        out = f(*leaves)
    if out.data.size != 1:
        raise ShapeError("finite_difference_check needs a scalar-valued function")
    _check_finite(out.data, "finite_difference_check")
    tape = list(tape)
    backward(out)
    worst = 0.0
    for i, base in enumerate(arrays):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(base)
        flat = analytic.reshape(-1)
        for j in range(base.size):
            vals = []
            for sign in (1.0, -1.0):
                trial = [a.copy() for a in arrays]
                trial[i].reshape(-1)[j] += sign * epsilon
                with _replaying_stops(tape):
                    v = f(*[Tensor(t) for t in trial])
                _check_finite(v.data, "finite_difference_check")
                vals.append(float(v.data.reshape(-1)[0]))
            numeric = (vals[0] - vals[1]) / (2 * epsilon)
            a = float(flat[j])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
