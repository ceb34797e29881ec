"""Dense float64 tensors with a reverse-mode gradient tape.

Only the primitives needed by the encoders and the distillation losses are
provided. Operations record themselves onto the innermost active
:class:`GradientTape` when at least one input requires a gradient; outside a
tape everything is plain numpy arithmetic.

Example
-------
>>> x = Tensor([1.0, 2.0], requires_grad=True)
>>> with GradientTape() as tape:
...     loss = (x * x).sum()
>>> tape.gradient(loss, [x])[0]
array([2., 4.])
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import BatchSizeError, ContractError, DimensionError

_ids = itertools.count(1)
_state = threading.local()

DEFAULT_STD_EPS = 1e-8
DEFAULT_COS_EPS = 1e-8


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "GradientTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """n-dimensional float64 array that can take part in a gradient tape."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"expected a scalar tensor, got shape {self.shape}")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(arr: np.ndarray) -> Tensor:
    """Wrap a float64 array without copying it; never requires a gradient."""
    arr = np.asarray(arr)
    if arr.dtype != np.float64:
        return Tensor(arr)
    out = Tensor.__new__(Tensor)
    out.data, out.requires_grad, out.grad, out.node_id = arr, False, None, next(_ids)
    return out


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output_id: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradientTape:
    """Ordered record of primitive operations for one backward pass.

    Nodes are appended in execution order, so every node's inputs were
    produced by earlier nodes (or are leaves). The tape is meant to live for a
    single training step.
    """

    nodes: list[_Node] = field(default_factory=list)
    _used: bool = False

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, inputs, output: Tensor, backward) -> None:
        self.nodes.append(_Node(tuple(inputs), output.node_id, backward))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) through the tape; returns node_id -> gradient.

        Leaves that require a gradient also get it stored in ``.grad``.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ContractError("backward called on an empty tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        produced = {node.output_id for node in self.nodes}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            upstream = grads.get(node.output_id)
            if upstream is None:
                continue
            local = node.backward(upstream)
            for tensor, g in zip(node.inputs, local):
                if g is None or not tensor.requires_grad:
                    continue
                if tensor.node_id not in produced:
                    leaves[tensor.node_id] = tensor
                prev = grads.get(tensor.node_id)
                grads[tensor.node_id] = g if prev is None else prev + g
        for node_id, leaf in leaves.items():
            leaf.grad = grads[node_id]
        self.nodes.clear()
        self._used = True
        return grads

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` for each of ``params``; zeros when disconnected."""
        grads = self.backward(loss)
        return [grads.get(p.node_id, np.zeros_like(p.data)) for p in params]


def backward(loss: Tensor, tape: GradientTape | None = None) -> dict[int, np.ndarray]:
    tape = tape or active_tape()
    if tape is None:
        raise ContractError("no gradient tape is active")
    return tape.backward(loss)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    stack = getattr(_state, "stack", None)
    out.requires_grad = bool(stack) and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        stack[-1].record(inputs, out, backward_fn)
    return out


def _apply(op, a: Tensor, b: Tensor) -> np.ndarray:
    # numpy raises ValueError on incompatible shapes; no separate shape pass
    try:
        return op(a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"shapes {a.shape} and {b.shape} are not compatible under trailing alignment"
        ) from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        _apply(np.add, a, b),
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        _apply(np.subtract, a, b),
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        _apply(np.multiply, a, b),
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _apply(np.divide, a, b)
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def l1norm(a) -> Tensor:
    """Elementwise absolute value (summed later to form an L1 norm)."""
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    return _result(out, (a,), lambda g: (g * _sigmoid(-a.data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_K = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_K * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def back(g):
        dinner = _GELU_K * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _result(out, (a,), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "l1norm": l1norm,
    "square": square,
    "log": log,
    "sigmoid": sigmoid,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch a named elementwise primitive (binary ops need ``b``)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ContractError(f"{op} is unary")
    return fn(a)


# ---------------------------------------------------------------- reductions & shape


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), back)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def take(a, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    a = as_tensor(a)
    out = np.array(a.data[index])

    def back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(out, (a,), back)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"cannot stack tensors of shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, back)


def diagonal(a) -> Tensor:
    """Diagonal over the last two (square) axes."""
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"diagonal needs square trailing axes, got {a.shape}")
    out = np.einsum("...ii->...i", a.data).copy()

    def back(g):
        full = np.zeros_like(a.data)
        np.einsum("...ii->...i", full)[...] = g
        return (full,)

    return _result(out, (a,), back)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), back)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def back(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), back)


# ---------------------------------------------------------------- correlation building blocks


def batch_standardize(x, epsilon: float = DEFAULT_STD_EPS) -> Tensor:
    """Zero-mean, unit-std along axis 0 (population statistics).

    Zero-variance slices map to zeros thanks to ``epsilon`` in the denominator.
    """
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[0] < 2:
        raise BatchSizeError(
            f"batch standardization needs a batch of at least 2, got shape {x.shape}"
        )
    n = x.shape[0]
    xc = x.data - x.data.mean(axis=0, keepdims=True)
    std = np.sqrt((xc * xc).mean(axis=0, keepdims=True))
    denom = std + epsilon
    out = xc / denom

    def back(g):
        # d std / d xc_b = xc_b / (n * std); zero where std == 0 (xc is zero there too)
        safe = np.where(std > 0, std, 1.0)
        dstd = -(g * xc).sum(axis=0, keepdims=True) / (denom * denom)
        gxc = g / denom + dstd * xc / (n * safe)
        return (gxc - gxc.mean(axis=0, keepdims=True),)

    return _result(out, (x,), back)


def batched_outer(a, b) -> Tensor:
    """(1/B) sum_b outer(a_b, b_b) over the leading batch axis.

    ``a`` and ``b`` share shape (B, ..., D); the result is (..., D, D).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"batched_outer needs identical shapes, got {a.shape} and {b.shape}")
    if a.ndim < 2:
        raise DimensionError(f"batched_outer needs (B, ..., D) inputs, got {a.shape}")
    n = a.shape[0]
    # batch axis moved next to the feature axis so a plain matmul does the sum
    order = tuple(range(1, a.ndim - 1)) + (a.ndim - 1, 0)
    at = a.data.transpose(order)  # (..., D, B)
    bt = np.swapaxes(b.data.transpose(order), -1, -2)  # (..., B, D)
    out = (at @ bt) / n
    back_order = (a.ndim - 1,) + tuple(range(a.ndim - 1))

    def back(g):
        ga = (g @ np.swapaxes(bt, -1, -2)) / n  # (..., D, B)
        gb = (np.swapaxes(g, -1, -2) @ at) / n  # (..., D, B)
        return ga.transpose(back_order), gb.transpose(back_order)

    return _result(out, (a, b), back)


def cosine_similarity(a, b, axis: int = -1, eps: float = DEFAULT_COS_EPS) -> Tensor:
    """cos(a, b) along ``axis`` with norms clamped below at ``eps``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity needs identical shapes, got {a.shape} and {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    ua, ub = np.maximum(na, eps), np.maximum(nb, eps)
    cos = (a.data * b.data).sum(axis=axis, keepdims=True) / (ua * ub)

    def back(g):
        g = np.expand_dims(g, axis)
        da = np.where(na > eps, a.data / (ua * np.where(na > 0, na, 1.0)), 0.0)
        db = np.where(nb > eps, b.data / (ub * np.where(nb > 0, nb, 1.0)), 0.0)
        ga = g * (b.data / (ua * ub) - cos * da)
        gb = g * (a.data / (ua * ub) - cos * db)
        return ga, gb

    return _result(np.squeeze(cos, axis=axis), (a, b), back)


# ---------------------------------------------------------------- finite differences


@dataclass
class GradCheckReport:
    errors: list[float]
    passed: bool
    tol: float
    message: str = ""

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0


def finite_diff_check(
    f: Callable[..., Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of ``f(*params)`` against central differences.

    The error for one parameter is the largest elementwise discrepancy divided
    by the largest gradient magnitude of that parameter (analytic or numeric).
    """
    return finite_diff_check_many(lambda *p: (f(*p),), params, step, tol)[0]


def finite_diff_check_many(
    f: Callable[..., Sequence[Tensor]],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> list[GradCheckReport]:
    """``finite_diff_check`` for a function returning several scalars.

    Each perturbed evaluation yields every output at once, so checking K
    outputs costs one finite-difference sweep instead of K.
    """
    values = [o.data for o in f(*params)]
    for v in values:
        if v.size != 1:
            raise ContractError(f"finite_diff_check needs a scalar function, got shape {v.shape}")
    if not all(np.isfinite(v).all() for v in values):
        return [GradCheckReport([], False, tol, "function value is not finite") for _ in values]
    analytic = []
    for k in range(len(values)):
        with GradientTape() as tape:
            out = f(*params)[k]
        analytic.append(tape.gradient(out, params) if tape.nodes else [np.zeros_like(p.data) for p in params])

    errors: list[list[float]] = [[] for _ in values]
    for j, p in enumerate(params):
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        numeric = np.zeros((len(values),) + p.data.shape)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(len(values), -1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = np.array([o.data.item() for o in f(*params)])
            flat[i] = orig - step
            lo = np.array([o.data.item() for o in f(*params)])
            flat[i] = orig
            if not (np.isfinite(hi).all() and np.isfinite(lo).all()):
                msg = f"non-finite value perturbing parameter {j}"
                return [GradCheckReport(e, False, tol, msg) for e in errors]
            nflat[:, i] = (hi - lo) / (2.0 * step)
        for k in range(len(values)):
            grad = analytic[k][j]
            scale = max(np.abs(grad).max(), np.abs(numeric[k]).max(), 1e-12)
            errors[k].append(float(np.abs(grad - numeric[k]).max() / scale))
    return [GradCheckReport(e, all(x < tol for x in e), tol) for e in errors]
