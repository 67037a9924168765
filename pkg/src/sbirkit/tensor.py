"""Dense float64 tensors with a small reverse-mode autodiff engine.

Every differentiable quantity in the package (encoder activations, embedding
heads, losses) is built from the ops in this module. The graph is recorded
implicitly: each non-leaf tensor keeps references to its parents and a closure
that maps the upstream gradient to parent gradients. :func:`backward` walks
that graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

SQRT_EPS = 1e-12

_ids = itertools.count(1)
_grad_enabled = True
_kink_log: list[float] | None = None


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's shape rule."""


class NonFiniteError(FloatingPointError):
    """An op received or produced NaN/Inf."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def kink_monitor() -> Iterator[list[float]]:
    """Collect, for every nondifferentiable op evaluated in the block, how close
    its input came to the kink (ReLU/abs at 0, clamps at their bound, max gaps)."""
    global _kink_log
    prev = _kink_log
    _kink_log = log = []
    try:
        yield log
    finally:
        _kink_log = prev


def _note_kink(dist: np.ndarray | float) -> None:
    if _kink_log is not None:
        arr = np.asarray(dist, dtype=np.float64)
        if arr.size:
            _kink_log.append(float(arr.min()))


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _max_gap(values: np.ndarray, axis: int | None) -> np.ndarray:
    """Distance from the max to the largest strictly smaller value.

    Exact ties are structural (e.g. a symmetric matrix) and do not count as kinks.
    """
    if axis is None:
        flat = np.unique(values.ravel())
        return np.array(flat[-1] - flat[-2]) if flat.size > 1 else np.array(np.inf)
    moved = np.moveaxis(values, axis, -1).reshape(-1, values.shape[axis])
    gaps = [
        (u[-1] - u[-2]) if u.size > 1 else np.inf for u in (np.unique(r) for r in moved)
    ]
    return np.array(gaps)


class Tensor:
    """An immutable n-dimensional float64 array that may sit on the autodiff graph."""

    __slots__ = ("data", "requires_grad", "node_id", "op", "_parents", "_backward", "grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.grad: np.ndarray | None = None

    # -- basics -------------------------------------------------------------
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
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic ---------------------------------------------------------
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

    # -- method forms -------------------------------------------------------
    def relu(self) -> Tensor:
        return relu(self)

    def square(self) -> Tensor:
        return square(self)

    def sqrt(self, eps: float = SQRT_EPS) -> Tensor:
        return sqrt(self, eps)

    def abs(self) -> Tensor:
        return absolute(self)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def max(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return tmax(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite {what}")


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    for p in parents:
        if not p._parents:
            _check_finite(op, p.data, "input")
    _check_finite(op, data, "output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.node_id = next(_ids)
    out.op = op
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward_fn if track else None
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# -- binary elementwise -----------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _make(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def pairwise_sq_dist(a, b) -> Tensor:
    """``out[i, j] = sum_k (a[i, k] - b[j, k])**2`` computed from explicit
    differences (no Gram-matrix cancellation), so coincident rows give exact 0."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sq_dist: shapes {a.shape} and {b.shape} do not conform")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def back(g):
        ga = 2.0 * (a.data * g.sum(axis=1)[:, None] - g @ b.data)
        gb = 2.0 * (b.data * g.sum(axis=0)[:, None] - g.T @ a.data)
        return ga, gb

    return _make("pairwise_sq_dist", out, (a, b), back)


# -- unary elementwise ------------------------------------------------------
def relu(x) -> Tensor:
    x = _wrap(x)
    _note_kink(np.abs(x.data))
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def square(x) -> Tensor:
    x = _wrap(x)
    return _make("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x, eps: float = SQRT_EPS) -> Tensor:
    """``sqrt(x + eps)``; the guard keeps the derivative finite at zero distance."""
    x = _wrap(x)
    out = np.sqrt(x.data + eps)
    return _make("sqrt", out, (x,), lambda g: (g / (2.0 * out),))


def absolute(x) -> Tensor:
    x = _wrap(x)
    _note_kink(np.abs(x.data))
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def exp(x) -> Tensor:
    x = _wrap(x)
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _wrap(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make("log", out, (x,), lambda g: (g / x.data,))


def minimum(x, bound: float) -> Tensor:
    """Elementwise ``min(x, bound)``; gradient goes to x only where x < bound."""
    x = _wrap(x)
    _note_kink(np.abs(x.data - bound))
    mask = x.data < bound
    return _make("minimum", np.where(mask, x.data, bound), (x,), lambda g: (g * mask,))


def clamp_min(x, bound: float) -> Tensor:
    """Elementwise ``max(x, bound)``; gradient goes to x only where x > bound."""
    x = _wrap(x)
    _note_kink(np.abs(x.data - bound))
    mask = x.data > bound
    return _make("clamp_min", np.where(mask, x.data, bound), (x,), lambda g: (g * mask,))


# -- reductions and shape ---------------------------------------------------
def tsum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(out, dtype=np.float64), (x,), back)


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    n = x.size if axis is None else x.shape[axis]
    return tsum(x, axis, keepdims) * (1.0 / n)


def tmax(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max over all entries or one axis. Ties go to the first index, and only the
    selected entry receives gradient."""
    x = _wrap(x)
    _note_kink(_max_gap(x.data, axis))
    if axis is None:
        idx = int(np.argmax(x.data))
        out = np.array(x.data.flat[idx])

        def back(g):
            grad = np.zeros(x.size)
            grad[idx] = g
            return (grad.reshape(x.shape),)

        return _make("max", out, (x,), back)

    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def back_axis(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros(x.shape)
        np.put_along_axis(grad, idx, g, axis=axis)
        return (grad,)

    return _make("max", out if keepdims else np.squeeze(out, axis), (x,), back_axis)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _wrap(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = _wrap(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return _make("transpose", x.data.T, (x,), lambda g: (g.T,))


# -- backward ---------------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Reverse pass from a scalar loss.

    Returns gradients keyed by ``node_id`` for every requires-grad leaf reachable
    from ``loss``, and stores them on ``leaf.grad``. Tensors listed in ``wrt``
    that the loss does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[loss.node_id] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                leaves[node.node_id] = g
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = pg
    for t in wrt or ():
        if t.node_id not in leaves:
            leaves[t.node_id] = np.zeros_like(t.data)
            t.grad = leaves[t.node_id]
    return leaves


# -- gradient checking ------------------------------------------------------
@dataclass
class FiniteDiffReport:
    max_rel_err: float
    passed: bool
    near_kink: bool
    kink_distance: float
    n_checked: int


def finite_diff_check(
    loss_fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> FiniteDiffReport:
    """Compare analytic gradients of ``loss_fn(*tensors)`` with central differences.

    Relative error per entry is ``|a - b| / max(|a|, |b|, 1e-8)``. Points within
    ``10 * step`` of a kink are flagged through ``near_kink`` and skipped
    (``n_checked == 0``); callers resample those.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with kink_monitor() as kinks:
        loss = loss_fn(*leaves)
    grads = backward(loss, wrt=leaves)
    kink_distance = min(kinks) if kinks else float("inf")
    near_kink = kink_distance < 10.0 * step
    if near_kink:
        # the comparison is meaningless here; callers resample
        return FiniteDiffReport(float("nan"), False, True, kink_distance, 0)

    max_err = 0.0
    n = 0
    with no_grad():
        for k, base in enumerate(arrays):
            analytic = grads[leaves[k].node_id]
            for idx in np.ndindex(base.shape):
                bumped = [a for a in arrays]
                plus = base.copy()
                plus[idx] += step
                minus = base.copy()
                minus[idx] -= step
                bumped[k] = plus
                f_plus = loss_fn(*[Tensor(a) for a in bumped]).item()
                bumped[k] = minus
                f_minus = loss_fn(*[Tensor(a) for a in bumped]).item()
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = analytic[idx]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                max_err = max(max_err, err)
                n += 1
    return FiniteDiffReport(
        max_rel_err=max_err,
        passed=max_err <= tolerance,
        near_kink=False,
        kink_distance=kink_distance,
        n_checked=n,
    )
