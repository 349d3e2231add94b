"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable quantity in the package flows through this module.
A :class:`Tape` is created for one forward pass; parameters are registered
on it with :meth:`Tape.parameter`, operations on tape-bound tensors append
nodes, and :func:`backward` walks the nodes in reverse.

Tensors that are not bound to a tape are constants: operations whose inputs
are all constants are evaluated eagerly and nothing is recorded.

Broadcasting is limited to a scalar combined with a tensor. Row-wise bias
addition is the explicit :func:`add_bias` operation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

EXP_LIMIT = 700.0


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _all_finite(arr: np.ndarray) -> bool:
    # one cheap reduction first; overflow in the sum falls back to the exact check
    return math.isfinite(arr.sum()) or bool(np.isfinite(arr).all())


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable float64 array, optionally bound to a :class:`Tape`."""

    __slots__ = ("_value", "tape", "name")

    def __init__(self, value, tape: "Tape | None" = None, name: str | None = None):
        arr = np.array(value, dtype=np.float64)
        if not _all_finite(arr):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self._value = _freeze(arr)
        self.tape = tape
        self.name = name

    @property
    def value(self) -> np.ndarray:
        return self._value

    @property
    def shape(self) -> tuple[int, ...]:
        return self._value.shape

    @property
    def size(self) -> int:
        return self._value.size

    def item(self) -> float:
        if self._value.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self._value.reshape(()))

    def __repr__(self) -> str:
        bound = "" if self.tape is None else ", taped"
        return f"Tensor(shape={self.shape}{bound})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Record of one forward pass plus its registered parameters."""

    nodes: list[_Node] = field(default_factory=list)
    params: dict[str, Tensor] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def parameter(self, name: str, value) -> Tensor:
        if name in self.params:
            raise TapeError(f"parameter {name!r} already registered")
        t = Tensor(value, tape=self, name=name)
        self.params[name] = t
        return t

    def constant(self, value) -> Tensor:
        return Tensor(value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> "Tape | None":
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise TapeError("operands are bound to different tapes")
    return tape


def _record(value: np.ndarray, inputs: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    if not _all_finite(value):
        raise NonFiniteError(f"{op} produced a non-finite value")
    tape = _tape_of(*inputs)
    out = Tensor.__new__(Tensor)
    out._value = _freeze(np.asarray(value, dtype=np.float64))
    out.tape = tape
    out.name = None
    if tape is not None:
        tape.nodes.append(_Node(out, inputs, vjp))
    return out


# -- elementwise -------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _record(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _record(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    av, bv = a.value, b.value
    return _record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise NonFiniteError("div: division by zero")
    return _record(
        av / bv,
        (a, b),
        lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * av / bv**2, b.shape)),
        "div",
    )


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.value)
    return _record(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.value > EXP_LIMIT):
        raise NonFiniteError(f"exp: argument {x.value.max():.6g} exceeds {EXP_LIMIT}")
    e = np.exp(x.value)
    return _record(e, (x,), lambda g: (g * e,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.value <= 0):
        raise NonFiniteError("log: non-positive argument")
    v = x.value
    return _record(np.log(v), (x,), lambda g: (g / v,), "log")


def square(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _record(v * v, (x,), lambda g: (2.0 * g * v,), "square")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    x = as_tensor(x)
    v = x.value
    inside = (v >= lo) & (v <= hi)
    return _record(np.clip(v, lo, hi), (x,), lambda g: (g * inside,), "clip")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "square": square,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch a named element-wise operation, e.g. ``elementwise("sigmoid", x)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown element-wise op {op!r}") from None
    return fn(*args)


# -- linear algebra and reductions -------------------------------------------


def matmul(a, b) -> Tensor:
    """``(m,k) @ (k,n) -> (m,n)`` or ``(m,k) @ (k,) -> (m,)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _record(av @ bv, (a, b), vjp, "matmul")


def add_bias(x, b) -> Tensor:
    """Add vector ``b`` (n,) to every row of ``x`` (m, n)."""
    x, b = as_tensor(x), as_tensor(b)
    if x.value.ndim != 2 or b.value.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add {b.shape} to rows of {x.shape}")
    return _record(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")


def scale_rows(x, s) -> Tensor:
    """Multiply row ``i`` of ``x`` (m, n) by ``s[i]``."""
    x, s = as_tensor(x), as_tensor(s)
    if x.value.ndim != 2 or s.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: {s.shape} does not match rows of {x.shape}")
    xv, sv = x.value, s.value
    return _record(
        xv * sv[:, None],
        (x, s),
        lambda g: (g * sv[:, None], (g * xv).sum(axis=1)),
        "scale_rows",
    )


def total(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _record(np.asarray(x.value.sum()), (x,), lambda g: (np.full(shape, g),), "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    n, shape = x.size, x.shape
    return _record(np.asarray(x.value.mean()), (x,), lambda g: (np.full(shape, g / n),), "mean")


def dot(a, b) -> Tensor:
    return total(mul(a, b))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        v = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {[p.shape for p in parts]} along axis {axis}") from err
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _record(v, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        v = x.value.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"cannot reshape {old} to {shape}") from err
    return _record(v, (x,), lambda g: (g.reshape(old),), "reshape")


def take(x, index) -> Tensor:
    """Gather rows (or elements for 1-D ``x``); repeated indices accumulate gradient."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(x.value[idx], (x,), vjp, "take")


# -- softmax family ----------------------------------------------------------


def softmax(x) -> Tensor:
    """Softmax of a 1-D tensor, stabilised by subtracting the maximum."""
    x = as_tensor(x)
    if x.value.ndim != 1:
        raise ShapeError(f"softmax expects a vector, got shape {x.shape}")
    if x.size == 0:
        raise ShapeError("softmax of an empty vector")
    return segment_softmax(x, np.zeros(x.size, dtype=np.intp), 1)


def _check_segments(n: int, segments: np.ndarray, num_segments: int) -> np.ndarray:
    seg = np.asarray(segments, dtype=np.intp)
    if seg.shape != (n,):
        raise ShapeError(f"segment ids of shape {seg.shape} for {n} elements")
    if n and (seg.min() < 0 or seg.max() >= num_segments):
        raise ShapeError("segment id out of range")
    return seg


def _segsum(v: np.ndarray, seg: np.ndarray, num_segments: int) -> np.ndarray:
    if v.ndim == 1:
        return np.bincount(seg, weights=v, minlength=num_segments)
    out = np.empty((num_segments, v.shape[1]))
    for j in range(v.shape[1]):
        out[:, j] = np.bincount(seg, weights=v[:, j], minlength=num_segments)
    return out


def _segmax(v: np.ndarray, seg: np.ndarray, num_segments: int) -> np.ndarray:
    if seg.size and np.all(seg[1:] >= seg[:-1]):
        starts = np.searchsorted(seg, np.arange(num_segments))
        present = np.bincount(seg, minlength=num_segments) > 0
        out = np.full(num_segments, -np.inf)
        out[present] = np.maximum.reduceat(v, starts[present])
        return out
    out = np.full(num_segments, -np.inf)
    np.maximum.at(out, seg, v)
    return out


def segment_sum(x, segments, num_segments: int) -> Tensor:
    """Sum elements (1-D) or rows (2-D) of ``x`` that share a segment id."""
    x = as_tensor(x)
    if x.value.ndim not in (1, 2):
        raise ShapeError(f"segment_sum expects 1-D or 2-D input, got shape {x.shape}")
    seg = _check_segments(x.shape[0], segments, num_segments)
    out = _segsum(x.value, seg, num_segments)
    return _record(out, (x,), lambda g: (g[seg],), "segment_sum")


def segment_softmax(x, segments, num_segments: int) -> Tensor:
    """Softmax of a 1-D tensor computed independently within each segment."""
    x = as_tensor(x)
    if x.value.ndim != 1:
        raise ShapeError(f"segment_softmax expects a vector, got shape {x.shape}")
    seg = _check_segments(x.size, segments, num_segments)
    v = x.value
    top = _segmax(v, seg, num_segments)
    e = np.exp(v - top[seg])
    z = _segsum(e, seg, num_segments)
    y = e / z[seg]

    def vjp(g):
        gy = _segsum(g * y, seg, num_segments)
        return (y * (g - gy[seg]),)

    return _record(y, (x,), vjp, "segment_softmax")


# -- reverse pass ------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(param) for every parameter registered on ``tape``."""
    if loss.size != 1 or loss.value.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape:
        raise TapeError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if inp.tape is None or gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
    tape.grads = {
        name: grads.get(id(p), np.zeros(p.shape)) for name, p in tape.params.items()
    }
    return tape.grads


# -- finite-difference checking ----------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


LossFn = Callable[[Tape, Mapping[str, Tensor]], Tensor]


def grad_check(
    fn: LossFn,
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    tol: float = 1e-4,
    analytic: Callable[[Mapping[str, np.ndarray]], Mapping[str, np.ndarray]] | None = None,
) -> GradCheckReport:
    """Compare gradients against central differences, coordinate by coordinate.

    ``fn(tape, params)`` must build a scalar loss from the tape-bound
    parameters it is handed. The error for a coordinate is
    ``|g_ad - g_fd| / max(1, |g_fd|)``; the report keeps the worst coordinate
    of each parameter. ``analytic`` replaces the autodiff gradient, which is
    how a hand-written gradient gets checked.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values) -> float:
        tape = Tape()
        bound = {k: tape.parameter(k, v) for k, v in values.items()}
        out = fn(tape, bound).item()
        if not np.isfinite(out):
            raise NonFiniteError("loss is non-finite during probing")
        return out

    if analytic is None:
        tape = Tape()
        bound = {k: tape.parameter(k, v) for k, v in base.items()}
        ad = backward(tape, fn(tape, bound))
    else:
        ad = {k: np.asarray(v, dtype=np.float64) for k, v in analytic(base).items()}

    errors = {}
    for name, value in base.items():
        worst = 0.0
        for idx in np.ndindex(value.shape):
            probe = dict(base)
            up, down = value.copy(), value.copy()
            up[idx] += step
            down[idx] -= step
            probe[name] = up
            f_up = evaluate(probe)
            probe[name] = down
            f_down = evaluate(probe)
            fd = (f_up - f_down) / (2 * step)
            worst = max(worst, abs(ad[name][idx] - fd) / max(1.0, abs(fd)))
        errors[name] = worst
    return GradCheckReport(errors, tol)
