"""Dense-matrix numerics with reverse-mode gradients.

Every quantity is a 2-D float matrix wrapped in a :class:`Value`
(vectors are 1xF rows or Nx1 columns, scalars are 1x1).  Operations
executed while a :class:`Tape` is active are recorded in execution
order; ``tape.backward(loss)`` replays the record once in reverse and
accumulates exact analytic gradients into every ``requires_grad``
input.  With no active tape the same functions run forward-only, which
is the cheap path used at evaluation time.

The generic operation set is closed: matmul, transpose, add, mul,
scale, row_softmax, sigmoid, relu, gelu, layer_norm,
cosine_similarity_matrix, mean_over_rows, max_over_rows, concat_rows.
Higher-level modules register fused composite operations (with their
own analytic backward) through :func:`emit` / :meth:`Tape.record`; every
such composite is held to the same finite-difference contract as the
primitives.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import DeterminismError, NumericError, ShapeError, UsageError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715

LAYER_NORM_EPS = 1e-5
COSINE_NORM_FLOOR = 1e-12


class Value:
    """A 2-D matrix with an accumulated-gradient buffer.

    ``grad`` always has the same shape and dtype as ``data`` and starts
    at zero; backward passes add into it, so one parameter feeding two
    subexpressions receives the sum of both contributions.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr = np.atleast_2d(np.array(arr, copy=True))
        if arr.ndim != 2:
            raise ShapeError(f"Value must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 Value, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Value{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data, name: str | None = None) -> Value:
    """A trainable leaf."""
    return Value(data, requires_grad=True, name=name)


def constant(data) -> Value:
    """A non-trainable leaf."""
    return Value(data, requires_grad=False)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations for one forward pass.

    Entries are appended in execution order, which is already a
    topological order of the graph, so the backward sweep is a single
    reversed traversal.  A tape may be consumed by ``backward`` once;
    ``reset`` clears it for a fresh forward.
    """

    def __init__(self):
        self.nodes: list[tuple[str, object]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def record(self, op_name: str, backward_fn) -> None:
        self.nodes.append((op_name, backward_fn))

    def backward(self, root: Value, seed: float = 1.0) -> None:
        if self._consumed:
            raise UsageError("tape already consumed; reset() before reusing it")
        if root.data.size != 1:
            raise ShapeError(f"backward root must be 1x1, got {root.shape}")
        self._consumed = True
        root.grad[...] += seed
        for _, backward_fn in reversed(self.nodes):
            backward_fn()

    def reset(self) -> None:
        self.nodes.clear()
        self._consumed = False


class _NoTape:
    """Context that suppresses recording (pure forward evaluation)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


def no_tape() -> _NoTape:
    return _NoTape()


def _check_finite(op_name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op_name} produced non-finite values")


def emit(op_name: str, out_data: np.ndarray, inputs: tuple[Value, ...]) -> tuple[Value, Tape | None]:
    """Create the output Value for an operation.

    Returns ``(out, tape)`` where ``tape`` is the active tape iff the
    result must be recorded (some input requires grad); the caller then
    registers its backward closure with ``tape.record``.
    """
    _check_finite(op_name, out_data)
    tape = active_tape()
    track = tape is not None and any(v.requires_grad for v in inputs)
    out = Value(out_data, requires_grad=track)
    return out, (tape if track else None)


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------


def _broadcast_check(op_name: str, a: Value, b: Value) -> tuple[int, int]:
    """Allow equal shapes plus 1xC / Rx1 vector broadcast on either side."""
    ra, ca = a.shape
    rb, cb = b.shape
    rows = max(ra, rb)
    cols = max(ca, cb)
    for (r, c) in ((ra, ca), (rb, cb)):
        if (r != rows and r != 1) or (c != cols and c != 1):
            raise ShapeError(f"{op_name}: incompatible shapes {a.shape} and {b.shape}")
    return rows, cols


def _reduce_to(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def matmul(a: Value, b: Value) -> Value:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out, tape = emit("matmul", a.data @ b.data, (a, b))
    if tape:
        def backward():
            g = out.grad
            if a.requires_grad:
                a.grad += g @ b.data.T
            if b.requires_grad:
                b.grad += a.data.T @ g
        tape.record("matmul", backward)
    return out


def transpose(a: Value) -> Value:
    out, tape = emit("transpose", np.ascontiguousarray(a.data.T), (a,))
    if tape:
        def backward():
            a.grad += out.grad.T
        tape.record("transpose", backward)
    return out


def add(a: Value, b: Value) -> Value:
    _broadcast_check("add", a, b)
    out, tape = emit("add", a.data + b.data, (a, b))
    if tape:
        def backward():
            g = out.grad
            if a.requires_grad:
                a.grad += _reduce_to(g, a.shape)
            if b.requires_grad:
                b.grad += _reduce_to(g, b.shape)
        tape.record("add", backward)
    return out


def mul(a: Value, b: Value) -> Value:
    """Element-wise product (same vector broadcast rules as add)."""
    _broadcast_check("mul", a, b)
    out, tape = emit("mul", a.data * b.data, (a, b))
    if tape:
        def backward():
            g = out.grad
            if a.requires_grad:
                a.grad += _reduce_to(g * b.data, a.shape)
            if b.requires_grad:
                b.grad += _reduce_to(g * a.data, b.shape)
        tape.record("mul", backward)
    return out


def scale(a: Value, s: "Value | float") -> Value:
    """Multiply a matrix by a scalar (python float or learnable 1x1 Value)."""
    if isinstance(s, Value):
        if s.data.size != 1:
            raise ShapeError(f"scale: scalar operand must be 1x1, got {s.shape}")
        out, tape = emit("scale", a.data * s.data[0, 0], (a, s))
        if tape:
            def backward():
                g = out.grad
                if a.requires_grad:
                    a.grad += g * s.data[0, 0]
                if s.requires_grad:
                    s.grad[0, 0] += float(np.sum(g * a.data))
            tape.record("scale", backward)
        return out
    factor = float(s)
    out, tape = emit("scale", a.data * factor, (a,))
    if tape:
        def backward():
            a.grad += out.grad * factor
        tape.record("scale", backward)
    return out


def row_softmax(a: Value) -> Value:
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=1, keepdims=True)
    out, tape = emit("row_softmax", y, (a,))
    if tape:
        def backward():
            g = out.grad
            dot = np.sum(g * y, axis=1, keepdims=True)
            a.grad += (g - dot) * y
        tape.record("row_softmax", backward)
    return out


def sigmoid(a: Value) -> Value:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out, tape = emit("sigmoid", y, (a,))
    if tape:
        def backward():
            a.grad += out.grad * y * (1.0 - y)
        tape.record("sigmoid", backward)
    return out


def relu(a: Value) -> Value:
    out, tape = emit("relu", np.maximum(a.data, 0), (a,))
    if tape:
        mask = a.data > 0
        def backward():
            a.grad += out.grad * mask
        tape.record("relu", backward)
    return out


def gelu(a: Value) -> Value:
    """GELU, tanh approximation."""
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * x ** 3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)
    out, tape = emit("gelu", y, (a,))
    if tape:
        def backward():
            dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x ** 2)
            dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
            a.grad += out.grad * dy
        tape.record("gelu", backward)
    return out


def layer_norm(x: Value, gain: Value, bias: Value, eps: float = LAYER_NORM_EPS) -> Value:
    """Per-row normalization over the feature axis, then affine gain/bias.

    ``gain`` and ``bias`` are 1xF rows; variance is the population
    variance of each row.
    """
    if gain.shape != (1, x.shape[1]) or bias.shape != (1, x.shape[1]):
        raise ShapeError(
            f"layer_norm: affine must be 1x{x.shape[1]}, got {gain.shape} / {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered ** 2, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = xhat * gain.data + bias.data
    out, tape = emit("layer_norm", y, (x, gain, bias))
    if tape:
        def backward():
            g = out.grad
            if gain.requires_grad:
                gain.grad += np.sum(g * xhat, axis=0, keepdims=True)
            if bias.requires_grad:
                bias.grad += np.sum(g, axis=0, keepdims=True)
            if x.requires_grad:
                dxhat = g * gain.data
                m1 = dxhat.mean(axis=1, keepdims=True)
                m2 = np.mean(dxhat * xhat, axis=1, keepdims=True)
                x.grad += (dxhat - m1 - xhat * m2) * inv_std
        tape.record("layer_norm", backward)
    return out


def cosine_similarity_matrix(b: Value, norm_floor: float = COSINE_NORM_FLOOR) -> Value:
    """NxN matrix of pairwise cosines between the rows of ``b``.

    Row norms are clamped below at ``norm_floor`` so zero rows yield
    zero cosines instead of NaN; clamped rows get a zero normalization
    subgradient.
    """
    norms = np.linalg.norm(b.data, axis=1, keepdims=True)
    denom = np.maximum(norms, norm_floor)
    unit = b.data / denom
    c = unit @ unit.T
    out, tape = emit("cosine_similarity_matrix", c, (b,))
    if tape:
        def backward():
            g = out.grad
            du = g @ unit + g.T @ unit
            dot = np.sum(du * unit, axis=1, keepdims=True)
            clamped = norms <= norm_floor
            db = np.where(clamped, du / norm_floor, (du - dot * unit) / denom)
            b.grad += db
        tape.record("cosine_similarity_matrix", backward)
    return out


def mean_over_rows(a: Value) -> Value:
    """Column-wise mean: NxF -> 1xF (vertices are rows)."""
    n = a.shape[0]
    out, tape = emit("mean_over_rows", a.data.mean(axis=0, keepdims=True), (a,))
    if tape:
        def backward():
            a.grad += out.grad / n
        tape.record("mean_over_rows", backward)
    return out


def max_over_rows(a: Value) -> Value:
    """Column-wise max: NxF -> 1xF; ties route the gradient to the lowest row."""
    idx = np.argmax(a.data, axis=0)
    cols = np.arange(a.shape[1])
    out, tape = emit("max_over_rows", a.data[idx, cols][None, :], (a,))
    if tape:
        def backward():
            np.add.at(a.grad, (idx, cols), out.grad[0])
        tape.record("max_over_rows", backward)
    return out


def concat_rows(a: Value, b: Value) -> Value:
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: column counts differ, {a.shape} vs {b.shape}")
    out, tape = emit("concat_rows", np.vstack([a.data, b.data]), (a, b))
    if tape:
        n = a.shape[0]
        def backward():
            if a.requires_grad:
                a.grad += out.grad[:n]
            if b.requires_grad:
                b.grad += out.grad[n:]
        tape.record("concat_rows", backward)
    return out


def sum_all(a: Value) -> Value:
    """Sum of all entries as a 1x1 Value (composite of two matmuls)."""
    left = constant(np.ones((1, a.shape[0]), dtype=a.data.dtype))
    right = constant(np.ones((a.shape[1], 1), dtype=a.data.dtype))
    return matmul(left, matmul(a, right))


# --------------------------------------------------------------------------
# Finite-difference gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    param_index: int
    param_name: str | None
    entry: tuple[int, int]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    max_rel_error: float
    tol: float
    worst: GradCheckEntry | None
    per_param: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(f, params: list[Value], eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Check d f / d params against central finite differences, entrywise.

    ``f`` must be a deterministic zero-argument callable returning a 1x1
    Value built from the current contents of ``params``.  The relative
    error denominator is floored at ``1e-6 * max(1, |f|)`` so genuinely
    tiny gradients do not drown in finite-difference noise.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise UsageError(f"eps must lie in [1e-7, 1e-3], got {eps}")

    with no_tape():
        first = f().item()
        second = f().item()
    if first != second:
        raise DeterminismError(
            f"two forward passes disagree ({first!r} vs {second!r}); f must be pure")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
        tape.backward(out)
    analytic = [p.grad.copy() for p in params]

    floor = 1e-6 * max(1.0, abs(first))
    worst: GradCheckEntry | None = None
    max_rel = 0.0
    per_param: list[float] = []
    with no_tape():
        for k, p in enumerate(params):
            param_max = 0.0
            it = np.nditer(p.data, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = p.data[idx]
                p.data[idx] = orig + eps
                f_plus = f().item()
                p.data[idx] = orig - eps
                f_minus = f().item()
                p.data[idx] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = float(analytic[k][idx])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                if rel > max_rel:
                    max_rel = rel
                    worst = GradCheckEntry(k, p.name, idx, a, numeric, rel)
                param_max = max(param_max, rel)
            per_param.append(param_max)
    return GradCheckReport(max_rel_error=max_rel, tol=tol, worst=worst, per_param=per_param)
