"""Dense float tensors with reverse-mode automatic differentiation.

Tensors store row-major numpy arrays (float32 by default, float64 supported
for high-precision verification). Operations executed while a Tape is active
are recorded in execution order; ``backward`` walks the tape in reverse,
which is a valid topological order, and accumulates gradients into every
tensor that requires them.

Numerics follow two rules: reductions and matrix products accumulate in
float64 before casting back to the storage dtype, and non-finite values
propagate rather than raise (enable ``set_finite_checks`` to assert after
each op while debugging).

A tape and its tensors belong to one thread; parallelism happens across
independent tapes.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "is_recording",
    "set_finite_checks",
    "apply_op",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "log_sigmoid",
    "tanh",
    "relu_clipped",
    "sum",
    "mean",
    "max",
    "logsumexp",
    "softmax",
    "log_softmax",
    "concat",
    "gather_rows",
    "flip",
    "grad_check",
    "GradCheckReport",
]

_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _tapes() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.recording = True
        _state.finite_checks = False
    return _state.tapes


def current_tape() -> Optional["Tape"]:
    tapes = _tapes()
    return tapes[-1] if tapes else None


def is_recording() -> bool:
    _tapes()
    return _state.recording and bool(_state.tapes)


def set_finite_checks(enabled: bool) -> None:
    """Debug switch: assert every op result is finite right after computing it."""
    _tapes()
    _state.finite_checks = enabled


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        _tapes()
        self._prev = _state.recording
        _state.recording = False
        return self

    def __exit__(self, *exc):
        _state.recording = self._prev
        return False


class Tape:
    """Ordered record of executed operations for one reverse pass.

    Use as a context manager around a forward/backward step; entering pushes
    the tape, leaving pops it. ``clear`` drops all recorded operations and
    their saved state.
    """

    def __init__(self):
        self.ops: list[_TapeOp] = []

    def record(self, op: "_TapeOp") -> None:
        self.ops.append(op)

    def clear(self) -> None:
        self.ops.clear()

    def __len__(self) -> int:
        return len(self.ops)

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tapes().pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False


class _TapeOp:
    __slots__ = ("name", "out", "inputs", "backward")

    def __init__(self, name, out, inputs, backward):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"expected a scalar tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, tape: Optional[Tape] = None) -> None:
        backward(self, tape=tape)

    # ---- operator sugar -------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{grad})"


def _lift(x, like: Optional[np.dtype] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=like if like is not None else np.float32)
    return Tensor(arr)


def _result_dtype(*tensors: Tensor):
    dtype = np.float32
    for t in tensors:
        if t.data.dtype == np.float64:
            dtype = np.float64
    return dtype


def _matmul64(a: np.ndarray, b: np.ndarray, out_dtype) -> np.ndarray:
    # accumulate in float64 regardless of storage dtype
    prod = np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    return prod.astype(out_dtype, copy=False)


def _sum64(a: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    return np.sum(a, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype, copy=False)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = np.sum(g, axis=0, dtype=np.float64).astype(g.dtype, copy=False)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = np.sum(g, axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype, copy=False)
    return g


def apply_op(
    name: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Create an op result and record it on the active tape.

    ``backward`` receives the output gradient and returns one gradient array
    (or None) per input. This is the extension point fused layer kernels use.
    """
    if getattr(_state, "finite_checks", False) and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{name}'")
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad and is_recording())
    if out.requires_grad:
        current_tape().record(_TapeOp(name, out, tuple(inputs), backward))
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Reverse pass: populate ``grad`` for every tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else current_tape()
    if tape is None:
        raise ContractError("backward called with no active tape")
    loss.grad = np.ones_like(loss.data)
    for op in reversed(tape.ops):
        gout = op.out.grad
        if gout is None:
            continue
        grads = op.backward(gout)
        for t, g in zip(op.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            g = g.astype(t.data.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise ops


def _binary(name, a, b, fwd, bwd):
    a, b = _lift(a), _lift(b)
    try:
        with np.errstate(all="ignore"):
            out = fwd(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from e
    out = out.astype(_result_dtype(a, b), copy=False)

    def back(g):
        ga, gb = bwd(g, a.data, b.data, out)
        return (
            _unbroadcast(ga, a.shape) if ga is not None else None,
            _unbroadcast(gb, b.shape) if gb is not None else None,
        )

    return apply_op(name, (a, b), out, back)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y, o: (g, g))


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y, o: (g, -g))


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y, o: (g * y, g * x))


def div(a, b):
    return _binary(
        "div", a, b, lambda x, y: x / y, lambda g, x, y, o: (g / y, -g * x / (y * y))
    )


def _unary(name, a, fwd, bwd):
    a = _lift(a)
    with np.errstate(all="ignore"):
        out = fwd(a.data)
    return apply_op(name, (a,), out, lambda g: (bwd(g, a.data, out),))


def neg(a):
    return _unary("neg", a, lambda x: -x, lambda g, x, o: -g)


def exp(a):
    return _unary("exp", a, np.exp, lambda g, x, o: g * o)


def log(a):
    return _unary("log", a, np.log, lambda g, x, o: g / x)


def sqrt(a):
    return _unary("sqrt", a, np.sqrt, lambda g, x, o: g * 0.5 / o)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    return _unary("sigmoid", a, _sigmoid, lambda g, x, o: g * o * (1.0 - o))


def log_sigmoid(a):
    # -softplus(-x), computed without overflow on either tail
    def fwd(x):
        return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    return _unary("log_sigmoid", a, fwd, lambda g, x, o: g * _sigmoid(-x))


def tanh(a):
    return _unary("tanh", a, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def relu_clipped(a, cap: Optional[float] = None):
    """max(x, 0), additionally clipped at ``cap`` when given."""

    def fwd(x):
        return np.clip(x, 0.0, cap)

    def bwd(g, x, o):
        mask = x > 0
        if cap is not None:
            mask &= x < cap
        return g * mask

    return _unary("relu_clipped", a, fwd, bwd)


# ---------------------------------------------------------------------------
# reductions


def _check_axis(a: Tensor, axis):
    if axis is None:
        return
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")


def _restore_dims(g, axis, keepdims, in_shape):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    elif axis is None and not keepdims:
        g = np.asarray(g).reshape((1,) * len(in_shape))
    return g


def sum(a, axis=None, keepdims=False):
    a = _lift(a)
    _check_axis(a, axis)
    out = _sum64(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        g = _restore_dims(g, axis, keepdims, a.shape)
        return (np.broadcast_to(g, a.shape).copy(),)

    return apply_op("sum", (a,), out, back)


def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    _check_axis(a, axis)
    count = a.size if axis is None else a.shape[axis]
    out = _sum64(a.data, axis=axis, keepdims=keepdims) / np.asarray(count, dtype=a.dtype)

    def back(g):
        g = _restore_dims(g, axis, keepdims, a.shape)
        return (np.broadcast_to(g, a.shape).copy() / count,)

    return apply_op("mean", (a,), out, back)


def max(a, axis=None, keepdims=False):
    a = _lift(a)
    _check_axis(a, axis)
    out = np.max(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        g = _restore_dims(g, axis, keepdims, a.shape)
        o = _restore_dims(out, axis, keepdims, a.shape) if not keepdims else out
        mask = (a.data == o).astype(a.data.dtype)
        counts = np.sum(mask, axis=axis, keepdims=True) if axis is not None else np.sum(mask)
        return (np.broadcast_to(g, a.shape) * mask / counts,)

    return apply_op("max", (a,), out, back)


def logsumexp(a, axis=None, keepdims=False):
    """log(sum(exp(x))) stabilized by max subtraction."""
    a = _lift(a)
    _check_axis(a, axis)
    xmax = np.max(a.data, axis=axis, keepdims=True)
    xmax = np.where(np.isfinite(xmax), xmax, 0.0)
    with np.errstate(all="ignore"):
        sumexp = _sum64(np.exp(a.data - xmax), axis=axis, keepdims=True)
        out_kd = np.log(sumexp) + xmax
    if keepdims:
        out = out_kd
    elif axis is None:
        out = out_kd.reshape(())
    else:
        out = np.squeeze(out_kd, axis=axis)

    def back(g):
        g = _restore_dims(g, axis, keepdims, a.shape)
        with np.errstate(all="ignore"):
            soft = np.exp(a.data - out_kd)
        return (np.broadcast_to(g, a.shape) * soft,)

    return apply_op("logsumexp", (a,), out, back)


def softmax(a, axis=-1):
    return exp(a - logsumexp(a, axis=axis, keepdims=True))


def log_softmax(a, axis=-1):
    return a - logsumexp(a, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    dtype = _result_dtype(a, b)
    out = _matmul64(a.data, b.data, dtype)

    def back(g):
        return _matmul64(g, b.data.T, a.dtype), _matmul64(a.data.T, g, b.dtype)

    return apply_op("matmul", (a, b), out, back)


def reshape(a, shape):
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from e
    return apply_op("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = _lift(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return apply_op("transpose", (a,), out, lambda g: (np.transpose(g, inv),))


def narrow(a, key):
    """Basic slicing (no fancy indexing on the tape; see gather_rows)."""
    a = _lift(a)
    out = a.data[key]

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return apply_op("slice", (a,), out, back)


def flip(a, axis=0):
    a = _lift(a)
    out = np.flip(a.data, axis=axis)
    return apply_op("flip", (a,), out, lambda g: (np.flip(g, axis=axis),))


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(str(e)) from e
    out = out.astype(_result_dtype(*tensors), copy=False)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return apply_op("concat", tuple(tensors), out, back)


def gather_rows(a, indices):
    """Select rows ``a[indices]``; repeated indices accumulate gradient."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("gather_rows expects a 1-D index array")
    out = a.data[idx]

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return apply_op("gather_rows", (a,), out, back)


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    """Per-parameter comparison of analytic vs central-difference gradients."""

    def __init__(self):
        self.entries: list[dict] = []

    def add(self, name, max_rel_err, max_abs_err, passed):
        self.entries.append(
            {
                "param": name,
                "max_rel_err": max_rel_err,
                "max_abs_err": max_abs_err,
                "passed": passed,
            }
        )

    @property
    def passed(self) -> bool:
        return all(e["passed"] for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return float(np.max([e["max_rel_err"] for e in self.entries])) if self.entries else 0.0

    def __repr__(self):
        lines = [
            f"  {e['param']}: rel={e['max_rel_err']:.3e} abs={e['max_abs_err']:.3e} "
            f"{'ok' if e['passed'] else 'FAIL'}"
            for e in self.entries
        ]
        return "GradCheckReport(\n" + "\n".join(lines) + "\n)"


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict,
    step: float = 1e-3,
    rtol: float = 1e-3,
    atol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``f`` must be deterministic (re-evaluated many times). An element passes
    when |analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|);
    the report carries the worst relative error per parameter either way.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"param{i}", p) for i, p in enumerate(params)]

    for _, p in named:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        if loss.size != 1:
            raise ContractError("grad_check needs a scalar-valued function")
        backward(loss, tape=tape)
        analytic = [
            p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for _, p in named
        ]

    report = GradCheckReport()
    with no_grad():
        for (name, p), ana in zip(named, analytic):
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            num = np.zeros_like(p.data, dtype=np.float64)
            flat = p.data.reshape(-1)
            nflat = num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = float(f().data.reshape(-1)[0])
                flat[i] = orig - step
                lo = float(f().data.reshape(-1)[0])
                flat[i] = orig
                nflat[i] = (hi - lo) / (2.0 * step)
            abs_err = np.abs(ana.astype(np.float64) - num)
            denom = np.maximum(np.abs(ana), np.abs(num))
            rel = abs_err / np.maximum(denom, 1e-30)
            ok = bool(np.all(abs_err <= atol + rtol * denom))
            report.add(name, float(np.max(rel)) if rel.size else 0.0,
                       float(np.max(abs_err)) if abs_err.size else 0.0, ok)
    return report
