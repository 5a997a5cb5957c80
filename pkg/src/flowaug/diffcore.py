"""Small dense-tensor library with tape-based reverse-mode differentiation.

Values live in numpy arrays. Operations on tensors that require gradients are
recorded on the active :class:`Tape`; :meth:`Tape.gradient` walks the record
backwards once and then discards it.

Broadcasting is rank-preserving only: two operands must have the same number
of dimensions (extents may be 1 to broadcast). Python scalars and 0-d tensors
are the single exception.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "CheckReport",
    "DiffError", "ShapeError", "TapeError", "NonFiniteError", "UnsupportedPrimitiveError",
    "tensor", "as_tensor", "set_default_dtype", "get_default_dtype", "strict", "set_strict",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "tanh", "relu", "absolute",
    "sum", "mean", "concat", "reshape", "transpose", "getitem", "logsumexp", "log_softmax",
    "evaluate_with_gradients", "finite_difference_check",
]


class DiffError(Exception):
    pass


class ShapeError(DiffError, ValueError):
    pass


class TapeError(DiffError, RuntimeError):
    pass


class NonFiniteError(DiffError, FloatingPointError):
    pass


class UnsupportedPrimitiveError(DiffError, TypeError):
    def __init__(self, primitive: str):
        super().__init__(f"unsupported primitive: {primitive!r}")
        self.primitive = primitive


_DEFAULT_DTYPE = np.float64
_STRICT = False
_local = threading.local()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"precision must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_strict(flag: bool) -> None:
    global _STRICT
    _STRICT = bool(flag)


@contextlib.contextmanager
def strict(flag: bool = True):
    """Raise :class:`NonFiniteError` whenever an operation produces NaN/Inf."""
    prev = _STRICT
    set_strict(flag)
    try:
        yield
    finally:
        set_strict(prev)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense real array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    _UFUNCS = {"add": "add", "subtract": "sub", "multiply": "mul",
               "true_divide": "div", "negative": "neg", "matmul": "matmul"}

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        name = self._UFUNCS.get(ufunc.__name__)
        if method != "__call__" or name is None or kwargs:
            raise UnsupportedPrimitiveError(f"numpy.{ufunc.__name__}")
        return globals()[name](*inputs)

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedPrimitiveError(f"numpy.{func.__name__}")

    def __bool__(self):
        raise UnsupportedPrimitiveError("bool (data-dependent control flow)")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and np.ndim(x) == 0:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


@dataclass
class _Entry:
    out: Tensor
    parents: tuple
    needs: tuple
    backward: Callable


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Use as a context manager; operations whose inputs require gradients are
    recorded while the tape is active. ``gradient`` may be called once.
    """

    def __init__(self):
        self._entries: list[_Entry] = []
        self._consumed = False

    def __enter__(self) -> Tape:
        if self._consumed:
            raise TapeError("tape already consumed; record a new one")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tapes must be exited in LIFO order")
        stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, out, parents, needs, backward) -> None:
        self._entries.append(_Entry(out, parents, needs, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        if self._consumed:
            raise TapeError("backward pass already replayed on this tape")
        if seed is None:
            if target.size != 1:
                raise ShapeError(
                    f"non-scalar value of shape {target.shape} needs an explicit seed gradient")
            seed = np.ones_like(target.data)
        else:
            seed = np.asarray(seed, dtype=target.dtype)
            if seed.shape != target.shape:
                raise ShapeError(f"seed shape {seed.shape} != value shape {target.shape}")
        grads = {id(target): seed}
        for entry in reversed(self._entries):
            g = grads.get(id(entry.out))
            if g is None:
                continue
            pgrads = entry.backward(g)
            for p, need, pg in zip(entry.parents, entry.needs, pgrads):
                if not need or pg is None:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else np.asarray(g, dtype=s.dtype))
        self._entries.clear()
        self._consumed = True
        return out


def _check_finite(data: np.ndarray, name: str) -> None:
    if _STRICT and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name} produced non-finite values")


def _make(name: str, data, parents: tuple, backward: Callable) -> Tensor:
    _check_finite(data, name)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None:
        needs = tuple(p.requires_grad for p in parents)
        if any(needs):
            out.requires_grad = True
            tape._record(out, parents, needs, backward)
    return out


def _binary_operands(a, b, name: str) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    elif isinstance(b, Tensor):
        a = as_tensor(a, like=b)
    else:
        a, b = as_tensor(a), as_tensor(b)
    if a.ndim and b.ndim:
        if a.ndim != b.ndim:
            raise ShapeError(f"{name}: rank mismatch {a.shape} vs {b.shape} (no implicit rank promotion)")
        for x, y in zip(a.shape, b.shape):
            if x != y and x != 1 and y != 1:
                raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (n,k)@(k,m), got {a.shape} @ {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len({t.ndim for t in ts}) != 1:
        raise ShapeError("concat: all operands must have the same rank")
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    """Basic or advanced indexing; the adjoint scatters with accumulation."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        raise UnsupportedPrimitiveError("indexing by Tensor")
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("getitem", np.array(out, copy=True), (a,), backward)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = np.sum(shifted, axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = shifted / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make("logsumexp", out if keepdims else np.squeeze(out, axis=axis), (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), backward)


def evaluate_with_gradients(program: Callable, inputs: Sequence, seed=None):
    """Evaluate ``program(*inputs)`` and differentiate it w.r.t. every input.

    Returns ``(value, gradients)``; each input's ``.grad`` is also filled in.
    A non-scalar value needs ``seed`` (the output cotangent).
    """
    ins = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    prev = [t.requires_grad for t in ins]
    tape = Tape()
    with tape:
        for t in ins:
            t.requires_grad = True
        try:
            value = program(*ins)
        finally:
            for t, p in zip(ins, prev):
                t.requires_grad = p
    if not isinstance(value, Tensor):
        raise TypeError(f"program must return a Tensor, got {type(value).__name__}")
    arrays = tape.gradient(value, ins, seed=seed)
    grads = []
    for t, g in zip(ins, arrays):
        t.grad = g
        grads.append(Tensor(g))
    value.requires_grad = False
    return value, grads


@dataclass
class CheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tolerance: float
    kinks: list = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return float(np.max(self.rel_error)) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance and not self.kinks

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        extra = f", kinks at {self.kinks}" if self.kinks else ""
        return f"{status}: max rel error {self.max_rel_error:.3e} (tol {self.tolerance:.1e}){extra}"


def finite_difference_check(program: Callable, point, step: float = 1e-5, tolerance: float = 1e-5,
                            coords=None, scale_floor: float = 1e-4) -> CheckReport:
    """Compare analytic gradients of a scalar program with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, scale_floor)``.
    Coordinates where the one-sided differences disagree strongly are reported
    as kinks and fail the check.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point,
                  dtype=point.dtype if isinstance(point, Tensor) else _DEFAULT_DTYPE)
    _, (g,) = evaluate_with_gradients(program, [Tensor(x0.copy())])
    if g.data.size != x0.size:
        raise ShapeError("gradient shape mismatch")
    flat = x0.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)

    def f(v):
        val = program(Tensor(v.reshape(x0.shape)))
        if val.size != 1:
            raise ShapeError("finite_difference_check needs a scalar-valued program")
        return float(val.data)

    f0 = f(flat.copy())
    analytic = g.data.reshape(-1)[idx]
    numeric = np.empty(len(idx))
    kinks = []
    for j, i in enumerate(idx):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += step
        xm[i] -= step
        fp, fm = f(xp), f(xm)
        numeric[j] = (fp - fm) / (2 * step)
        if not np.isfinite(numeric[j]):
            raise NonFiniteError(f"non-finite numeric derivative at coordinate {int(i)}")
        fwd, bwd = (fp - f0) / step, (f0 - fm) / step
        if abs(fwd - bwd) > 0.1 * max(1.0, abs(fwd), abs(bwd)):
            kinks.append(int(i))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale_floor)
    rel = np.abs(analytic - numeric) / denom
    return CheckReport(analytic=analytic, numeric=numeric, rel_error=rel,
                       tolerance=tolerance, kinks=kinks)
