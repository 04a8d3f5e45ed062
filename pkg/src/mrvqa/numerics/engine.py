"""Dense tensors with reverse-mode automatic differentiation.

The primitive set is exactly what the video-quality model needs: matmul,
elementwise add/mul, GELU, softmax over the last axis, layer normalization,
shape manipulation (reshape/transpose/concatenate/basic slicing), mean and
sum. Every primitive validates shapes, checks its output for NaN/Inf, and,
when a :class:`Tape` is active on the current thread, records a closure that
computes input gradients from the output gradient. A single backward pass
walks the tape in exact reverse order and accumulates gradients additively.

Two precision modes exist: float32 (training default) and float64
(verification). The mode is a process-global setting; mixing dtypes inside
one graph is an error.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

LAYERNORM_EPS = 1e-6

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NumericsError(Exception):
    """Base error for tensor-engine failures."""


class ShapeError(NumericsError):
    """Operands do not conform (shapes or dtypes)."""


class NonFiniteError(NumericsError):
    """A primitive produced NaN or Inf."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32


def set_default_dtype(dtype: str | type) -> None:
    """Set the session precision: 'float32' or 'float64'."""
    global _default_dtype
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"unknown dtype {dtype!r}, expected float32 or float64")
        _default_dtype = _DTYPES[dtype]
    elif dtype in (np.float32, np.float64):
        _default_dtype = dtype
    else:
        raise ValueError(f"unsupported dtype {dtype!r}")


def default_dtype() -> type:
    return _default_dtype


@contextmanager
def precision(dtype: str | type):
    """Temporarily switch the session precision (verification runs use float64)."""
    global _default_dtype
    saved = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = saved


class Tensor:
    """Row-major dense array of reals; shape is immutable after creation.

    Construction casts to the session dtype unless ``dtype`` is given.
    ``requires_grad`` marks leaf parameters; it propagates through ops only
    while a tape is active.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        if arr.dtype not in (np.float32, np.float64):
            raise ShapeError(f"tensors hold float32/float64 data, got {arr.dtype}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite values in tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal: wrap an op result without re-casting.
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars and arrays are coerced to constant tensors.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops for one backward pass.

    A tape is single-owner: record and run backward from one thread at a
    time. Distinct tapes on distinct threads are independent.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        top = _tape_stack().pop()
        assert top is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor, params: Iterable[Tensor]) -> dict[int, Tensor]:
        """Single reverse sweep from a scalar loss.

        Returns ``{id(param): gradient}`` with gradient shapes equal to the
        parameter shapes; parameters with no path to the loss get zeros.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._records:
            raise NumericsError("backward on an empty tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        with _quiet():
            for rec in reversed(self._records):
                g_out = grads.pop(id(rec.output), None)
                if g_out is None:
                    continue
                for tin, g_in in zip(rec.inputs, rec.backward(g_out)):
                    if g_in is None:
                        continue
                    acc = grads.get(id(tin))
                    grads[id(tin)] = g_in if acc is None else acc + g_in
        out: dict[int, Tensor] = {}
        for p in params:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            out[id(p)] = Tensor._wrap(np.ascontiguousarray(g), False)
        return out


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _check_same_dtype(name: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{name}: mixed dtypes {sorted(map(str, dtypes))} in one graph")


def _finish(name: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite values in output of {name}")
    tape = active_tape()
    rg = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, rg)
    if rg:
        tape._records.append(_Record(result, inputs, backward))
    return result


class _quiet(np.errstate):
    # Overflow/invalid intermediates surface as NonFiniteError, not warnings.
    def __init__(self):
        super().__init__(over="ignore", invalid="ignore", divide="ignore")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Sum gradient over axes that were broadcast in the forward op.
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_same_dtype("add", a, b)
    try:
        with _quiet():
            out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _finish("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_same_dtype("sub", a, b)
    try:
        with _quiet():
            out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _finish("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_same_dtype("mul", a, b)
    try:
        with _quiet():
            out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc
    a_data, b_data = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * b_data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a_data, b.shape) if b.requires_grad else None,
        )

    return _finish("mul", out, (a, b), bw)


def matmul(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, a)
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        with _quiet():
            out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from exc
    a_data, b_data = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b_data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a_data, -1, -2), g), b.shape)
        return ga, gb

    return _finish("matmul", out, (a, b), bw)


def gelu(x) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    x = _coerce(x)
    x_data = x.data
    with _quiet():
        phi_x = 0.5 * (1.0 + erf(x_data * _INV_SQRT2))
        out = x_data * phi_x

    def bw(g):
        if not x.requires_grad:
            return (None,)
        density = np.exp(-0.5 * x_data * x_data) * _INV_SQRT_2PI
        return (g * (phi_x + x_data * density),)

    return _finish("gelu", out, (x,), bw)


def softmax(x) -> Tensor:
    """Softmax over the last axis; row max is subtracted before exp."""
    x = _coerce(x)
    if x.ndim < 1:
        raise ShapeError("softmax needs at least one axis")
    with _quiet():
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if not x.requires_grad:
            return (None,)
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _finish("softmax", out, (x,), bw)


def layernorm(x, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part)."""
    x = _coerce(x)
    if x.ndim < 1:
        raise ShapeError("layernorm needs at least one axis")
    with _quiet():
        mu = x.data.mean(axis=-1, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        out = centered * inv

    def bw(g):
        if not x.requires_grad:
            return (None,)
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - g_mean - out * gy_mean),)

    return _finish("layernorm", out, (x,), bw)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _coerce(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    in_shape = x.shape

    def bw(g):
        return (g.reshape(in_shape) if x.requires_grad else None,)

    return _finish("reshape", np.ascontiguousarray(out), (x,), bw)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = _coerce(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for ndim {x.ndim}")
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse) if x.requires_grad else None,)

    return _finish("transpose", np.ascontiguousarray(out), (x,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    _check_same_dtype("concat", *ts)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shapes {[t.shape for t in ts]} on axis {axis}") from exc
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes[:-1])

    def bw(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for t, p in zip(ts, pieces))

    return _finish("concat", out, tuple(ts), bw)


def index(x, key) -> Tensor:
    """Basic (non-fancy) indexing: ints, slices, tuples thereof."""
    x = _coerce(x)
    out = x.data[key]
    if isinstance(out, np.ndarray) and out.base is not None:
        out = out.copy()
    in_shape = x.shape
    in_dtype = x.data.dtype

    def bw(g):
        if not x.requires_grad:
            return (None,)
        full = np.zeros(in_shape, dtype=in_dtype)
        full[key] = g
        return (full,)

    return _finish("index", np.asarray(out), (x,), bw)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    with _quiet():
        out = x.data.sum(axis=axis, keepdims=keepdims)
    in_shape = x.shape

    def bw(g):
        if not x.requires_grad:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g.reshape(()), in_shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, in_shape).copy(),)

    return _finish("sum", np.asarray(out), (x,), bw)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    with _quiet():
        out = x.data.mean(axis=axis, keepdims=keepdims)
    in_shape = x.shape
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def bw(g):
        if not x.requires_grad:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g.reshape(()) / count, in_shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp / count, in_shape).copy(),)

    return _finish("mean", np.asarray(out), (x,), bw)


_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "gelu": gelu,
    "softmax": softmax,
    "layernorm": layernorm,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "index": index,
    "sum": tsum,
    "mean": tmean,
}


def forward_op(name: str, inputs: Sequence, **attrs) -> Tensor:
    """Dispatch a primitive by name. Unary/binary ops take inputs positionally."""
    fn = _OPS.get(name)
    if fn is None:
        raise NumericsError(f"unsupported op {name!r}; known: {sorted(_OPS)}")
    if name == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


def supported_ops() -> tuple[str, ...]:
    return tuple(sorted(_OPS))
