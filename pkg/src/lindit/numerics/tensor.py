"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a row-major NumPy array (float32 or float64). Operations
defined here check shapes explicitly; there is no implicit broadcasting beyond
tensor-with-scalar. Use :func:`broadcast_to` when a broadcast is intended.

Gradients are recorded on the innermost active :class:`Tape`::

    with Tape() as tape:
        loss = mean(mul(y, y))
    tape.backward(loss)
    x.grad  # populated for leaves with requires_grad=True
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from lindit.errors import DimensionError, DomainError, NumericError, TapeError

ELEM_TYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
DEFAULT_EPS = 1e-6

_local = threading.local()


def _stack() -> list["Tape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


def resolve_dtype(elem_type) -> np.dtype:
    if isinstance(elem_type, str):
        try:
            return ELEM_TYPES[elem_type]
        except KeyError:
            raise DimensionError(f"unsupported elem_type {elem_type!r}") from None
    dt = np.dtype(elem_type)
    if dt not in ELEM_TYPES.values():
        raise DimensionError(f"unsupported dtype {dt}")
    return dt


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=resolve_dtype(dtype) if dtype is not None else None)
        if arr.dtype not in ELEM_TYPES.values():
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def elem_type(self) -> str:
        return "f32" if self.data.dtype == np.float32 else "f64"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        rg = " requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, {self.elem_type}{rg}{tag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, elem_type: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=elem_type)


@dataclass
class _Entry:
    name: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of executed operations for one backward pass."""

    def __init__(self):
        self.entries: list[_Entry] = []
        self.visited: list[str] = []
        self.used = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted; tapes must be exited in LIFO order")
        stack.pop()

    @property
    def op_names(self) -> list[str]:
        return [e.name for e in self.entries]

    def record(self, name, output, inputs, backward) -> None:
        if self.used:
            raise TapeError("tape already consumed by backward(); call reset() first")
        self.entries.append(_Entry(name, output, tuple(inputs), backward))

    def reset(self) -> None:
        self.entries.clear()
        self.visited.clear()
        self.used = False

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if self.used:
            raise TapeError("a tape supports a single backward pass")
        self.used = True
        if grad is None:
            if loss.size != 1:
                raise DimensionError(f"backward() without grad needs a scalar, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        produced = {id(e.output) for e in self.entries}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self.entries):
            self.visited.append(entry.name)
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            for inp, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise TapeError(
                        f"{entry.name} backward produced grad {gi.shape} for input {inp.shape}"
                    )
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is not None:
                g = g.astype(leaf.dtype, copy=False)
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def record(name: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out`` as a Tensor, logging ``backward`` when a tape is active.

    ``backward(g)`` receives the upstream gradient and returns one gradient
    array (or None) per input.
    """
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{name} produced non-finite values")
    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(name, result, inputs, backward)
    return result


# Kink probing for finite-difference checks: ReLU-style ops report their
# pre-activations here while a probe is active.


def note_kinks(pre_activation: np.ndarray) -> None:
    probe = getattr(_local, "kink_probe", None)
    if probe is not None:
        probe.append(np.array(pre_activation, dtype=np.float64).ravel())


class kink_probe:
    def __enter__(self) -> list[np.ndarray]:
        self._saved = getattr(_local, "kink_probe", None)
        _local.kink_probe = []
        return _local.kink_probe

    def __exit__(self, *exc) -> None:
        _local.kink_probe = self._saved


# ---------------------------------------------------------------------------
# shape helpers


def _same_dtype(op: str, *ts: Tensor) -> None:
    dts = {t.dtype for t in ts}
    if len(dts) > 1:
        raise DimensionError(f"{op}: mixed elem types {[t.elem_type for t in ts]}")


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    _same_dtype(op, a, b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` (shared right operand) or batched with equal batch dims."""
    _same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if shared:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return record("matmul", A @ B, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    A, B = a.data, b.data
    return record(
        "mul", A * B, (a, b), lambda g: (_reduce_to(g * B, a.shape), _reduce_to(g * A, b.shape))
    )


def divide(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("divide", a, b)
    A, B = a.data, b.data
    out = A / B
    return record(
        "divide",
        out,
        (a, b),
        lambda g: (_reduce_to(g / B, a.shape), _reduce_to(-g * out / B, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    X = x.data
    note_kinks(X)
    return record("relu", np.maximum(X, 0), (x,), lambda g: (g * (X > 0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: Tensor) -> Tensor:
    X = x.data
    s = _sigmoid(X)
    return record("silu", X * s, (x,), lambda g: (g * (s * (1 + X * (1 - s))),))


_ELEMENTWISE = {"relu": relu, "silu": silu, "add": add, "sub": sub, "mul": mul, "scale": scale}


def elementwise(op: str, *args):
    """Dispatch by name: ``elementwise("relu", x)``, ``elementwise("scale", x, 0.5)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise DimensionError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions and layout


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return record(
        "mean", np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return record("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return record("transpose", out, (x,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast with NumPy rules; backward sums over the expanded axes."""
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot expand {src} to {shape}") from None

    def backward(g):
        lead = g.ndim - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=keep, keepdims=True) if keep else g,)

    return record("broadcast_to", out, (x,), backward)


def narrow(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[..., start:stop]`` along the last axis."""
    d = x.shape[-1]
    if not 0 <= start < stop <= d:
        raise DimensionError(f"narrow: [{start}:{stop}] out of range for last dim {d}")
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., start:stop] = g
        return (full,)

    return record("narrow", np.ascontiguousarray(x.data[..., start:stop]), (x,), backward)


def chunk(x: Tensor, parts: int) -> list[Tensor]:
    d = x.shape[-1]
    if d % parts:
        raise DimensionError(f"chunk: last dim {d} not divisible into {parts} parts")
    w = d // parts
    return [narrow(x, i * w, (i + 1) * w) for i in range(parts)]


# ---------------------------------------------------------------------------
# normalization and convolution


def rmsnorm(x: Tensor, gamma: Tensor | None = None, eps: float = DEFAULT_EPS) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gamma`` over the last axis."""
    if eps < 0:
        raise DomainError(f"rmsnorm: eps must be non-negative, got {eps}")
    d = x.shape[-1]
    if gamma is not None:
        _same_dtype("rmsnorm", x, gamma)
        if gamma.shape != (d,):
            raise DimensionError(f"rmsnorm: gamma shape {gamma.shape} does not match last dim of {x.shape}")
    X = x.data
    ms = np.mean(X * X, axis=-1, keepdims=True) + x.dtype.type(eps)
    if np.any(ms <= 0):
        raise NumericError("rmsnorm: zero-energy row with eps=0")
    r = 1.0 / np.sqrt(ms)
    xhat = X * r
    G = None if gamma is None else gamma.data
    out = xhat if G is None else xhat * G

    def backward(g):
        u = g if G is None else g * G
        gx = r * u - xhat * (r * np.mean(xhat * u, axis=-1, keepdims=True))
        gg = None if G is None else (g * xhat).reshape(-1, d).sum(axis=0)
        return (gx, gg) if G is not None else (gx,)

    inputs = (x,) if gamma is None else (x, gamma)
    return record("rmsnorm", out, inputs, backward)


def depthwise_conv3x3(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel 3x3 cross-correlation with zero padding 1.

    ``x`` is ``[C, H, W]`` or ``[B, C, H, W]``; ``w`` is ``[C, 3, 3]``.
    """
    _same_dtype("depthwise_conv3x3", x, w)
    if x.ndim not in (3, 4):
        raise DimensionError(f"depthwise_conv3x3: expected [C,H,W] or [B,C,H,W], got {x.shape}")
    C, H, W = x.shape[-3:]
    if w.shape != (C, 3, 3):
        raise DimensionError(f"depthwise_conv3x3: kernel shape {w.shape} does not match {C} channels")
    X, K = x.data, w.data
    pad = [(0, 0)] * (X.ndim - 2) + [(1, 1), (1, 1)]
    Xp = np.pad(X, pad)
    out = np.zeros_like(X)
    for a in range(3):
        for b in range(3):
            out += K[:, a, b, None, None] * Xp[..., a : a + H, b : b + W]

    def backward(g):
        gxp = np.zeros_like(Xp)
        gw = np.empty_like(K)
        lead = tuple(range(g.ndim - 3))
        for a in range(3):
            for b in range(3):
                gxp[..., a : a + H, b : b + W] += K[:, a, b, None, None] * g
                prod = g * Xp[..., a : a + H, b : b + W]
                gw[:, a, b] = prod.sum(axis=lead + (-2, -1))
        return gxp[..., 1:-1, 1:-1], gw

    return record("depthwise_conv3x3", out, (x, w), backward)
