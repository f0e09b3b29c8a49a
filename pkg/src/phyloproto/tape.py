"""Dense-tensor reverse-mode differentiation on numpy arrays.

Operations record themselves on the innermost active :class:`Tape`. Outside a
tape nothing is recorded, which keeps evaluation cheap::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    grads = tape.backward(loss)      # {w: 2 * w.data}

Binary operations accept equal shapes or a single-element operand; anything
else needs an explicit :func:`expand`. All arithmetic is float64.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS_LOG = 1e-12

DTYPE = np.float64


class TapeError(ValueError):
    pass


class ShapeMismatch(TapeError):
    pass


class NonFiniteValue(TapeError, FloatingPointError):
    pass


class NonScalarLoss(TapeError):
    pass


class Tensor:
    """An ndarray plus a flag saying whether gradients should reach it."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None):
        return max_(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- tape --------------------------------------------------------------------

_local = threading.local()


def _active() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Each entry is ``(kind, inputs, output, backward_fn)``; ``backward`` walks
    the entries in exact reverse order. A tape belongs to the thread that
    opened it.
    """

    def __init__(self):
        self.entries: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, kind, inputs, output, backward_fn) -> None:
        self.entries.append((kind, inputs, output, backward_fn))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of scalar ``loss`` for every leaf tensor with ``requires_grad``.

        Leaves that the loss does not depend on get no entry unless listed in
        ``wrt``, in which case they receive zeros.
        """
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss has shape {loss.shape}")
        produced = {id(e[2]) for e in self.entries}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for kind, inputs, out, fn in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for x, gx in zip(inputs, fn(g)):
                if gx is None or not x.requires_grad:
                    continue
                key = id(x)
                if key in grads:
                    grads[key] = grads[key] + gx
                else:
                    grads[key] = gx
                if key not in produced:
                    leaves[key] = x
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        result = {t: grads[k] for k, t in leaves.items() if k in grads}
        for t in wrt or ():
            result.setdefault(t, np.zeros_like(t.data))
        return result


@contextmanager
def no_record():
    """Evaluate without recording, even inside an open tape."""
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss, wrt)


def _finite(a: np.ndarray, kind: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise NonFiniteValue(f"{kind} produced a non-finite value")
    return a


def _make(kind: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    _finite(data, kind)
    tape = _active()
    needs = tape is not None and any(x.requires_grad for x in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(kind, inputs, out, backward_fn)
    return out


# -- elementwise ---------------------------------------------------------------


def _pair(a, b, kind: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeMismatch(f"{kind}: {a.shape} vs {b.shape}")
    return a, b


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # undo scalar broadcasting
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    return _make("add", a.data + b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_fit(g * b.data, a.shape), _fit(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    out = a.data / b.data
    return _make(
        "div",
        out,
        (a, b),
        lambda g: (_fit(g / b.data, a.shape), _fit(-g * out / b.data, b.shape)),
    )


def scalar_mul(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make("scalar_mul", x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def log(x, eps: float = 0.0) -> Tensor:
    """Natural log of ``x + eps``; the shifted argument must be positive."""
    x = as_tensor(x)
    arg = x.data + eps
    if np.any(arg <= 0):
        raise NonFiniteValue("log of a non-positive value")
    return _make("log", np.log(arg), (x,), lambda g: (g / arg,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise NonFiniteValue("sqrt of a negative value")
    out = np.sqrt(x.data)
    return _make("sqrt", out, (x,), lambda g: (0.5 * g / out,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def stop_gradient(x) -> Tensor:
    """Identity in the forward pass, a constant for differentiation."""
    x = as_tensor(x)
    return Tensor(x.data, requires_grad=False)


# -- reductions ----------------------------------------------------------------


def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(out), (x,), grad)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scalar_mul(sum_(x, axes, keepdims), 1.0 / n)


def max_(x, axis=None) -> Tensor:
    """Maximum over ``axis``; the gradient goes to the first maximal entry.

    "First" is the lowest row-major index within each reduced block.
    """
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)
    keep = [a for a in range(x.ndim) if a not in axes]
    perm = keep + list(axes)
    moved = np.transpose(x.data, perm)
    kept_shape = moved.shape[: len(keep)]
    flat = moved.reshape(kept_shape + (-1,))
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def grad(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], np.asarray(g)[..., None], axis=-1)
        return (np.transpose(gflat.reshape(moved.shape), np.argsort(perm)),)

    return _make("max", np.asarray(out), (x,), grad)


# -- shape ---------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def expand(x, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast to ``shape``; backward sums it back."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeMismatch(f"cannot expand {x.shape} to {shape}") from None
    lead = len(shape) - x.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(x.shape) if n == 1 and shape[lead + i] != 1
    )

    def grad(g):
        return (np.sum(g, axis=axes, keepdims=True).reshape(x.shape) if axes else g,)

    return _make("expand", out.copy(), (x,), grad)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as err:
        raise ShapeMismatch(str(err)) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make("concat", out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs], axis)


def narrow(x, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of the leading axis."""
    x = as_tensor(x)

    def grad(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _make("narrow", x.data[start:stop].copy(), (x,), grad)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (repeated indices accumulate gradient)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, idx, axis=axis)

    def grad(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _make("take", out, (x,), grad)


# -- linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands, or batched with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make("matmul", out, (a, b), grad)


def dot(a, b) -> Tensor:
    """Inner product of two same-shape tensors."""
    return sum_(mul(a, b))


# -- softmax family ------------------------------------------------------------


def softmax_channels(x) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _make("softmax", out, (x,), grad)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def grad(g):
        return (g - p * np.sum(g, axis=-1, keepdims=True),)

    return _make("log_softmax", out, (x,), grad)


# -- convolution ---------------------------------------------------------------


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (B, Ho, Wo, C, k, k) view -> (B, Ho, Wo, k, k, C)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return np.transpose(win, (0, 1, 2, 4, 5, 3))


def conv2d(x, kernels, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """Cross-correlation of ``x`` (H×W×Cin or B×H×W×Cin) with k×k×Cin×Cout kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernels {kernels.shape}")
    k, k2, cin, cout = kernels.shape
    if k != k2 or k % 2 == 0:
        raise ShapeMismatch("conv2d needs square kernels of odd size")
    if x.shape[3] != cin:
        raise ShapeMismatch(f"conv2d: {x.shape[3]} input channels, kernels expect {cin}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    B, H, W, _ = x.shape
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeMismatch("conv2d: kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    cols = np.ascontiguousarray(_windows(xp, k, stride)[:, :Ho, :Wo]).reshape(B * Ho * Wo, k * k * cin)
    kmat = kernels.data.reshape(k * k * cin, cout)
    out = (cols @ kmat).reshape(B, Ho, Wo, cout)
    inputs: tuple[Tensor, ...] = (x, kernels)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeMismatch(f"conv2d bias shape {bias.shape}, expected ({cout},)")
        out = out + bias.data
        inputs = inputs + (bias,)

    def grad(g):
        gf = g.reshape(B * Ho * Wo, cout)
        gk = (cols.T @ gf).reshape(kernels.shape)
        gcols = (gf @ kmat.T).reshape(B, Ho, Wo, k, k, cin)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, :, i, j]
        gx = gxp[:, padding : padding + H, padding : padding + W] if padding else gxp
        grads = (gx, gk)
        if bias is not None:
            grads = grads + (gf.sum(axis=0),)
        return grads

    out = _make("conv2d", out, inputs, grad)
    return reshape(out, out.shape[1:]) if squeeze else out


# -- optimizer -----------------------------------------------------------------


class AdamState:
    """First/second moments per parameter plus the shared step count."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float | dict[str, float] = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params[name].data``.

    Parameters missing from ``grads`` are treated as having zero gradient.
    ``lr`` may be a per-name mapping.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name}: {g.shape} vs {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        rate = lr[name] if isinstance(lr, dict) else lr
        p.data = p.data - rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return state
