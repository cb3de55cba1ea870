"""Dense rank-2 reverse-mode automatic differentiation.

Every value is a :class:`Tensor` wrapping a float64 matrix.  Operations are
recorded on the innermost active :class:`Tape`; outside a tape they compute
values only, which is how the teacher branch and evaluation run.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(w * w)
    ...     tape.backward(loss)
    >>> w.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

BCE_EPS = 1e-7


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An engine precondition was violated (e.g. backward on a non-scalar)."""


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")
    # make ndarray <op> Tensor defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"only rank-2 tensors are supported, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data.tolist()}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

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
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    return arr


class Tape:
    """Ordered record of executed operations.

    Entries are appended in execution order, so the list is already a
    topological order of the computation; :meth:`backward` walks it once in
    reverse.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

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

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t._tape is self

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        out._tape = self
        self.entries.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for out, inputs, fn in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None:
                    continue
                if inp._tape is self:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                elif inp.requires_grad:
                    inp.grad += gi


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad ancestor of ``loss``."""
    if loss._tape is None:
        raise ContractError("loss was not produced through a tape")
    loss._tape.backward(loss)


def _emit(arr: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    tape = _active_tape()
    if tape is not None and any(isinstance(t, Tensor) and tape.tracks(t) for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# --------------------------------------------------------------------------
# core algebra
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return g @ B.T, A.T @ g

    return _emit(A @ B, (a, b), back)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _emit(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    A, B = a.data, b.data

    def back(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _emit(A * B, (a, b), back)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _emit(x.data.T.copy(), (x,), lambda g: (g.T,))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    n = x.data.size
    if n == 0:
        raise DimensionError("mean of an empty tensor")
    return _emit(np.array([[x.data.mean()]]), (x,), lambda g: (np.full(shape, g[0, 0] / n),))


def take_rows(x, index) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(x.data[idx], (x,), back)


def take_cols(x, index) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full.T, idx, g.T)
        return (full,)

    return _emit(x.data[:, idx], (x,), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) > 1:
        raise DimensionError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=0), tuple(parts), back)


# --------------------------------------------------------------------------
# normalisation and activations
# --------------------------------------------------------------------------

_AXES = {"rows": 0, "cols": 1}


def _softmax(arr: np.ndarray, axis: int) -> np.ndarray:
    z = arr - arr.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_axis(x, axis: str) -> Tensor:
    """Softmax normalised along ``axis``.

    ``axis="cols"`` makes every row sum to one (softmax across columns);
    ``axis="rows"`` makes every column sum to one.
    """
    x = as_tensor(x)
    if axis not in _AXES:
        raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")
    ax = _AXES[axis]
    s = _softmax(x.data, ax)

    def back(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _emit(s, (x,), back)


def segment_softmax_rows(x, offsets: Sequence[int]) -> Tensor:
    """Column-wise softmax over row blocks ``[offsets[i], offsets[i+1])``."""
    x = as_tensor(x)
    off = list(offsets)
    s = np.empty_like(x.data)
    for lo, hi in zip(off[:-1], off[1:]):
        s[lo:hi] = _softmax(x.data[lo:hi], 0)

    def back(g):
        gs = g * s
        out = np.empty_like(g)
        for lo, hi in zip(off[:-1], off[1:]):
            out[lo:hi] = gs[lo:hi] - s[lo:hi] * gs[lo:hi].sum(axis=0, keepdims=True)
        return (out,)

    return _emit(s, (x,), back)


def segment_sum_rows(x, offsets: Sequence[int]) -> Tensor:
    """Sum each row block; returns one row per segment."""
    x = as_tensor(x)
    off = np.asarray(offsets, dtype=np.intp)
    if np.any(np.diff(off) <= 0):
        raise DimensionError("segment_sum_rows: every segment needs at least one row")
    seg = np.add.reduceat(x.data, off[:-1], axis=0)
    counts = np.diff(off)

    def back(g):
        return (np.repeat(g, counts, axis=0),)

    return _emit(seg, (x,), back)


def activation(x, kind: str = "leaky_relu", slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    X = x.data
    if kind == "leaky_relu":
        d = np.where(X > 0, 1.0, slope)
        return _emit(X * d, (x,), lambda g: (g * d,))
    if kind == "relu":
        d = (X > 0).astype(np.float64)
        return _emit(X * d, (x,), lambda g: (g * d,))
    if kind == "sigmoid":
        s = 0.5 * (1.0 + np.tanh(0.5 * X))
        return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))
    raise ValueError(f"unknown activation {kind!r}")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    return activation(x, "leaky_relu", slope)


def relu(x) -> Tensor:
    return activation(x, "relu")


def sigmoid(x) -> Tensor:
    return activation(x, "sigmoid")


def clamp_unit(x) -> Tensor:
    """Clamp into [0, 1] for values that are probabilities up to rounding.

    The gradient passes through unchanged: the clamp only absorbs the last
    ulp of a sum of products, it is not part of the model.
    """
    x = as_tensor(x)
    return _emit(np.clip(x.data, 0.0, 1.0), (x,), lambda g: (g,))


# --------------------------------------------------------------------------
# losses; targets are constants and receive no gradient
# --------------------------------------------------------------------------


def _same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def smooth_l1(pred, target) -> Tensor:
    pred = as_tensor(pred)
    T = _const(target)
    _same_shape("smooth_l1", pred.data, T)
    d = pred.data - T
    n = d.size
    ad = np.abs(d)
    small = ad < 1.0
    val = np.where(small, 0.5 * d * d, ad - 0.5).mean()
    dval = np.where(small, d, np.sign(d)) / n

    return _emit(np.array([[val]]), (pred,), lambda g: (g[0, 0] * dval,))


def mse(pred, target) -> Tensor:
    pred = as_tensor(pred)
    T = _const(target)
    _same_shape("mse", pred.data, T)
    d = pred.data - T
    n = d.size
    return _emit(np.array([[np.mean(d * d)]]), (pred,), lambda g: (g[0, 0] * 2.0 * d / n,))


def bce(prob, label, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    prob = as_tensor(prob)
    Y = _const(label)
    _same_shape("bce", prob.data, Y)
    raw = prob.data
    p = np.clip(raw, eps, 1.0 - eps)
    inside = (raw >= eps) & (raw <= 1.0 - eps)
    n = p.size
    val = -np.mean(Y * np.log(p) + (1.0 - Y) * np.log(1.0 - p))
    dval = np.where(inside, (-Y / p + (1.0 - Y) / (1.0 - p)) / n, 0.0)
    return _emit(np.array([[val]]), (prob,), lambda g: (g[0, 0] * dval,))


def cross_entropy(logits, class_index) -> Tensor:
    """Mean over rows of -log softmax(logits)[row, class_index[row]]."""
    logits = as_tensor(logits)
    idx = np.asarray(class_index, dtype=np.intp).reshape(-1)
    r, c = logits.shape
    if idx.shape[0] != r:
        raise DimensionError(f"cross_entropy: {r} rows but {idx.shape[0]} targets")
    if r == 0:
        raise DimensionError("cross_entropy of an empty batch")
    if np.any((idx < 0) | (idx >= c)):
        raise DimensionError(f"cross_entropy: class index out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.arange(r)
    val = -logp[rows, idx].mean()
    dval = np.exp(logp)
    dval[rows, idx] -= 1.0
    dval /= r
    return _emit(np.array([[val]]), (logits,), lambda g: (g[0, 0] * dval,))


# --------------------------------------------------------------------------
# finite-difference verification
# --------------------------------------------------------------------------


def _analytic(f: Callable[[], Tensor], params: Iterable[Tensor]) -> list[np.ndarray]:
    params = list(params)
    saved = [p.grad for p in params]
    for p in params:
        p.grad = np.zeros_like(p.data)
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    out = [p.grad.copy() for p in params]
    for p, s in zip(params, saved):
        p.grad = s
    return out


def _numeric(f: Callable[[], Tensor], x: Tensor, h: float) -> np.ndarray:
    # The perturbed parameter is promoted to long double so the perturbation
    # propagates at extended precision (numpy upcasts mixed operands); the
    # untouched float64 parts of f are bitwise equal on both sides and cancel.
    # Without this the f64 rounding of f (about 1 ulp) swamps entries near
    # the 1e-8 denominator floor.
    base = x.data
    work = base.astype(np.longdouble)
    flat = work.reshape(-1)
    num = np.zeros(flat.size, dtype=np.longdouble)
    step = np.longdouble(h)
    x.data = work
    try:
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f().data[0, 0]
            flat[i] = orig - step
            fm = f().data[0, 0]
            flat[i] = orig
            num[i] = (fp - fm) / (2 * step)
    finally:
        x.data = base
    return num.astype(np.float64).reshape(base.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _check_step(h: float) -> None:
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Max elementwise relative error between backward and central differences.

    ``x`` must require grad; ``f(x)`` must return a 1x1 tensor.  The data of
    ``x`` is perturbed in place and restored.
    """
    _check_step(h)
    if not x.requires_grad:
        raise ContractError("grad_check needs x.requires_grad")
    (ana,) = _analytic(lambda: f(x), [x])
    num = _numeric(lambda: f(x), x, h)
    return relative_error(ana, num)


def grad_check_many(f: Callable[[], Tensor], params: dict[str, Tensor],
                    h: float = 1e-6) -> dict[str, float]:
    """Like :func:`grad_check` for a closure over several parameters."""
    _check_step(h)
    names = list(params)
    ana = _analytic(f, [params[n] for n in names])
    return {n: relative_error(a, _numeric(f, params[n], h)) for n, a in zip(names, ana)}
