"""Dense tensors with define-by-run reverse-mode differentiation.

Arrays are plain numpy buffers wrapped in :class:`Tensor`.  Operations run
eagerly; when a :class:`GradTape` is active on the current thread and any
input requires a gradient, the operation is appended to that tape together
with a closure computing the vector-Jacobian product.  ``tape.backward``
replays the records in exact reverse order.

Every operation checks its output for NaN/Inf and raises
:class:`NonFiniteError` instead of letting the value propagate.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "Tensor", "Param", "GradTape", "NonFiniteError", "GradCheckReport",
    "as_tensor", "matmul", "softmax", "layer_norm", "gelu", "relu", "exp", "log",
    "tanh", "sigmoid", "sqrt", "take", "concat", "stack", "broadcast_to",
    "grad_check", "global_norm",
]

LN_EPS = 1e-5
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic
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

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # reductions and shape ops
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


class Param(Tensor):
    """A named trainable tensor.  ``grad`` has the shape of ``data``."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, copy=True), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


class GradTape:
    """Records differentiable operations executed on this thread.

    Usage::

        with GradTape() as tape:
            loss = f()
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.adjoints: dict[int, np.ndarray] = {}
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> GradTape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], fn: Callable) -> None:
        self.records.append((out, parents, fn))
        for p in parents:
            if isinstance(p, Param):
                self._leaves[id(p)] = p

    def backward(self, loss: Tensor, seed: np.ndarray | None = None,
                 populate: bool = True) -> dict[str, np.ndarray]:
        """Propagate adjoints from ``loss`` back through the recorded ops.

        Returns a name -> gradient map for every Param reached.  With
        ``populate`` the gradients are also accumulated into ``Param.grad``;
        pass ``populate=False`` when several tapes share parameters across
        threads and the caller reduces the maps itself.
        """
        if seed is None:
            if loss.data.size != 1:
                raise ValueError("backward needs a scalar loss or an explicit seed")
            seed = np.ones_like(loss.data)
        adj = self.adjoints
        adj.clear()
        adj[id(loss)] = np.asarray(seed, dtype=loss.dtype)
        for out, parents, fn in reversed(self.records):
            g = adj.pop(id(out), None)
            if g is None:
                continue
            grads = fn(g)
            for p, gp in zip(parents, grads):
                if gp is None or not p.requires_grad:
                    continue
                if gp.dtype != p.data.dtype:
                    gp = gp.astype(p.data.dtype)
                key = id(p)
                prev = adj.get(key)
                adj[key] = gp if prev is None else prev + gp
        result = {}
        for key, p in self._leaves.items():
            g = adj.get(key)
            if g is None:
                continue
            result[p.name] = g
            if populate:
                p.grad = p.grad + g
        return result

    def grad(self, t: Tensor) -> np.ndarray:
        g = self.adjoints.get(id(t))
        return np.zeros_like(t.data) if g is None else g


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: tuple, fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        tape._record(out, parents, fn)
        return out
    return Tensor(data)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def back(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _make(out, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb
    return _make(out, (a, b), back, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        # 2-D right operand: one GEMM over all leading rows
        k, n = b.shape
        a2 = np.ascontiguousarray(a.data).reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = a.data @ b.data

    def back(g):
        ga = gb = None
        if flat:
            g2 = np.ascontiguousarray(g).reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a2.T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb
    return _make(out, (a, b), back, "matmul")


# reductions and shape manipulation

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)
    return _make(out, (a,), back, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _make(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None
               for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    basic = _is_basic(idx)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return _make(np.array(out), (a,), back, "getitem")


def take(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather ``a`` along ``axis`` with an integer index array."""
    indices = np.asarray(indices)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def back(g):
        full = np.zeros_like(a.data)
        # gathered dims to the front so np.add.at can scatter along axis 0
        g = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        full_m = np.moveaxis(full, axis, 0)
        np.add.at(full_m, indices, g)
        return (full,)
    return _make(out, (a,), back, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _make(out, tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def back(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))
    return _make(out, tensors, back, "stack")


# elementwise nonlinearities

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (a.data > 0),), "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = ndtr(x).astype(x.dtype, copy=False)
    out = x * cdf

    def back(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)
    return _make(out, (a,), back, "gelu")


def softmax(a: Tensor, axis=-1, mask: np.ndarray | None = None,
            empty: str = "error") -> Tensor:
    """Max-shifted softmax over one axis or a tuple of axes.

    ``mask`` is a boolean array broadcastable to ``a``; False cells are treated
    as -inf logits.  A slice with every cell masked raises unless
    ``empty="zero"``, in which case that slice is all zeros.
    """
    axes = _norm_axes(axis, a.ndim)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axes, keepdims=True)
    dead = ~np.isfinite(m)
    if dead.any():
        if empty != "zero":
            raise ValueError("softmax over a fully masked slice")
        m = np.where(dead, 0.0, m)
    e = np.exp(x - m)
    s = e.sum(axis=axes, keepdims=True)
    out = e / np.where(s == 0, 1.0, s)

    def back(g):
        return (out * (g - (g * out).sum(axis=axes, keepdims=True)),)
    return _make(out, (a,), back, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs a last axis of size >= 2")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def back(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb
    return _make(out, (x, gain, bias), back, "layer_norm")


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


@dataclass
class GradCheckReport:
    per_param: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    checked: int = 0

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.per_param.items() if v >= self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(f: Callable[[], Tensor], params: Sequence[Param], eps: float = 1e-5,
               tol: float = 1e-4, max_entries: int | None = None, seed: int = 0,
               floor: float = 1e-5, retry_eps: Sequence[float] = ()) -> GradCheckReport:
    """Compare tape gradients with central finite differences.

    Relative error per entry is ``|a - fd| / max(|a|, |fd|, floor)``; the
    report keeps the maximum per parameter.  With ``max_entries`` only that
    many randomly chosen entries of each parameter are perturbed.  An entry
    whose error reaches ``tol`` is re-measured at each step in ``retry_eps``
    and keeps the smallest error, which separates a ReLU kink inside the
    central-difference interval from a wrong gradient.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("grad_check requires 64-bit parameters")
    with GradTape() as tape:
        loss = f()
    analytic = tape.backward(loss, populate=False)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for p in params:
        ga = analytic.get(p.name)
        if ga is None:
            ga = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idx:
            a = float(ga.reshape(-1)[i])
            err = np.inf
            for h in (eps, *retry_eps):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                fd = (fp - fm) / (2 * h)
                err = min(err, abs(a - fd) / max(abs(a), abs(fd), floor))
                if err < tol:
                    break
            worst = max(worst, err)
        report.per_param[p.name] = worst
        report.checked += len(idx)
    return report
