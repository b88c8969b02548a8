"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure mapping the output gradient to
input gradients. ``Tensor.backward`` walks the graph once in reverse
topological order and sums gradients over fan-out, so a tensor consumed
twice (e.g. a tied embedding matrix) receives both contributions.

Storage and arithmetic default to float32. Passing float64 data with
``dtype=np.float64`` runs the same graph in double precision, which the
gradient checks use as a tighter mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


def _as_array(data, dtype) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=DEFAULT_DTYPE):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, out: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{op} produced non-finite values")
        t = cls.__new__(cls)
        t.data = out
        t.grad = None
        t.op = op
        t.requires_grad = any(p.requires_grad for p in parents)
        if t.requires_grad:
            t._parents = tuple(parents)
            t._backward = backward
        else:
            t._parents = ()
            t._backward = None
        return t

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=None)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff -----------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf with requires_grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar root")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        if self.ndim != 2:
            raise DimensionError("T is defined for 2-D tensors only")
        return transpose(self, (1, 0))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def grad(root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``root`` with respect to ``wrt``, leaving ``.grad`` untouched."""
    saved = [(t.grad, t.requires_grad) for t in wrt]
    for t in wrt:
        t.grad = None
    try:
        root.backward()
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]
    finally:
        for t, (g, _) in zip(wrt, saved):
            t.grad = g


# -- broadcasting helpers -------------------------------------------------------


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype)


def _check_leading(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise DimensionError(f"{op}: shapes {a} and {b} differ beyond leading batch dimensions")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _wrap(a, b) if not isinstance(a, Tensor) else a
    b = _wrap(b, a)
    _check_leading(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a = _wrap(a, b) if not isinstance(a, Tensor) else a
    b = _wrap(b, a)
    _check_leading(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), back, "sub")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _wrap(a, b) if not isinstance(a, Tensor) else a
    b = _wrap(b, a)
    _check_leading(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a = _wrap(a, b) if not isinstance(a, Tensor) else a
    b = _wrap(b, a)
    _check_leading(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._from_op(out, (a, b), back, "div")


def add_constant(x: Tensor, const: np.ndarray) -> Tensor:
    """``x + const`` where ``const`` is not differentiated and may broadcast freely.

    Used for additive attention masks, whose (batch, 1, 1, seq) layout is not a
    leading-dimension broadcast.
    """
    const = np.asarray(const, dtype=x.dtype)
    out = x.data + const
    if out.shape != x.shape:
        raise DimensionError(f"add_constant: constant {const.shape} would reshape {x.shape}")
    return Tensor._from_op(out, (x,), lambda g: (g,), "add_constant")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor, approximate: str = "tanh") -> Tensor:
    """Gaussian error linear unit.

    ``approximate="tanh"`` (default) uses
    ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``, as in the original
    BERT code; ``approximate="none"`` uses the exact ``x * Phi(x)`` form.
    The two differ by up to about 2e-4 near |x| = 1.
    """
    xd = x.data
    dt = xd.dtype
    if approximate == "tanh":
        c = dt.type(_GELU_C)
        k = dt.type(0.044715)
        inner = c * (xd + k * xd * xd * xd)
        t = np.tanh(inner)
        out = dt.type(0.5) * xd * (1 + t)

        def back(g):
            dinner = c * (1 + 3 * k * xd * xd)
            return (g * (dt.type(0.5) * (1 + t) + dt.type(0.5) * xd * (1 - t * t) * dinner),)

    elif approximate == "none":
        erf = np.frompyfunc(math.erf, 1, 1)
        cdf = (0.5 * (1.0 + erf(xd / math.sqrt(2.0)).astype(np.float64))).astype(dt)
        out = xd * cdf

        def back(g):
            pdf = (np.exp(-0.5 * xd.astype(np.float64) ** 2) / math.sqrt(2 * math.pi)).astype(dt)
            return (g * (cdf + xd * pdf),)

    else:
        raise ValueError(f"unknown gelu approximation {approximate!r}")
    return Tensor._from_op(out, (x,), back, "gelu")


# -- shape ops --------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def index(x: Tensor, idx) -> Tensor:
    src_shape, dt = x.shape, x.dtype

    def back(g):
        z = np.zeros(src_shape, dtype=dt)
        np.add.at(z, idx, g)
        return (z,)

    return Tensor._from_op(np.array(x.data[idx]), (x,), back, "index")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; repeated ids sum their gradients."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")
    wshape, dt = weight.shape, weight.dtype

    def back(g):
        z = np.zeros(wshape, dtype=dt)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, wshape[-1]))
        return (z,)

    return Tensor._from_op(weight.data[ids], (weight,), back, "embedding")


# -- reductions ---------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    src = x.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    out = np.asarray(x.data.sum(axis=axes, keepdims=keepdims), dtype=x.dtype)
    return Tensor._from_op(out, (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axis, keepdims) * (1.0 / n)


# -- matrix product ---------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a of shape (..., m, k) and b of shape (k, n) or (..., k, n).

    When b is 2-D it is shared across a's leading dimensions; otherwise the
    leading dimensions must match exactly.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), back, "matmul")


# -- normalisation / probability ------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(out, (x, gain, bias), back, "layer_norm")


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` over non-ignored rows.

    ``logits`` is (..., vocab); ``targets`` has the leading shape. Raises
    ValueError when every target is ignored.
    """
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise DimensionError(f"cross_entropy: {t.shape[0]} targets for {flat.shape[0]} rows")
    rows = np.nonzero(t != ignore_index)[0]
    if rows.size == 0:
        raise ValueError("cross_entropy: no target positions selected")
    sel = flat[rows]
    shifted = sel - sel.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    n = rows.size
    out = np.asarray(-logp[np.arange(n), t[rows]].sum() / n, dtype=logits.dtype)
    src_shape, dt = logits.shape, logits.dtype

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), t[rows]] -= 1
        z = np.zeros_like(flat, dtype=dt)
        z[rows] = p * (g / n)
        return (z.reshape(src_shape),)

    return Tensor._from_op(out, (logits,), back, "cross_entropy")


# -- optimiser ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float | None = None) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``.

    ``lr`` overrides ``state.lr`` for this step (used by warmup schedules).
    A ``None`` gradient is treated as zero.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise DimensionError("optimizer state does not match parameter list")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        dt = p.dtype.type
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        if lr == 0:
            continue
        update = dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        p.data -= update.astype(p.dtype, copy=False)
    return state


class Adam:
    """Thin stateful wrapper over :func:`adam_step` reading ``p.grad``."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("duplicate tensors in parameter list")
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr=lr)


def warmup_linear(step: int, total_steps: int, peak_lr: float, warmup_fraction: float = 0.1) -> float:
    """Learning rate for ``step`` (0-based): linear warmup to ``peak_lr``, then linear decay to 0."""
    warm = max(1, int(round(total_steps * warmup_fraction))) if warmup_fraction > 0 else 0
    if warm and step < warm:
        return peak_lr * (step + 1) / warm
    rest = max(1, total_steps - warm)
    return peak_lr * max(0.0, (total_steps - step) / rest)
