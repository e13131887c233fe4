"""Minimal reverse-mode autodiff over numpy arrays.

Only the operators the conditional CNN, the attacks and the losses need are
provided.  Every operator records a node on the implicit graph; ``backward``
linearises that graph into a :class:`Tape` (topological order) and walks it
in reverse, visiting each node exactly once.

Precision is 32-bit by default; :func:`set_precision` / :func:`precision`
switch new tensors to 64-bit for gradient verification.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "DimensionError", "set_precision", "get_dtype", "precision",
    "add", "sub", "mul", "neg", "matmul", "linear", "reshape", "getitem", "concat",
    "sum", "mean", "conv2d", "leaky_relu", "softmax_xent", "batch_norm",
    "backward", "grad", "gradcheck", "no_grad",
]

_DTYPE = np.float32
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def set_precision(bits: int) -> None:
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the engine precision."""
    old = _DTYPE
    set_precision(bits)
    try:
        yield
    finally:
        globals()["_DTYPE"] = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (outputs never require grad)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


@dataclass
class _Node:
    op: str
    parents: tuple
    backward: Callable  # (grad_out, needs) -> tuple of arrays or None


class Tensor:
    """n-dimensional array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr is data:
            arr = arr.copy()
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: tuple, bw: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._node = None
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._node = _Node(op, parents, bw)
        return out

    # ---- properties -------------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def is_valid(self) -> bool:
        """False when the data holds NaN or Inf."""
        return bool(np.isfinite(self.data).all())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # ---- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dt = like.dtype if like is not None else None
    return Tensor(x, dtype=dt)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---- tape / backward ------------------------------------------------------

@dataclass
class Tape:
    """Topologically ordered record of the operations leading to a root."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            t, done = stack.pop()
            if done:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in reversed(t._node.parents):
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def _run_backward(root: Tensor, targets: Sequence[Tensor] | None):
    if root.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_root(root)

    # which nodes lie on a path to something we want a gradient for
    if targets is None:
        wanted = {id(t) for t in tape.nodes if t.is_leaf}
    else:
        wanted = {id(t) for t in targets}
    needed: set[int] = set()
    for t in tape.nodes:  # parents come first
        if id(t) in wanted or (t._node is not None and any(id(p) in needed for p in t._node.parents)):
            needed.add(id(t))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None) if t._node is not None else grads.get(id(t))
        if g is None or t._node is None:
            continue
        parents = t._node.parents
        needs = tuple(p.requires_grad and id(p) in needed for p in parents)
        if not any(needs):
            continue
        pgrads = t._node.backward(g, needs)
        for p, need, pg in zip(parents, needs, pgrads):
            if not need or pg is None:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return tape, grads


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    tape, grads = _run_backward(loss, None)
    for t in tape.nodes:
        if t.is_leaf and id(t) in grads:
            g = grads[id(t)].astype(t.data.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``inputs`` without touching any ``.grad`` field."""
    _, grads = _run_backward(loss, inputs)
    return [grads.get(id(t), np.zeros_like(t.data)) for t in inputs]


# ---- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return Tensor._from_op(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return Tensor._from_op(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)

    def bw(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return Tensor._from_op(a.data * b.data, "mul", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, "neg", (a,), lambda g, needs: (-g,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """max(x, slope*x).  The derivative at exactly 0 is taken as 1."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    pos = x.data >= 0
    scale = np.where(pos, x.data.dtype.type(1), x.data.dtype.type(slope))
    out = x.data * scale

    def bw(g, needs):
        return (g * scale,)

    return Tensor._from_op(out, "leaky_relu", (x,), bw)


# ---- shape ops ------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return Tensor._from_op(out, "reshape", (x,), lambda g, needs: (g.reshape(x.shape),))


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing; the result is a copy."""
    out = np.array(x.data[idx])

    def bw(g, needs):
        full = np.zeros_like(x.data)
        full[idx] += g
        return (full,)

    return Tensor._from_op(out, "getitem", (x,), bw)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(ts)
    if len(ts) == 1:
        return ts[0]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, "concat", ts, bw)


# ---- reductions -----------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(out, "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return Tensor._from_op(out, "mean", (x,), bw)


# ---- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g, needs):
        return (g @ b.data.T if needs[0] else None,
                a.data.T @ g if needs[1] else None)

    return Tensor._from_op(a.data @ b.data, "matmul", (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T + b with w stored as (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g, needs):
        res = [g @ w.data if needs[0] else None,
               g.T @ x.data if needs[1] else None]
        if b is not None:
            res.append(g.sum(axis=0) if needs[2] else None)
        return tuple(res)

    return Tensor._from_op(out, "linear", parents, bw)


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if k > n + 2 * pad or span % stride:
        raise DimensionError(
            f"conv2d: extent {n} with kernel {k}, stride {stride}, pad {pad} gives a non-integral output")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) via patch-matrix expansion."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if Cw != C:
        raise DimensionError(f"conv2d: input has {C} channels, weight expects {Cw}")
    Ho = _conv_out(H, kh, stride, pad)
    Wo = _conv_out(W, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, kh, kw, Ho, Wo): one column per output pixel, batched over B
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * kh * kw, Ho * Wo)
    wmat = w.data.reshape(F, C * kh * kw)
    out = np.matmul(wmat, cols).reshape(B, F, Ho, Wo)

    def bw(g, needs):
        gm = g.reshape(B, F, Ho * Wo)
        dx = dw = None
        if needs[1]:
            dw = np.tensordot(gm, cols, axes=((0, 2), (0, 2))).reshape(w.shape)
        if needs[0] and C < 8:
            dcols = np.matmul(wmat.T, gm).reshape(B, C, kh, kw, Ho, Wo)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        elif needs[0]:
            # accumulate channel-last so every strided add has a long contiguous inner run
            gT = np.ascontiguousarray(g.transpose(2, 3, 0, 1)).reshape(Ho * Wo * B, F)
            dxp = np.zeros((xp.shape[2], xp.shape[3], B, C), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    tap = np.ascontiguousarray(w.data[:, :, i, j])
                    dxp[i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (gT @ tap).reshape(Ho, Wo, B, C)
            dx = np.ascontiguousarray(dxp[pad:pad + H, pad:pad + W].transpose(2, 3, 0, 1))
        return dx, dw

    return Tensor._from_op(out, "conv2d", (x, w), bw)


# ---- losses / normalisation -----------------------------------------------

def softmax_xent(logits: Tensor, labels, weights=None, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels.

    ``weights`` scales each sample's loss; ``reduction`` is ``"mean"`` (divide
    by batch size) or ``"sum"``.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (B, c), got {logits.shape}")
    B, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != B:
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1, keepdims=True)
    per = np.log(se[:, 0]) - z[np.arange(B), labels]
    w = np.ones(B, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    scale = 1.0 / B if reduction == "mean" else 1.0
    out = np.asarray((w * per).sum() * scale, dtype=logits.dtype)

    def bw(g, needs):
        p = ez / se
        p[np.arange(B), labels] -= 1.0
        return (p * (w * scale * g)[:, None],)

    return Tensor._from_op(out, "softmax_xent", (logits,), bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
               running: tuple[np.ndarray, np.ndarray] | None = None):
    """Per-channel normalisation of a (B, C, H, W) tensor.

    With ``running=None`` the batch statistics are used and returned alongside
    the output as ``(out, batch_mean, batch_var_unbiased)``; otherwise the
    given (mean, var) pair is used as constants and ``(out, None, None)`` is
    returned.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    bshape = (1, -1, 1, 1)
    if running is None:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (n / (n - 1)) if n > 1 else var
    else:
        mu = np.asarray(running[0], dtype=x.dtype)
        var = np.asarray(running[1], dtype=x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    train = running is None

    def bw(g, needs):
        dx = dgamma = dbeta = None
        if needs[1]:
            dgamma = (g * xhat).sum(axis=axes)
        if needs[2]:
            dbeta = g.sum(axis=axes)
        if needs[0]:
            dxhat = g * gamma.data.reshape(bshape)
            if train:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                dx = inv.reshape(bshape) / n * (n * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv.reshape(bshape)
        return dx, dgamma, dbeta

    res = Tensor._from_op(out, "batch_norm", (x, gamma, beta), bw)
    if train:
        return res, mu, unbiased
    return res, None, None


# ---- verification ---------------------------------------------------------

def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps ``x`` to a scalar tensor.  Run in 64-bit mode.
    """
    xt = Tensor(x.data, requires_grad=True, dtype=x.dtype)
    (analytic,) = grad(f(xt), [xt])
    numeric = np.zeros_like(xt.data)
    flat = xt.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(xt).data)
            flat[i] = orig - h
            fm = float(f(xt).data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
