"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are contiguous row-major numpy arrays in double precision. Every
differentiable operation appends a pull-back closure to a process-global
tape; ``backward`` replays the tape in reverse execution order (a valid
topological order by construction) and accumulates gradients into every
reachable tensor with ``requires_grad``. The tape is confined to one
logical thread and is cleared after each backward pass.

Broadcasting is deliberately restricted to bias addition and per-channel
affine terms; everything else requires exact shape agreement.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, PulseformerError

_tape: list[tuple["Tensor", Callable[[np.ndarray], None]]] = []
_grad_enabled: bool = True


class no_grad:
    """Context manager that suspends tape recording (inference fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def tape_size() -> int:
    return len(_tape)


def clear_tape() -> None:
    _tape.clear()


class Tensor:
    """N-dimensional float64 array participating in reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _record(out: Tensor, pull: Callable[[np.ndarray], None]) -> None:
    if _grad_enabled and out.requires_grad:
        _tape.append((out, pull))


def _accum(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a gradient contribution; sums over all uses of ``t``."""
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy so later in-place accumulation never aliases another buffer
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _needs_grad(*ts: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad for t in ts)


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss over the whole tape.

    Every tensor with ``requires_grad`` reachable from ``loss`` receives
    dLoss/dTensor in ``.grad``. The tape is cleared afterwards.
    """
    if loss.size != 1:
        raise DimensionError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise PulseformerError("loss is not connected to any tensor requiring gradients")
    loss.grad = np.ones_like(loss.data)
    try:
        for out, pull in reversed(_tape):
            g = out.grad
            if g is None:
                continue
            pull(g)
    finally:
        _tape.clear()


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, requires_grad=_needs_grad(a, b))

    def pull(g):
        _accum(a, g)
        _accum(b, g)

    _record(out, pull)
    return out


def add_embedding(x: Tensor, e: Tensor) -> Tensor:
    """Add a per-position embedding shared across the leading batch axis."""
    if e.shape != x.shape[1:]:
        raise DimensionError(f"embedding shape {e.shape} does not match {x.shape[1:]}")
    out = Tensor(x.data + e.data[None], requires_grad=_needs_grad(x, e))

    def pull(g):
        _accum(x, g)
        _accum(e, g.sum(axis=0))

    _record(out, pull)
    return out


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(x.data * s, requires_grad=_needs_grad(x))

    def pull(g):
        _accum(x, g * s)

    _record(out, pull)
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(x.data.reshape(shape), requires_grad=_needs_grad(x))

    def pull(g):
        _accum(x, g.reshape(x.shape))

    _record(out, pull)
    return out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)), requires_grad=_needs_grad(x))

    def pull(g):
        _accum(x, g.transpose(inv))

    _record(out, pull)
    return out


def elu(x: Tensor) -> Tensor:
    """x for x > 0, exp(x) - 1 otherwise."""
    neg = x.data <= 0.0
    y = np.where(neg, np.expm1(x.data), x.data)
    out = Tensor(y, requires_grad=_needs_grad(x))

    def pull(g):
        _accum(x, g * np.where(neg, y + 1.0, 1.0))

    _record(out, pull)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Smooth GELU (tanh form)."""
    v = x.data
    u = _GELU_C * (v + 0.044715 * v**3)
    th = np.tanh(u)
    out = Tensor(0.5 * v * (1.0 + th), requires_grad=_needs_grad(x))

    def pull(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th**2) * du
        _accum(x, g * d)

    _record(out, pull)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max subtraction)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=_needs_grad(x))

    def pull(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - inner))

    _record(out, pull)
    return out


def mean(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Arithmetic mean over the given axes (all axes when None)."""
    if axes is None:
        axes = tuple(range(x.ndim))
    else:
        axes = tuple(sorted(a % x.ndim for a in axes))
    count = 1
    for a in axes:
        count *= x.shape[a]
    y = x.data.mean(axis=axes)
    out = Tensor(y, requires_grad=_needs_grad(x))

    def pull(g):
        ge = np.expand_dims(g, axes) if g.ndim else g.reshape((1,) * x.ndim)
        _accum(x, np.broadcast_to(ge / count, x.shape))

    _record(out, pull)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: y[..., o] = sum_i x[..., i] w[o, i] + b[o]."""
    din = x.shape[-1]
    if w.ndim != 2 or w.shape[1] != din:
        raise DimensionError(f"linear weight {w.shape} incompatible with input {x.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"linear bias {b.shape} incompatible with weight {w.shape}")
    x2 = x.data.reshape(-1, din)
    y2 = x2 @ w.data.T
    if b is not None:
        y2 += b.data
    out_shape = x.shape[:-1] + (w.shape[0],)
    req = _needs_grad(x, w) or (b is not None and _needs_grad(b))
    out = Tensor(y2.reshape(out_shape), requires_grad=req)

    def pull(g):
        g2 = g.reshape(-1, w.shape[0])
        _accum(x, (g2 @ w.data).reshape(x.shape))
        _accum(w, g2.T @ x2)
        if b is not None:
            _accum(b, g2.sum(axis=0))

    _record(out, pull)
    return out


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared element differences, as a scalar tensor."""
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = Tensor(np.asarray((diff * diff).sum() / n), requires_grad=_needs_grad(pred, target))

    def pull(g):
        gd = (2.0 / n) * g * diff
        _accum(pred, gd)
        _accum(target, -gd)

    _record(out, pull)
    return out
