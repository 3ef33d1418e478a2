"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op records its parents and a local gradient rule on the
output tensor. ``Tensor.backward`` orders the recorded graph topologically and
replays the rules in reverse, accumulating gradients additively across fan-out.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels as _k

DTYPE = np.float64
LEAKY_ALPHA = 0.01
BCE_EPS = 1e-7

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class GradientContractError(RuntimeError):
    """Raised when backward/optimizer preconditions are violated."""


class DegenerateLossError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # ----- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ----- graph construction ----------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self) -> None:
        """Populate ``.grad`` on every grad-enabled ancestor of this scalar."""
        if self.data.size != 1:
            raise GradientContractError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise GradientContractError("backward() called on a tensor without grad")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # release the graph behind interior nodes
            node._parents = ()
            node._backward = None

    # ----- operators --------------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), bw)

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = (
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
                if b.requires_grad
                else None
            )
            return ga, gb

        return Tensor._make(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, exponent: float):
        a = self
        out = a.data**exponent
        return Tensor._make(
            out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),)
        )

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self
        out = a.data[idx]
        basic = _is_basic_index(idx)

        def bw(g):
            full = np.zeros_like(a.data)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(out, (a,), bw)

    # ----- reductions and shape ops ----------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[i] for i in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(
            a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),)
        )

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),)
        )

    def swapaxes(self, a1: int, a2: int):
        axes = list(range(self.ndim))
        axes[a1], axes[a2] = axes[a2], axes[a1]
        return self.transpose(tuple(axes))

    @property
    def T(self):
        return self.transpose()

    # ----- elementwise ------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self):
        return sigmoid(self)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(
        isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis
        for i in items
    )


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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_flat(a, b)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = (
            _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            if a.requires_grad
            else None
        )
        gb = (
            _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def _matmul_flat(a: Tensor, b: Tensor) -> Tensor:
    # (..., k) @ (k, n) as one GEMM; the weight gradient avoids a batched reduce
    k, n = b.shape
    a2 = a.data.reshape(-1, k)
    out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

    def bw(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    if axis == x.ndim - 1:
        shape = x.shape
        out = _k.softmax_rows(np.ascontiguousarray(x.data).reshape(-1, shape[-1])).reshape(shape)

        def bw(g):
            g2 = np.ascontiguousarray(g).reshape(-1, shape[-1])
            return (_k.softmax_rows_grad(out.reshape(-1, shape[-1]), g2).reshape(shape),)

        return Tensor._make(out, (x,), bw)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw_axis(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw_axis)


def leaky_relu(x, alpha: float = LEAKY_ALPHA) -> Tensor:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    x = _as_tensor(x)
    slope = np.where(x.data >= 0.0, 1.0, alpha)
    return Tensor._make(x.data * slope, (x,), lambda g: (g * slope,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    # split by sign so exp never overflows; underflow to 0 is the right answer
    with np.errstate(under="ignore"):
        e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    return _as_tensor(x).tanh()


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor._make(out, tuple(tensors), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    shape = x.shape
    n = shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm affine params must be ({n},), got {gamma.shape}, {beta.shape}")
    x2 = np.ascontiguousarray(x.data).reshape(-1, n)
    out, xhat, inv_std = _k.layer_norm_rows(x2, gamma.data, beta.data, eps)

    def bw(g):
        g2 = np.ascontiguousarray(g).reshape(-1, n)
        dx, dgamma, dbeta = _k.layer_norm_rows_grad(g2, xhat, inv_std, gamma.data)
        return dx.reshape(shape), dgamma, dbeta

    return Tensor._make(out.reshape(shape), (x, gamma, beta), bw)


def clamp(x, lo: float, hi: float) -> Tensor:
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def mse_loss(pred, target, mask=None) -> Tensor:
    """Mean squared error over positions where ``mask == 1``."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if mask is None:
        mask = np.ones(pred.shape)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=DTYPE)
    if not (pred.shape == target.shape == mask.shape):
        raise ShapeError(
            f"mse_loss shapes differ: pred {pred.shape}, target {target.shape}, "
            f"mask {mask.shape}"
        )
    count = mask.sum()
    if count == 0:
        raise DegenerateLossError("mse_loss mask selects no positions")
    diff = pred - target
    return (diff * diff * mask).sum() * (1.0 / count)


def bce_loss(prob, label) -> Tensor:
    """Binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7]."""
    prob = _as_tensor(prob)
    label = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=DTYPE)
    if prob.shape != label.shape:
        raise ShapeError(f"bce_loss shapes differ: {prob.shape} vs {label.shape}")
    p = clamp(prob, BCE_EPS, 1.0 - BCE_EPS)
    ll = p.log() * label + (1.0 - p).log() * (1.0 - label)
    return -ll.mean()


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Adaptive-moment optimizer over a fixed parameter list."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not all(0.0 < b < 1.0 for b in betas):
            raise ValueError("moment decays must lie in (0, 1)")
        self.state = OptimizerState(
            lr=lr,
            beta1=betas[0],
            beta2=betas[1],
            eps=eps,
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    def step(self) -> None:
        optimizer_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def optimizer_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        names = [params[i].name or f"#{i}" for i in missing[:5]]
        raise GradientContractError(f"parameters without gradients: {names}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||, floor), the usual gradient-check measure.

    A norm ratio rather than an elementwise one: entries near zero carry
    finite-difference round-off that an elementwise ratio would blow up.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
