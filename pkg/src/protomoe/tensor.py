"""Reverse-mode automatic differentiation over dense numpy-backed tensors.

Every operation the rest of the package needs is defined here: matmul,
elementwise arithmetic, reductions, softmax/log-softmax, gelu, layer norm,
L2 normalization, masked row gather/scatter and integer row gathers.
Gradients are exact analytic formulas; `backward` replays the recorded
graph once in reverse topological order.

Only scalar and numpy-style broadcasting are supported for binary ops;
incompatible shapes raise ShapeError. Double precision is used for
gradient verification, single precision for training.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ConfigError",
    "no_grad",
    "tensor",
    "zeros",
    "concat",
    "gradcheck",
]


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class ConfigError(ValueError):
    """Raised when a configuration value is invalid or inconsistent."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / data paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over broadcast dimensions so it matches `shape`."""
    if grad.shape == shape:
        return grad
    # sum away extra leading dims
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    # sum dims that were 1 in the original shape
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense n-d value with an optional gradient and graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None] | None) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- basic properties ------------------------------------------------------

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
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """A view of the same data, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def accum_grad(self, g: np.ndarray) -> None:
        # incoming g may be shared with other consumers: own a copy first
        if self.grad is None:
            self.grad = np.array(g)
        else:
            self.grad += g

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        data = _binary(a.data, b.data, np.add)

        def backward(g):
            if a.requires_grad:
                a.accum_grad(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b.accum_grad(_unbroadcast(g, b.data.shape))

        return Tensor._result(data, (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        data = _binary(a.data, b.data, np.subtract)

        def backward(g):
            if a.requires_grad:
                a.accum_grad(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b.accum_grad(_unbroadcast(-g, b.data.shape))

        return Tensor._result(data, (a, b), backward)

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        data = _binary(a.data, b.data, np.multiply)

        def backward(g):
            if a.requires_grad:
                a.accum_grad(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b.accum_grad(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._result(data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        data = _binary(a.data, b.data, np.divide)

        def backward(g):
            if a.requires_grad:
                a.accum_grad(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b.accum_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._result(data, (a, b), backward)

    def __neg__(self) -> "Tensor":
        a = self
        data = -a.data

        def backward(g):
            a.accum_grad(-g)

        return Tensor._result(data, (a,), backward)

    def __pow__(self, exponent: float) -> "Tensor":
        a = self
        e = float(exponent)
        data = a.data ** e

        def backward(g):
            a.accum_grad(g * e * a.data ** (e - 1.0))

        return Tensor._result(data, (a,), backward)

    def __matmul__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        data = a.data @ b.data

        def backward(g):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                a.accum_grad(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b.accum_grad(_unbroadcast(gb, b.data.shape))

        return Tensor._result(data, (a, b), backward)

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            a.accum_grad(np.broadcast_to(_expand(g, a.data.shape, axis, keepdims), a.data.shape).copy())

        return Tensor._result(data, (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        data = a.data.mean(axis=axis, keepdims=keepdims)
        n = a.data.size if axis is None else _axis_size(a.data.shape, axis)

        def backward(g):
            a.accum_grad(np.broadcast_to(_expand(g, a.data.shape, axis, keepdims), a.data.shape) / n)

        return Tensor._result(data, (a,), backward)

    # -- pointwise nonlinearities ----------------------------------------------

    def exp(self) -> "Tensor":
        a = self
        data = np.exp(a.data)

        def backward(g):
            a.accum_grad(g * data)

        return Tensor._result(data, (a,), backward)

    def log(self) -> "Tensor":
        a = self
        data = np.log(a.data)

        def backward(g):
            a.accum_grad(g / a.data)

        return Tensor._result(data, (a,), backward)

    def sigmoid(self) -> "Tensor":
        a = self
        # stable two-sided form
        data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                        np.exp(a.data) / (1.0 + np.exp(a.data)))

        def backward(g):
            a.accum_grad(g * data * (1.0 - data))

        return Tensor._result(data, (a,), backward)

    def tanh(self) -> "Tensor":
        a = self
        data = np.tanh(a.data)

        def backward(g):
            a.accum_grad(g * (1.0 - data * data))

        return Tensor._result(data, (a,), backward)

    def gelu(self) -> "Tensor":
        """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
        a = self
        x = a.data
        c = x.dtype.type(np.sqrt(2.0 / np.pi))
        k = x.dtype.type(0.044715)
        x2 = x * x
        t = np.tanh(c * (x + k * (x2 * x)))
        half_1pt = 0.5 * (1.0 + t)
        data = x * half_1pt

        def backward(g):
            local = half_1pt + x * (1.0 - t * t) * (c * (1.0 + 3.0 * k * x2)) * 0.5
            a.accum_grad(g * local)

        return Tensor._result(data, (a,), backward)

    def softmax(self, axis: int = -1) -> "Tensor":
        a = self
        z = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            a.accum_grad(data * (g - dot))

        return Tensor._result(data, (a,), backward)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        a = self
        z = a.data - a.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        data = z - lse

        def backward(g):
            soft = np.exp(data)
            a.accum_grad(g - soft * g.sum(axis=axis, keepdims=True))

        return Tensor._result(data, (a,), backward)

    def layer_norm(self, axis: int = -1, eps: float = 1e-5) -> "Tensor":
        a = self
        x = a.data
        mu = x.mean(axis=axis, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axis, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        data = xc * inv

        def backward(g):
            gy = g * inv
            m1 = gy.mean(axis=axis, keepdims=True)
            m2 = (gy * data).mean(axis=axis, keepdims=True)
            a.accum_grad(gy - m1 - data * m2)

        return Tensor._result(data, (a,), backward)

    def l2_normalize(self, axis: int = -1, eps: float = 1e-8) -> "Tensor":
        """x / (||x|| + eps) along `axis`; zero slices map to zero."""
        a = self
        x = a.data
        r = np.sqrt((x * x).sum(axis=axis, keepdims=True))
        denom = r + eps
        data = x / denom

        def backward(g):
            r_safe = np.where(r > 0, r, 1.0)
            gdot = (g * x).sum(axis=axis, keepdims=True)
            a.accum_grad(g / denom - x * gdot / (r_safe * denom * denom))

        return Tensor._result(data, (a,), backward)

    # -- shape manipulation ------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        data = a.data.reshape(shape)

        def backward(g):
            a.accum_grad(g.reshape(a.data.shape))

        return Tensor._result(data, (a,), backward)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        if not axes:
            axes = tuple(reversed(range(a.ndim)))
        data = a.data.transpose(axes)
        inverse = np.argsort(axes)

        def backward(g):
            a.accum_grad(g.transpose(inverse))

        return Tensor._result(data, (a,), backward)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def swapaxes(self, ax1: int, ax2: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
        return self.transpose(axes)

    # -- row gather / scatter ------------------------------------------------------

    def gather_rows(self, mask: np.ndarray) -> "Tensor":
        """Select rows (axis 0) where boolean `mask` is true, in original order."""
        a = self
        mask = _check_mask(mask, a.data.shape[0])
        data = a.data[mask]

        def backward(g):
            z = np.zeros_like(a.data)
            z[mask] = g
            a.accum_grad(z)

        return Tensor._result(data, (a,), backward)

    def scatter_rows(self, mask: np.ndarray, values: "Tensor") -> "Tensor":
        """Write `values` over the masked rows; other rows are kept as-is."""
        a, v = self, self._coerce(values)
        mask = _check_mask(mask, a.data.shape[0])
        m = int(mask.sum())
        if v.data.shape[0] != m:
            raise ShapeError(f"scatter_rows: mask selects {m} rows but got {v.data.shape[0]} values")
        data = a.data.copy()
        data[mask] = v.data

        def backward(g):
            if a.requires_grad:
                ga = g.copy()
                ga[mask] = 0.0
                a.accum_grad(ga)
            if v.requires_grad:
                v.accum_grad(g[mask])

        return Tensor._result(data, (a, v), backward)

    def scatter_add_rows(self, mask: np.ndarray, values: "Tensor") -> "Tensor":
        """Add `values` into the masked rows; other rows are kept as-is."""
        a, v = self, self._coerce(values)
        mask = _check_mask(mask, a.data.shape[0])
        m = int(mask.sum())
        if v.data.shape[0] != m:
            raise ShapeError(f"scatter_add_rows: mask selects {m} rows but got {v.data.shape[0]} values")
        data = a.data.copy()
        data[mask] += v.data

        def backward(g):
            if a.requires_grad:
                a.accum_grad(g)
            if v.requires_grad:
                v.accum_grad(g[mask])

        return Tensor._result(data, (a, v), backward)

    def take_rows(self, indices: np.ndarray) -> "Tensor":
        """Integer row gather (embedding lookup); duplicate indices accumulate grads."""
        a = self
        idx = np.asarray(indices, dtype=np.int64)
        data = a.data[idx]

        def backward(g):
            z = np.zeros_like(a.data)
            np.add.at(z, idx, g)
            a.accum_grad(z)

        return Tensor._result(data, (a,), backward)

    def take_along_rows(self, indices: np.ndarray) -> "Tensor":
        """out[i, j] = self[i, indices[i, j]] for a 2-d tensor."""
        a = self
        idx = np.asarray(indices, dtype=np.int64)
        data = np.take_along_axis(a.data, idx, axis=1)

        def backward(g):
            z = np.zeros_like(a.data)
            rows = np.arange(a.data.shape[0])[:, None]
            np.add.at(z, (rows, idx), g)
            a.accum_grad(z)

        return Tensor._result(data, (a,), backward)

    # -- backward pass ------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's `.grad`.

        `self` must be a scalar produced through recorded operations.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")

        # iterative reverse topological order (post-order DFS)
        tape: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                tape.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(tape):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


# -- free functions ------------------------------------------------------


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p.accum_grad(g[tuple(sl)])

    return Tensor._result(data, parts, backward)


def _binary(a: np.ndarray, b: np.ndarray, op) -> np.ndarray:
    try:
        return op(a, b)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc


def _check_mask(mask: np.ndarray, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ShapeError(f"row mask has shape {mask.shape}, expected ({n},)")
    return mask


def _expand(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    """Reinsert reduced axes so `g` broadcasts back to `shape`."""
    if axis is None or keepdims:
        return g
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    return np.expand_dims(g, axes)


def _axis_size(shape: tuple[int, ...], axis) -> int:
    axes = axis if isinstance(axis, tuple) else (axis,)
    n = 1
    for a in axes:
        n *= shape[a % len(shape)]
    return n


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor],
              h: float = 1e-5) -> float:
    """Max relative error between analytic and central finite-difference grads.

    Relative error is |a - n| / max(|a|, |n|, 1): the unit floor keeps
    finite-difference roundoff from dominating for near-zero gradients.
    Params should be float64 leaves; `fn` re-evaluates the loss from them.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ConfigError("gradcheck requires float64 parameters")
        p.zero_grad()
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(fn().data)
                flat[i] = orig - h
                f_minus = float(fn().data)
                flat[i] = orig
                num[i] = (f_plus - f_minus) / (2.0 * h)
        n = num.reshape(p.data.shape)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
