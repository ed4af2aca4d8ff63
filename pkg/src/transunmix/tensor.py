"""Dense float64 tensors with reverse-mode automatic differentiation.

Each operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent. ``backward``
walks the graph once in reverse topological order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "BatchNormState",
    "RngStream",
    "DimensionError",
    "ConfigurationError",
    "tensor",
    "matmul",
    "bmm",
    "concat",
    "conv2d",
    "batch_norm2d",
    "layer_norm",
    "softmax",
    "activation",
    "leaky_relu",
    "gelu",
    "dropout",
    "arccos",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """An operation was configured with invalid hyperparameters."""


GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _grad_fn=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._grad_fn: GradFn | None = _grad_fn
        self.op = op

    # ------------------------------------------------------------------ basics
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
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op!r})"

    @staticmethod
    def _make(data, parents: Sequence[Tensor], grad_fn: GradFn, op: str) -> Tensor:
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data, op=op)
        return Tensor(data, requires_grad=True, _parents=parents, _grad_fn=grad_fn, op=op)

    # -------------------------------------------------------------- arithmetic
    def __add__(self, other) -> Tensor:
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> Tensor:
        return self + (-_as_tensor(other))

    def __rsub__(self, other) -> Tensor:
        return _as_tensor(other) + (-self)

    def __mul__(self, other) -> Tensor:
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            "div",
        )

    def __rtruediv__(self, other) -> Tensor:
        return _as_tensor(other) / self

    def __pow__(self, exponent: float) -> Tensor:
        a = self.data
        return Tensor._make(
            a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),), f"pow{exponent}"
        )

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index) -> Tensor:
        shape = self.shape

        def grad_fn(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), grad_fn, "getitem")

    # ---------------------------------------------------------- elementwise fns
    def sqrt(self) -> Tensor:
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g / (2.0 * out),), "sqrt")

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def clamp_min(self, floor: float) -> Tensor:
        """max(x, floor); gradient passes only where x > floor."""
        mask = self.data > floor
        return Tensor._make(np.maximum(self.data, floor), (self,), lambda g: (g * mask,), "clamp_min")

    # ---------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), grad_fn, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ----------------------------------------------------------------- reshaping
    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes) -> Tensor:
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose"
        )

    @property
    def T(self) -> Tensor:
        return self.transpose()

    # ----------------------------------------------------------------- backward
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if grad is None:
            if self.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones(self.shape)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data
    return Tensor._make(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g), "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over a shared leading axis: [G×m×k] @ [G×k×n]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data
    return Tensor._make(
        np.matmul(x, y),
        (a, b),
        lambda g: (np.matmul(g, y.transpose(0, 2, 1)), np.matmul(x.transpose(0, 2, 1), g)),
        "bmm",
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return [
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        ]

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat"
    )


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, padding: int, out_h: int, out_w: int) -> np.ndarray:
    c = x.shape[0]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, k, k, out_h, out_w))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride]
    return cols.reshape(c * k * k, out_h * out_w)


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, padding: int, out_h: int, out_w: int):
    c, h, w = x_shape
    cols = cols.reshape(c, k, k, out_h, out_w)
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding))
    for i in range(k):
        for j in range(k):
            xp[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += cols[:, i, j]
    return xp[:, padding : padding + h, padding : padding + w]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation of a single C_in×H×W image."""
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv2d expects x [C×H×W] and w [O×C×k×k], got {x.shape}, {w.shape}")
    c_out, c_in, k, k2 = w.shape
    if k != k2 or k not in (1, 3):
        raise ConfigurationError(f"conv2d supports square kernels of size 1 or 3, got {k}×{k2}")
    if c_in != x.shape[0]:
        raise DimensionError(f"conv2d: input has {x.shape[0]} channels, kernel expects {c_in}")
    _, h, wd = x.shape
    num_h, num_w = h + 2 * padding - k, wd + 2 * padding - k
    if stride < 1 or num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ConfigurationError(
            f"conv2d: non-integral output size for H={h}, W={wd}, k={k}, stride={stride}, padding={padding}"
        )
    out_h, out_w = num_h // stride + 1, num_w // stride + 1

    cols = _im2col(x.data, k, stride, padding, out_h, out_w)
    wmat = w.data.reshape(c_out, -1)
    out = wmat @ cols
    if b is not None:
        out = out + b.data[:, None]
    x_shape = x.shape

    def grad_fn(g):
        g2 = g.reshape(c_out, -1)
        gx = _col2im(wmat.T @ g2, x_shape, k, stride, padding, out_h, out_w)
        gw = (g2 @ cols.T).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out.reshape(c_out, out_h, out_w), parents, grad_fn, "conv2d")


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Per-channel batch-norm statistics and affine parameters."""

    channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    weight: Tensor = field(default=None)
    bias: Tensor = field(default=None)

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigurationError("batch norm eps must be positive")
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)
        if self.weight is None:
            self.weight = Tensor(np.ones(self.channels), requires_grad=True)
        if self.bias is None:
            self.bias = Tensor(np.zeros(self.channels), requires_grad=True)


def _normalize_affine(x: Tensor, mean: np.ndarray, var: np.ndarray, eps: float,
                      weight: Tensor, bias: Tensor, axes, stats_from_batch: bool, op: str) -> Tensor:
    """(x - mean)/sqrt(var + eps) * weight + bias with a fused backward.

    ``axes`` are the reduced axes; weight/bias broadcast against x already.
    """
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    wd = weight.data
    count = math.prod(x.shape[a] for a in axes)

    def grad_fn(g):
        gw = _unbroadcast(g * xhat, weight.shape)
        gb = _unbroadcast(g, bias.shape)
        gxhat = g * wd
        if stats_from_batch:
            gx = inv_std / count * (
                count * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv_std
        return gx, gw, gb

    return Tensor._make(xhat * wd + bias.data, (x, weight, bias), grad_fn, op)


def batch_norm2d(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    if x.ndim != 3 or x.shape[0] != state.channels:
        raise DimensionError(f"batch_norm2d: expected [{state.channels}×H×W], got {x.shape}")
    c = state.channels
    axes = (1, 2)
    if training:
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        n = x.shape[1] * x.shape[2]
        unbiased = var.reshape(c) * (n / (n - 1)) if n > 1 else var.reshape(c)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean.reshape(c)
        state.running_var = (1 - m) * state.running_var + m * unbiased
    else:
        mean = state.running_mean.reshape(c, 1, 1)
        var = state.running_var.reshape(c, 1, 1)
    return _normalize_affine(
        x, mean, var, state.eps,
        state.weight.reshape(c, 1, 1), state.bias.reshape(c, 1, 1),
        axes, training, "batch_norm2d",
    )


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis, then scale and shift."""
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last axis {d} vs params {weight.shape}, {bias.shape}")
    axes = (x.ndim - 1,)
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    return _normalize_affine(x, mean, var, eps, weight, bias, axes, True, "layer_norm")


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise IndexError(f"softmax axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), grad_fn, "softmax")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope)
    return Tensor._make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data**2)
    deriv = cdf + x.data * pdf
    return Tensor._make(x.data * cdf, (x,), lambda g: (g * deriv,), "gelu")


def activation(x: Tensor, kind: str, slope: float = 0.01) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "gelu":
        return gelu(x)
    raise ConfigurationError(f"unknown activation {kind!r}")


def arccos(x: Tensor, upper: float = 1.0 - 1e-12) -> Tensor:
    """arccos with the argument clipped to [-1, 1].

    The derivative is evaluated at min(x, upper) so it stays finite at x = 1
    while the value itself is exact there.
    """
    c = np.clip(x.data, -1.0, 1.0)
    at = np.clip(x.data, -upper, upper)
    deriv = -1.0 / np.sqrt(1.0 - at * at)
    return Tensor._make(np.arccos(c), (x,), lambda g: (g * deriv,), "arccos")


def arctan(x: Tensor) -> Tensor:
    deriv = 1.0 / (1.0 + x.data * x.data)
    return Tensor._make(np.arctan(x.data), (x,), lambda g: (g * deriv,), "arctan")


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


class RngStream:
    """Seeded Philox stream; ``split`` derives independent child streams by label."""

    algorithm = "philox4x64-10"

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        seq = np.random.SeedSequence([self.seed, *self.path])
        self.generator = np.random.Generator(np.random.Philox(seq))

    def split(self, label: str | int) -> RngStream:
        if isinstance(label, str):
            key = int.from_bytes(label.encode("utf-8")[:8].ljust(8, b"\0"), "little")
            key ^= len(label) << 56
        else:
            key = int(label)
        return RngStream(self.seed, self.path + (key & 0xFFFFFFFFFFFFFFFF,))

    def __getattr__(self, name):
        return getattr(self.generator, name)


def dropout(x: Tensor, rate: float, training: bool, rng: RngStream | None = None) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs an RngStream")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# Verification harness
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6,
               indices: Sequence[tuple[int, ...]] | None = None) -> float:
    """Largest relative gap between reverse-mode and central-difference gradients.

    ``f`` must be deterministic. ``indices`` restricts the comparison to a
    subset of entries of ``x``; by default every entry is checked.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    f(leaf).backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros(x.shape)

    base = x.data.copy()
    if indices is None:
        indices = list(np.ndindex(*x.shape))
    worst = 0.0
    for idx in indices:
        probe = base.copy()
        probe[idx] = base[idx] + h
        up = f(Tensor(probe)).item()
        probe[idx] = base[idx] - h
        down = f(Tensor(probe)).item()
        central = (up - down) / (2.0 * h)
        a = analytic[idx]
        worst = max(worst, abs(a - central) / max(1e-8, abs(a) + abs(central)))
    return worst
