"""Dense f64 arithmetic and a small tape-based reverse-mode autodiff.

Tensors are plain ``numpy.ndarray`` values of dtype float64.  A :class:`Tape`
records primitive operations in execution order; node ids are indices into the
tape, so operands always precede their consumers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "DimensionError",
    "NonFiniteError",
    "Tape",
    "as_tensor",
    "backward",
    "finite_diff_check",
    "matmul",
    "relu",
]


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, order="C", copy=True)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


def _check_finite(name: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{name} produced a non-finite value")
    return value


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of an (m, k) and a (k, n) array."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _check_finite("matmul", a @ b)


def relu(x: np.ndarray) -> np.ndarray:
    # x > 0 keeps the subgradient at exactly zero for x == 0
    return np.where(x > 0, x, 0.0)


# ---------------------------------------------------------------------------
# primitive table: name -> (forward, vjp)
# vjp(grad_out, input_values, output_value, attrs) -> tuple of input grads


def _mm_fwd(vals, attrs):
    return matmul(vals[0], vals[1])


def _mm_vjp(g, vals, out, attrs):
    a, b = vals
    return g @ b.T, a.T @ g


def _add_fwd(vals, attrs):
    a, b = vals
    if a.shape != b.shape and not (b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]):
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    return a + b


def _add_vjp(g, vals, out, attrs):
    a, b = vals
    gb = g if b.shape == g.shape else g.sum(axis=0)
    return g, gb


def _sub_fwd(vals, attrs):
    a, b = vals
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return a - b


def _sub_vjp(g, vals, out, attrs):
    return g, -g


def _mul_fwd(vals, attrs):
    a, b = vals
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    return a * b


def _mul_vjp(g, vals, out, attrs):
    a, b = vals
    return g * b, g * a


def _scale_fwd(vals, attrs):
    return vals[0] * attrs["c"]


def _scale_vjp(g, vals, out, attrs):
    return (g * attrs["c"],)


def _relu_fwd(vals, attrs):
    return relu(vals[0])


def _relu_vjp(g, vals, out, attrs):
    return (np.where(vals[0] > 0, g, 0.0),)


def _sum_fwd(vals, attrs):
    return np.asarray(vals[0].sum(), dtype=np.float64)


def _sum_vjp(g, vals, out, attrs):
    return (np.full(vals[0].shape, float(g)),)


def _view_fwd(vals, attrs):
    off, shape = attrs["offset"], attrs["shape"]
    size = int(np.prod(shape))
    return vals[0][off : off + size].reshape(shape)


def _view_vjp(g, vals, out, attrs):
    full = np.zeros_like(vals[0])
    off = attrs["offset"]
    full[off : off + g.size] = g.ravel()
    return (full,)


def _norm_fwd(vals, attrs):
    x = vals[0]
    if x.ndim != 2:
        raise DimensionError(f"normalize expects a matrix, got shape {x.shape}")
    n = np.sqrt((x * x).sum(axis=attrs["axis"], keepdims=True) + attrs["eps"])
    return x / n


def _norm_vjp(g, vals, out, attrs):
    x = vals[0]
    n = np.sqrt((x * x).sum(axis=attrs["axis"], keepdims=True) + attrs["eps"])
    return ((g - out * (g * out).sum(axis=attrs["axis"], keepdims=True)) / n,)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _xent_fwd(vals, attrs):
    logits = vals[0]
    labels = attrs["labels"]
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy shape mismatch: {logits.shape} vs labels {labels.shape}")
    lp = _log_softmax(logits)
    return np.asarray(-lp[np.arange(len(labels)), labels].mean(), dtype=np.float64)


def _xent_vjp(g, vals, out, attrs):
    logits = vals[0]
    labels = attrs["labels"]
    n = logits.shape[0]
    p = np.exp(_log_softmax(logits))
    p[np.arange(n), labels] -= 1.0
    return (p * (float(g) / n),)


_PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_mm_fwd, _mm_vjp),
    "add": (_add_fwd, _add_vjp),
    "sub": (_sub_fwd, _sub_vjp),
    "mul": (_mul_fwd, _mul_vjp),
    "scale": (_scale_fwd, _scale_vjp),
    "relu": (_relu_fwd, _relu_vjp),
    "sum": (_sum_fwd, _sum_vjp),
    "view": (_view_fwd, _view_vjp),
    "normalize": (_norm_fwd, _norm_vjp),
    "cross_entropy": (_xent_fwd, _xent_vjp),
}


@dataclass(frozen=True)
class _Op:
    name: str
    inputs: tuple[int, ...]
    attrs: dict


class Tape:
    """Records primitive ops; node ids index ``values`` in topological order."""

    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self.ops: list[_Op | None] = []  # None marks a leaf
        self.requires_grad: list[bool] = []

    def __len__(self) -> int:
        return len(self.values)

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    def leaf(self, value, requires_grad: bool = True) -> int:
        self.values.append(as_tensor(value))
        self.ops.append(None)
        self.requires_grad.append(requires_grad)
        return len(self.values) - 1

    def const(self, value) -> int:
        """A leaf that never receives gradient (detached)."""
        return self.leaf(value, requires_grad=False)

    def _record(self, name: str, inputs: tuple[int, ...], **attrs) -> int:
        fwd, _ = _PRIMITIVES[name]
        out = _check_finite(name, fwd([self.values[i] for i in inputs], attrs))
        self.values.append(out)
        self.ops.append(_Op(name, inputs, attrs))
        self.requires_grad.append(any(self.requires_grad[i] for i in inputs))
        return len(self.values) - 1

    def matmul(self, a: int, b: int) -> int:
        return self._record("matmul", (a, b))

    def add(self, a: int, b: int) -> int:
        return self._record("add", (a, b))

    def sub(self, a: int, b: int) -> int:
        return self._record("sub", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self._record("mul", (a, b))

    def scale(self, a: int, c: float) -> int:
        return self._record("scale", (a,), c=float(c))

    def relu(self, a: int) -> int:
        return self._record("relu", (a,))

    def sum(self, a: int) -> int:
        return self._record("sum", (a,))

    def view(self, a: int, offset: int, shape: tuple[int, ...]) -> int:
        """Reshaped slice of a flat node, ``a[offset : offset + prod(shape)]``."""
        size = int(np.prod(shape))
        if self.values[a].ndim != 1 or offset < 0 or offset + size > self.values[a].size:
            raise DimensionError(f"view {offset}+{shape} out of range for {self.values[a].shape}")
        return self._record("view", (a,), offset=int(offset), shape=tuple(shape))

    def normalize(self, a: int, axis: int = 1, eps: float = 1e-12) -> int:
        """``a / sqrt(sum(a**2, axis) + eps)``: unit rows (axis=1) or columns (axis=0)."""
        if axis not in (0, 1):
            raise ValueError(f"normalize axis must be 0 or 1, got {axis}")
        return self._record("normalize", (a,), axis=axis, eps=float(eps))

    def cross_entropy(self, logits: int, labels) -> int:
        """Mean softmax cross-entropy over the batch rows."""
        labels = np.asarray(labels, dtype=np.int64)
        return self._record("cross_entropy", (logits,), labels=labels)

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> None:
        """Recompute every node in recorded order, optionally with new leaf values."""
        leaf_values = leaf_values or {}
        for i, op in enumerate(self.ops):
            if op is None:
                if i in leaf_values:
                    self.values[i] = as_tensor(leaf_values[i])
                continue
            fwd, _ = _PRIMITIVES[op.name]
            self.values[i] = _check_finite(op.name, fwd([self.values[j] for j in op.inputs], op.attrs))

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        """Gradients of a scalar node w.r.t. every node on the tape.

        Nodes that do not reach ``loss`` and detached nodes get zero gradient.
        """
        if self.values[loss].size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.values[loss].shape}")
        grads: list[np.ndarray | None] = [None] * len(self.values)
        grads[loss] = np.ones_like(self.values[loss])
        for i in range(loss, -1, -1):
            g = grads[i]
            op = self.ops[i]
            if g is None or op is None or not self.requires_grad[i]:
                continue
            _, vjp = _PRIMITIVES[op.name]
            in_vals = [self.values[j] for j in op.inputs]
            for j, gj in zip(op.inputs, vjp(g, in_vals, self.values[i], op.attrs)):
                if not self.requires_grad[j]:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        return {
            i: (g if (g is not None and self.requires_grad[i]) else np.zeros_like(v))
            for i, (g, v) in enumerate(zip(grads, self.values))
        }


def backward(tape: Tape, loss: int) -> dict[int, np.ndarray]:
    return tape.backward(loss)


def finite_diff_check(f: Callable[[Tape, int], int], theta, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(tape, theta_node)`` must build a scalar loss on ``tape`` and return its
    node id.  The error per coordinate is ``|g_ad - g_fd| / max(1, |g_fd|)``.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    theta = as_tensor(theta).ravel()

    def evaluate(v: np.ndarray) -> float:
        tape = Tape()
        node = tape.leaf(v)
        val = float(tape.value(f(tape, node)))
        if not np.isfinite(val):
            raise NonFiniteError("objective is not finite")
        return val

    tape = Tape()
    node = tape.leaf(theta)
    loss = f(tape, node)
    if not np.isfinite(tape.value(loss)).all():
        raise NonFiniteError("objective is not finite")
    g_ad = tape.backward(loss)[node]

    g_fd = np.empty_like(theta)
    for i in range(theta.size):
        plus, minus = theta.copy(), theta.copy()
        plus[i] += h
        minus[i] -= h
        g_fd[i] = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
    err = np.abs(g_ad - g_fd) / np.maximum(1.0, np.abs(g_fd))
    return float(err.max()) if err.size else 0.0
