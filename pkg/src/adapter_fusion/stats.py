"""Post-training gradient and empirical Fisher statistics of a task adapter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import AdapterLayout, Backbone, ConfigurationError, ParameterVector, TaskHead, task_loss
from .numerics import Tape

__all__ = [
    "FusionStatistics",
    "compute_fisher_diagonal",
    "compute_gradient",
    "compute_statistics",
    "per_sample_gradients",
    "summarize",
    "summarize_per_layer",
]


@dataclass(eq=False)
class FusionStatistics:
    grad: ParameterVector
    fisher: ParameterVector
    f_min: float
    f_mean: float

    def __post_init__(self):
        self.grad.check_layout(self.fisher)
        if np.any(self.fisher.data < 0):
            raise ValueError("Fisher diagonal must be nonnegative")

    @classmethod
    def from_arrays(cls, grad: ParameterVector, fisher: ParameterVector) -> "FusionStatistics":
        f_min, f_mean = summarize(fisher)
        return cls(grad, fisher, f_min, f_mean)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FusionStatistics)
            and self.grad == other.grad
            and self.fisher == other.fisher
            and self.f_min == other.f_min
            and self.f_mean == other.f_mean
        )


def _sample_grad(theta: ParameterVector, x_i: np.ndarray, y_i: int, backbone: Backbone,
                 head: TaskHead, loss_scale: float) -> np.ndarray:
    tape = Tape()
    node = tape.leaf(theta.data)
    loss = task_loss(tape, node, x_i[None, :], np.array([y_i]), backbone, theta.layout, head)
    if loss_scale != 1.0:
        loss = tape.scale(loss, loss_scale)
    return tape.backward(loss)[node]


def per_sample_gradients(theta: ParameterVector, x: np.ndarray, y: np.ndarray, backbone: Backbone,
                         head: TaskHead, loss_scale: float = 1.0):
    """Yield the cross-entropy gradient of each sample, in dataset index order."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise ConfigurationError("task dataset is empty")
    for i in range(x.shape[0]):
        yield _sample_grad(theta, x[i], int(y[i]), backbone, head, loss_scale)


def compute_statistics(theta: ParameterVector, x: np.ndarray, y: np.ndarray, backbone: Backbone,
                       head: TaskHead, loss_scale: float = 1.0) -> FusionStatistics:
    """Mean gradient and empirical Fisher from one batch-size-1 pass over the data."""
    g_sum = np.zeros(theta.layout.size)
    f_sum = np.zeros(theta.layout.size)
    n = 0
    for g in per_sample_gradients(theta, x, y, backbone, head, loss_scale):
        g_sum += g
        f_sum += g * g
        n += 1
    return FusionStatistics.from_arrays(theta.like(g_sum / n), theta.like(f_sum / n))


def compute_gradient(theta, x, y, backbone, head, loss_scale: float = 1.0) -> ParameterVector:
    g_sum = np.zeros(theta.layout.size)
    n = 0
    for g in per_sample_gradients(theta, x, y, backbone, head, loss_scale):
        g_sum += g
        n += 1
    return theta.like(g_sum / n)


def compute_fisher_diagonal(theta, x, y, backbone, head, loss_scale: float = 1.0) -> ParameterVector:
    f_sum = np.zeros(theta.layout.size)
    n = 0
    for g in per_sample_gradients(theta, x, y, backbone, head, loss_scale):
        f_sum += g * g
        n += 1
    return theta.like(f_sum / n)


def summarize(fisher: ParameterVector | np.ndarray) -> tuple[float, float]:
    """Global (min, mean) over every adapted coordinate."""
    data = fisher.data if isinstance(fisher, ParameterVector) else np.asarray(fisher, dtype=np.float64)
    if data.size == 0:
        raise ValueError("cannot summarize an empty Fisher vector")
    if np.any(data < 0):
        raise ValueError("Fisher entries must be nonnegative")
    return float(data.min()), float(data.mean())


def summarize_per_layer(fisher: ParameterVector) -> list[tuple[float, float]]:
    """Experimental per-layer (min, mean); not used by the default fusion path."""
    layout: AdapterLayout = fisher.layout
    out = []
    segs = layout.segments
    for i in range(0, len(segs), 2):
        lo = segs[i].offset
        hi = segs[i + 1].offset + segs[i + 1].size
        out.append(summarize(fisher.data[lo:hi]))
    return out
