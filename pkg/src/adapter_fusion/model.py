"""Frozen MLP backbone with parallel bottleneck adapters.

Each hidden block is a residual unit ``h + mlp(h) + relu(h @ W_down) @ W_up``
(the adapter runs parallel to the block's MLP); only the adapter matrices are
trainable once the backbone is frozen.  Adapter weights
are exchanged as flat :class:`ParameterVector` objects so fusion can work
element-wise.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, Tape, as_tensor, relu

__all__ = [
    "Adapter",
    "AdapterLayout",
    "Backbone",
    "ConfigurationError",
    "LayoutError",
    "ParameterVector",
    "Segment",
    "TaskHead",
    "adapter_forward",
    "extract_features",
    "flatten",
    "init_adapter",
    "init_backbone",
    "pretrain_backbone",
    "task_loss",
    "unflatten",
]


class ConfigurationError(ValueError):
    pass


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    layer: int
    matrix: str  # "down" | "up"
    shape: tuple[int, int]
    offset: int

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]


@dataclass(frozen=True)
class AdapterLayout:
    """Flat ordering: for each layer, W_down (d x r) then W_up (r x d), row-major."""

    d: int
    r: int
    n_layers: int

    def __post_init__(self):
        if not (0 < self.r < self.d) or self.n_layers < 1:
            raise ConfigurationError(f"invalid adapter layout d={self.d} r={self.r} layers={self.n_layers}")

    @property
    def segments(self) -> tuple[Segment, ...]:
        segs, off = [], 0
        for layer in range(self.n_layers):
            for name, shape in (("down", (self.d, self.r)), ("up", (self.r, self.d))):
                segs.append(Segment(layer, name, shape, off))
                off += shape[0] * shape[1]
        return tuple(segs)

    @property
    def size(self) -> int:
        return self.n_layers * 2 * self.d * self.r

    def to_dict(self) -> dict:
        return {"d": self.d, "r": self.r, "n_layers": self.n_layers}

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterLayout":
        return cls(int(d["d"]), int(d["r"]), int(d["n_layers"]))


@dataclass(eq=False)
class ParameterVector:
    data: np.ndarray
    layout: AdapterLayout

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64).ravel()
        if self.data.size != self.layout.size:
            raise LayoutError(f"vector length {self.data.size} != layout size {self.layout.size}")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ParameterVector)
            and self.layout == other.layout
            and np.array_equal(self.data, other.data)
        )

    def __len__(self) -> int:
        return self.data.size

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.data.copy(), self.layout)

    def like(self, data: np.ndarray) -> "ParameterVector":
        return ParameterVector(data, self.layout)

    def check_layout(self, *others: "ParameterVector") -> None:
        for o in others:
            if o.layout != self.layout:
                raise LayoutError(f"layout mismatch: {self.layout} vs {o.layout}")


@dataclass
class Adapter:
    layout: AdapterLayout
    weights: list[tuple[np.ndarray, np.ndarray]]  # per layer (W_down, W_up)


def flatten(adapter: Adapter) -> ParameterVector:
    parts = []
    for down, up in adapter.weights:
        parts.append(np.asarray(down, dtype=np.float64).ravel())
        parts.append(np.asarray(up, dtype=np.float64).ravel())
    return ParameterVector(np.concatenate(parts), adapter.layout)


def unflatten(vec: ParameterVector) -> Adapter:
    segs = vec.layout.segments
    weights = []
    for i in range(0, len(segs), 2):
        down, up = segs[i], segs[i + 1]
        weights.append(
            (
                vec.data[down.offset : down.offset + down.size].reshape(down.shape).copy(),
                vec.data[up.offset : up.offset + up.size].reshape(up.shape).copy(),
            )
        )
    return Adapter(vec.layout, weights)


def init_adapter(layout: AdapterLayout, rng: np.random.Generator) -> ParameterVector:
    """W_down ~ U(-1/sqrt(d), 1/sqrt(d)), W_up = 0: an exact no-op adapter."""
    bound = 1.0 / np.sqrt(layout.d)
    weights = [
        (rng.uniform(-bound, bound, size=(layout.d, layout.r)), np.zeros((layout.r, layout.d)))
        for _ in range(layout.n_layers)
    ]
    return flatten(Adapter(layout, weights))


@dataclass(eq=False)
class Backbone:
    """Linear input embedding followed by ``n_layers`` residual MLP blocks of width d."""

    w_in: np.ndarray
    b_in: np.ndarray
    blocks: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]
    frozen: bool = False

    @property
    def d(self) -> int:
        return self.w_in.shape[1]

    @property
    def d_in(self) -> int:
        return self.w_in.shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def arrays(self) -> list[np.ndarray]:
        out = [self.w_in, self.b_in]
        for blk in self.blocks:
            out.extend(blk)
        return out

    def freeze(self) -> "Backbone":
        for a in self.arrays():
            a.setflags(write=False)
        self.frozen = True
        return self

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    def mlp(self, x: np.ndarray, layer: int) -> np.ndarray:
        w1, b1, w2, b2 = self.blocks[layer]
        return relu(x @ w1 + b1) @ w2 + b2

    def embed(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise DimensionError(f"input shape {x.shape} does not match backbone input dim {self.d_in}")
        return x @ self.w_in + self.b_in

    def layout(self, r: int) -> AdapterLayout:
        return AdapterLayout(self.d, r, self.n_layers)


def init_backbone(d_in: int, d: int, n_layers: int, rng: np.random.Generator) -> Backbone:
    def he(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))

    w_in = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d))
    # residual branches start small so the stack is close to the embedding
    blocks = [(he(d, d), np.zeros(d), 0.5 * he(d, d) / np.sqrt(2.0), np.zeros(d)) for _ in range(n_layers)]
    return Backbone(w_in, np.zeros(d), blocks)


def adapter_forward(x: np.ndarray, layer: int, adapter: Adapter, backbone: Backbone) -> np.ndarray:
    """``mlp(x) + relu(x @ W_down) @ W_up`` for one hidden block."""
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= layer < len(adapter.weights):
        raise IndexError(f"no adapter attached at layer {layer}")
    down, up = adapter.weights[layer]
    if x.ndim != 2 or x.shape[1] != down.shape[0] or down.shape[0] != backbone.d:
        raise DimensionError(f"input shape {x.shape} incompatible with adapter d={down.shape[0]}")
    return backbone.mlp(x, layer) + relu(x @ down) @ up


def extract_features(x: np.ndarray, backbone: Backbone, theta: ParameterVector | None = None) -> np.ndarray:
    """Feature map of the adapted backbone (no tape)."""
    h = backbone.embed(np.asarray(x, dtype=np.float64))
    adapter = unflatten(theta) if theta is not None else None
    for layer in range(backbone.n_layers):
        if adapter is None:
            h = h + backbone.mlp(h, layer)
        else:
            h = h + adapter_forward(h, layer, adapter, backbone)
    return h


# ---------------------------------------------------------------------------
# tape paths


def _tape_features(tape: Tape, x: np.ndarray, bb_nodes: list[int], theta_node: int | None,
                   layout: AdapterLayout | None) -> int:
    it = iter(bb_nodes)
    w_in, b_in = next(it), next(it)
    h = tape.add(tape.matmul(tape.const(x), w_in), b_in)
    segs = layout.segments if layout is not None else ()
    for layer in range(len(bb_nodes) // 4):
        w1, b1, w2, b2 = next(it), next(it), next(it), next(it)
        out = tape.add(tape.matmul(tape.relu(tape.add(tape.matmul(h, w1), b1)), w2), b2)
        if theta_node is not None:
            down, up = segs[2 * layer], segs[2 * layer + 1]
            wd = tape.view(theta_node, down.offset, down.shape)
            wu = tape.view(theta_node, up.offset, up.shape)
            out = tape.add(out, tape.matmul(tape.relu(tape.matmul(h, wd)), wu))
        h = tape.add(h, out)
    return h


@dataclass
class TaskHead:
    """Head over the current task's classes, used only while training.

    With ``scale`` set it is a cosine classifier: logits are ``scale`` times the
    cosine between the feature and each weight column, and ``b`` is unused.
    """

    w: np.ndarray
    b: np.ndarray
    scale: float | None = None

    @classmethod
    def init(cls, d: int, n_classes: int, rng: np.random.Generator, scale: float | None = None) -> "TaskHead":
        return cls(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, n_classes)), np.zeros(n_classes), scale)

    def logits(self, feats: np.ndarray) -> np.ndarray:
        if self.scale is None:
            return feats @ self.w + self.b
        f = feats / np.sqrt((feats * feats).sum(axis=1, keepdims=True) + 1e-12)
        w = self.w / np.sqrt((self.w * self.w).sum(axis=0, keepdims=True) + 1e-12)
        return self.scale * (f @ w)


def _head_logits(tape: Tape, feats: int, head: TaskHead, head_nodes: tuple[int, int]) -> int:
    if head.scale is None:
        return tape.add(tape.matmul(feats, head_nodes[0]), head_nodes[1])
    cos = tape.matmul(tape.normalize(feats, axis=1), tape.normalize(head_nodes[0], axis=0))
    return tape.scale(cos, head.scale)


def task_loss(tape: Tape, theta_node: int, x: np.ndarray, y: np.ndarray, backbone: Backbone,
              layout: AdapterLayout, head: TaskHead, head_nodes: tuple[int, int] | None = None) -> int:
    """Mean cross-entropy of the adapted model; backbone weights are detached."""
    bb_nodes = [tape.const(a) for a in backbone.arrays()]
    feats = _tape_features(tape, x, bb_nodes, theta_node, layout)
    if head_nodes is None:
        head_nodes = (tape.const(head.w), tape.const(head.b))
    return tape.cross_entropy(_head_logits(tape, feats, head, head_nodes), y)


def backbone_loss_tape(backbone: Backbone, x: np.ndarray, y: np.ndarray, head: TaskHead,
                       theta: ParameterVector | None = None, train_backbone: bool = True):
    """Build a loss with backbone weights as leaves; returns (tape, loss, backbone nodes, head nodes, theta node)."""
    tape = Tape()
    bb_nodes = [tape.leaf(a, requires_grad=train_backbone) for a in backbone.arrays()]
    theta_node = tape.leaf(theta.data) if theta is not None else None
    feats = _tape_features(tape, x, bb_nodes, theta_node, theta.layout if theta is not None else None)
    hw, hb = tape.leaf(head.w), tape.leaf(head.b)
    loss = tape.cross_entropy(_head_logits(tape, feats, head, (hw, hb)), y)
    return tape, loss, bb_nodes, (hw, hb), theta_node


def pretrain_backbone(x: np.ndarray, y: np.ndarray, epochs: int, seed: int, d: int = 32,
                      n_layers: int = 2, lr: float = 0.01, momentum: float = 0.9,
                      batch_size: int = 48, return_head: bool = False):
    """Train backbone + throwaway linear head with momentum SGD, then freeze.

    ``epochs == 0`` yields the frozen random initialization.  With
    ``return_head`` the trained head is returned alongside the backbone.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise ConfigurationError("pretraining dataset is empty")
    classes, y_local = np.unique(y, return_inverse=True)
    rng = np.random.default_rng(seed)
    backbone = init_backbone(x.shape[1], d, n_layers, rng)
    head = TaskHead.init(d, len(classes), rng)
    params = backbone.arrays() + [head.w, head.b]
    velocity = [np.zeros_like(p) for p in params]
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            tape, loss, bb_nodes, head_nodes, _ = backbone_loss_tape(backbone, x[idx], y_local[idx], head)
            grads = tape.backward(loss)
            nodes = bb_nodes + list(head_nodes)
            for p, v, node in zip(params, velocity, nodes):
                v *= momentum
                v += grads[node]
                p -= lr * v
    backbone.freeze()
    return (backbone, head) if return_head else backbone


def head_accuracy(backbone: Backbone, head: TaskHead, x: np.ndarray, y_local: np.ndarray,
                  theta: ParameterVector | None = None) -> float:
    logits = head.logits(extract_features(x, backbone, theta))
    return float(np.mean(np.argmax(logits, axis=1) == y_local))


def as_vector(data, layout: AdapterLayout) -> ParameterVector:
    return ParameterVector(as_tensor(data), layout)

