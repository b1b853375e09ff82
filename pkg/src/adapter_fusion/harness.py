"""Class-incremental task streams, adapter training, strategy runs and metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .classifier import (
    ClassGaussian,
    ClassPrototype,
    align_old_prototypes,
    classify_batch,
    compute_prototype,
    fit_gaussian,
)
from .fusion import (
    BetaVector,
    FusionConfig,
    GlobalState,
    compute_beta,
    fuse,
    fuse_gamma,
    update_running_average,
)
from .model import (
    AdapterLayout,
    Backbone,
    ConfigurationError,
    ParameterVector,
    TaskHead,
    extract_features,
    init_adapter,
    init_backbone,
    pretrain_backbone,
    task_loss,
)
from .numerics import NonFiniteError, Tape
from .stats import FusionStatistics, compute_statistics

log = logging.getLogger(__name__)

__all__ = [
    "AccuracyMatrix",
    "NumericalError",
    "StrategyConfig",
    "Task",
    "TaskStream",
    "build_backbone",
    "build_synthetic_stream",
    "compute_metrics",
    "run_strategy",
    "train_task_adapter",
]

STRATEGIES = ("daf", "static_fusion", "ema", "finetune", "last_task", "daf_gamma")
INITS = ("random", "previous_task", "robust")
HEADS = ("linear", "cosine", "prototype")


class NumericalError(RuntimeError):
    def __init__(self, task_index: int, detail: str):
        super().__init__(f"non-finite parameters at task {task_index}: {detail}")
        self.task_index = task_index


# ---------------------------------------------------------------------------
# task stream


@dataclass(eq=False)
class Task:
    index: int
    classes: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def local_labels(self, y: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.classes, y)


@dataclass(eq=False)
class TaskStream:
    tasks: list[Task]
    pretrain_x: np.ndarray
    pretrain_y: np.ndarray
    pretrain_classes: np.ndarray
    seed: int

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def check_disjoint(self) -> None:
        seen = set(int(c) for c in self.pretrain_classes)
        for task in self.tasks:
            cs = set(int(c) for c in task.classes)
            if cs & seen:
                raise ConfigurationError(f"task {task.index} reuses classes {sorted(cs & seen)}")
            seen |= cs


def build_synthetic_stream(num_tasks: int = 10, classes_per_task: int = 5, dim: int = 16,
                           samples_per_class: int = 40, separation: float = 4.0, seed: int = 1993,
                           pretrain_classes: int = 4, pretrain_samples_per_class: int = 100,
                           test_samples_per_class: int | None = None, nuisance_dim: int = 4,
                           nuisance_scale: float = 2.0, nuisance_per_task: bool = False) -> TaskStream:
    """Gaussian blobs with unit noise; class means are ``separation`` times random unit vectors.

    Class identities are shuffled once with ``seed``; the first
    ``pretrain_classes`` go to the pretraining split, the rest form the tasks.
    Task samples (not pretraining samples) additionally get noise of standard
    deviation ``nuisance_scale`` inside a fixed random ``nuisance_dim``-dimensional
    subspace shared by every task, a domain shift the backbone never saw.  With
    ``nuisance_per_task`` every task draws its own subspace instead.
    """
    if not separation > 0:
        raise ConfigurationError(f"separation must be > 0, got {separation}")
    if num_tasks < 1 or classes_per_task < 1 or samples_per_class < 1 or pretrain_classes < 1:
        raise ConfigurationError("stream sizes must be positive")
    n_test = samples_per_class if test_samples_per_class is None else test_samples_per_class
    total = pretrain_classes + num_tasks * classes_per_task
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((total, dim))
    means = separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    order = rng.permutation(total)
    if not 0 <= nuisance_dim <= dim or nuisance_scale < 0:
        raise ConfigurationError("nuisance_dim must lie in [0, dim] and nuisance_scale >= 0")
    shared = np.linalg.qr(rng.standard_normal((dim, dim)))[0][:, :nuisance_dim]
    bases = [np.linalg.qr(rng.standard_normal((dim, dim)))[0][:, :nuisance_dim] if nuisance_per_task else shared
             for _ in range(num_tasks)]

    def draw(cls_ids, n, basis=None):
        xs = []
        for c in cls_ids:
            x = means[c] + rng.standard_normal((n, dim))
            if basis is not None and nuisance_dim:
                x += nuisance_scale * rng.standard_normal((n, nuisance_dim)) @ basis.T
            xs.append(x)
        ys = [np.full(n, c, dtype=np.int64) for c in cls_ids]
        return np.concatenate(xs), np.concatenate(ys)

    pre_ids = np.sort(order[:pretrain_classes])
    px, py = draw(pre_ids, pretrain_samples_per_class)
    tasks = []
    for t in range(num_tasks):
        ids = np.sort(order[pretrain_classes + t * classes_per_task : pretrain_classes + (t + 1) * classes_per_task])
        xtr, ytr = draw(ids, samples_per_class, bases[t])
        xte, yte = draw(ids, n_test, bases[t])
        tasks.append(Task(t + 1, ids, xtr, ytr, xte, yte))
    stream = TaskStream(tasks, px, py, pre_ids, seed)
    stream.check_disjoint()
    return stream


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class StrategyConfig:
    name: str = "daf"
    strategy: str = "daf"
    init: str = "robust"
    alpha: float = 1.25
    gamma: float = 0.5
    beta_static: float = 1.0 / 3.0
    ema_decay: float = 0.9
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 48
    rank: int = 4
    align_samples: int = 256
    head: str = "prototype"
    head_scale: float = 64.0
    class_stats_adapter: str = "task"  # "task": theta_t features, "global": evaluation adapter
    per_layer_stats: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.init not in INITS:
            raise ConfigurationError(f"unknown init {self.init!r}; expected one of {INITS}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigurationError("ema_decay must lie in [0, 1]")
        if not 0.0 <= self.beta_static <= 0.5:
            raise ConfigurationError("beta_static must lie in [0, 0.5]")
        if self.head not in HEADS:
            raise ConfigurationError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if not self.head_scale > 0:
            raise ConfigurationError("head_scale must be > 0")
        if self.class_stats_adapter not in ("task", "global"):
            raise ConfigurationError(f"class_stats_adapter must be 'task' or 'global', got {self.class_stats_adapter!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.align_samples < 1:
            raise ConfigurationError("epochs/lr must be >= 0, batch_size/align_samples >= 1")
        self.fusion_config()  # validates alpha / gamma

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(alpha=self.alpha, gamma=self.gamma, per_layer_stats=self.per_layer_stats)

    def to_dict(self) -> dict:
        return asdict(self)


def build_backbone(stream: TaskStream, width: int = 32, n_layers: int = 2, epochs: int = 20,
                   seed: int = 0, mode: str = "pretrained") -> Backbone:
    if mode == "pretrained":
        return pretrain_backbone(stream.pretrain_x, stream.pretrain_y, epochs, seed, d=width, n_layers=n_layers)
    if mode == "frozen-random":
        return init_backbone(stream.pretrain_x.shape[1], width, n_layers, np.random.default_rng(seed)).freeze()
    raise ConfigurationError(f"unknown backbone mode {mode!r}")


# ---------------------------------------------------------------------------
# training


def cosine_lr(base: float, epoch: int, epochs: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / epochs))


def _init_head(kind: str, init: ParameterVector, x: np.ndarray, y_local: np.ndarray, backbone: Backbone,
               n_classes: int, scale: float, rng: np.random.Generator) -> TaskHead:
    if kind == "linear":
        return TaskHead.init(backbone.d, n_classes, rng)
    if kind == "cosine":
        return TaskHead.init(backbone.d, n_classes, rng, scale)
    if kind == "prototype":
        feats = extract_features(x, backbone, init)
        w = np.zeros((backbone.d, n_classes))
        for k in range(n_classes):
            if np.any(y_local == k):
                w[:, k] = feats[y_local == k].mean(axis=0)
        return TaskHead(w, np.zeros(n_classes), scale)
    raise ConfigurationError(f"unknown head {kind!r}; expected one of {HEADS}")


def train_task_adapter(init: ParameterVector, x: np.ndarray, y_local: np.ndarray, backbone: Backbone,
                       epochs: int = 20, lr: float = 0.01, batch_size: int = 48, seed: int = 0,
                       momentum: float = 0.9, n_classes: int | None = None, head: str = "linear",
                       head_scale: float = 16.0) -> tuple[ParameterVector, TaskHead]:
    """Momentum SGD on the adapter and a fresh task head, cosine-annealed per epoch.

    ``head`` is ``"linear"`` (trainable affine head), ``"cosine"`` (trainable
    cosine head with logit scale ``head_scale``) or ``"prototype"`` (cosine head
    frozen at the class means of the initial adapter's features, so only the
    adapter can reduce the loss).
    """
    x = np.asarray(x, dtype=np.float64)
    y_local = np.asarray(y_local, dtype=np.int64)
    if x.shape[0] == 0:
        raise ConfigurationError("task dataset is empty")
    if init.layout.d != backbone.d or init.layout.n_layers != backbone.n_layers:
        raise ConfigurationError(f"adapter layout {init.layout} does not fit backbone d={backbone.d}")
    rng = np.random.default_rng(seed)
    n_classes = int(y_local.max()) + 1 if n_classes is None else n_classes
    task_head = _init_head(head, init, x, y_local, backbone, n_classes, head_scale, rng)
    train_head = head != "prototype"
    theta = init.data.copy()
    params = [theta, task_head.w, task_head.b] if train_head else [theta]
    velocity = [np.zeros_like(p) for p in params]
    n = x.shape[0]
    for epoch in range(epochs):
        step = cosine_lr(lr, epoch, epochs)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            tape = Tape()
            t_node = tape.leaf(theta)
            h_nodes = (tape.leaf(task_head.w, train_head), tape.leaf(task_head.b, train_head))
            loss = task_loss(tape, t_node, x[idx], y_local[idx], backbone, init.layout, task_head, h_nodes)
            grads = tape.backward(loss)
            for p, v, node in zip(params, velocity, (t_node, *h_nodes)):
                v *= momentum
                v += grads[node]
                p -= step * v
    return init.like(theta), task_head


# ---------------------------------------------------------------------------
# metrics


class AccuracyMatrix:
    """Lower-triangular ``A[t, j]`` = accuracy on task j after training task t (1-based)."""

    def __init__(self, num_tasks: int):
        self.values = np.full((num_tasks, num_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows: list[list[float]]) -> "AccuracyMatrix":
        m = cls(len(rows))
        for t, row in enumerate(rows):
            if len(row) != t + 1:
                raise ValueError(f"row {t + 1} must have {t + 1} entries, got {len(row)}")
            m.values[t, : t + 1] = row
        return m

    @property
    def num_tasks(self) -> int:
        return self.values.shape[0]

    def set(self, t: int, j: int, acc: float) -> None:
        if not 1 <= j <= t <= self.num_tasks:
            raise IndexError(f"A[{t},{j}] is outside the lower triangle")
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        self.values[t - 1, j - 1] = acc

    def rows(self) -> list[list[float]]:
        return [[float(v) for v in self.values[t, : t + 1]] for t in range(self.num_tasks)]

    def is_complete(self) -> bool:
        tri = self.values[np.tril_indices(self.num_tasks)]
        return bool(np.all(np.isfinite(tri)))

    def __eq__(self, other) -> bool:
        return isinstance(other, AccuracyMatrix) and np.array_equal(self.values, other.values, equal_nan=True)

    def to_csv(self) -> str:
        lines = ["t," + ",".join(f"task_{j}" for j in range(1, self.num_tasks + 1))]
        for t in range(self.num_tasks):
            cells = [repr(float(v)) if j <= t else "" for j, v in enumerate(self.values[t])]
            lines.append(f"{t + 1}," + ",".join(cells))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyMatrix":
        rows = []
        for line in text.strip().splitlines()[1:]:
            cells = line.split(",")[1:]
            rows.append([float(c) for c in cells if c != ""])
        return cls.from_rows(rows)


def compute_metrics(a: AccuracyMatrix) -> dict:
    """Average, final, stability (None for one task) and plasticity accuracy."""
    if not a.is_complete():
        raise ValueError("accuracy matrix lower triangle is incomplete")
    v = a.values
    T = a.num_tasks
    avg = sum(sum(v[t, j] for j in range(t + 1)) / (t + 1) for t in range(T)) / T
    final = sum(v[T - 1, j] for j in range(T)) / T
    stability = sum(v[T - 1, j] for j in range(T - 1)) / (T - 1) if T > 1 else None
    plasticity = sum(v[j, j] for j in range(T)) / T
    return {
        "avg_acc": float(avg),
        "final_acc": float(final),
        "stability": None if stability is None else float(stability),
        "plasticity": float(plasticity),
    }


# ---------------------------------------------------------------------------
# strategy runs


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0])


def _expected_carry(cfg: StrategyConfig) -> set[str]:
    keys = {"theta_star", "theta_avg"}
    if cfg.init == "previous_task":
        keys.add("theta_prev_task")
    return keys


def _check_finite(t: int, **vectors: ParameterVector) -> None:
    for name, vec in vectors.items():
        if not np.all(np.isfinite(vec.data)):
            raise NumericalError(t, name)


@dataclass
class FusionRecord:
    """Inputs and output of one fusion step, kept only when recording is requested."""

    theta_p: ParameterVector
    theta_prev_star: ParameterVector
    theta_t: ParameterVector
    stats: FusionStatistics | None
    theta_star: ParameterVector


@dataclass
class RunResult:
    accuracy: AccuracyMatrix
    report: dict
    state: GlobalState
    prototypes: dict[int, ClassPrototype] = field(default_factory=dict)
    gaussians: dict[int, ClassGaussian] = field(default_factory=dict)
    last_fusion: FusionRecord | None = None


def run_strategy(stream: TaskStream, cfg: StrategyConfig, backbone: Backbone | None = None,
                 record_fusion: bool = False) -> RunResult:
    """Run one continual-learning strategy over the whole stream."""
    if backbone is None:
        backbone = build_backbone(stream, seed=cfg.seed)
    if not backbone.frozen:
        raise ConfigurationError("backbone must be frozen before continual training")
    digest_before = backbone.digest()
    layout = AdapterLayout(backbone.d, cfg.rank, backbone.n_layers)
    fcfg = cfg.fusion_config()
    init_rng = np.random.default_rng(_seed(cfg.seed, 0))
    theta_init = init_adapter(layout, init_rng)

    state = GlobalState.initial(theta_init)
    carry: dict[str, ParameterVector] = state.retained()
    if cfg.init == "previous_task":
        carry["theta_prev_task"] = theta_init
    expected = _expected_carry(cfg)

    gaussians: dict[int, ClassGaussian] = {}
    prototypes: dict[int, ClassPrototype] = {}
    acc = AccuracyMatrix(stream.num_tasks)
    task_reports = []
    last_fusion = None

    for task in stream.tasks:
        t = task.index
        if t == 1:
            theta_p = theta_init
        elif cfg.init == "random":
            theta_p = init_adapter(layout, init_rng)
        elif cfg.init == "previous_task":
            theta_p = carry["theta_prev_task"]
        else:
            theta_p = carry["theta_avg"]
        theta_p = theta_p.copy()

        y_local = task.local_labels(task.y_train)
        try:
            theta_t, head = train_task_adapter(
                theta_p, task.x_train, y_local, backbone, epochs=cfg.epochs, lr=cfg.lr,
                batch_size=cfg.batch_size, seed=_seed(cfg.seed, t, 1), momentum=cfg.momentum,
                n_classes=len(task.classes), head=cfg.head, head_scale=cfg.head_scale,
            )
        except NonFiniteError as exc:
            raise NumericalError(t, str(exc)) from exc
        _check_finite(t, theta_t=theta_t)

        prev_star = carry["theta_star"]
        beta: BetaVector | None = None
        stats = None
        if cfg.strategy in ("daf", "daf_gamma"):
            try:
                stats = compute_statistics(theta_t, task.x_train, y_local, backbone, head)
            except NonFiniteError as exc:
                raise NumericalError(t, str(exc)) from exc
            beta = compute_beta(theta_p, prev_star, theta_t, stats, fcfg)
            if cfg.strategy == "daf":
                star = fuse(theta_p, prev_star, theta_t, beta)
            else:
                star = fuse_gamma(theta_p, prev_star, theta_t, beta, cfg.gamma)
        elif cfg.strategy == "static_fusion":
            star = fuse(theta_p, prev_star, theta_t, np.full(layout.size, cfg.beta_static))
        elif cfg.strategy == "ema":
            star = theta_t.like(cfg.ema_decay * prev_star.data + (1.0 - cfg.ema_decay) * theta_t.data)
        else:
            star = theta_t.copy()
        avg = update_running_average(carry["theta_avg"], theta_t, t)
        _check_finite(t, theta_star=star, theta_avg=avg)
        state = GlobalState(star, avg, t)

        if record_fusion:
            last_fusion = FusionRecord(theta_p, prev_star, theta_t, stats, star)

        eval_theta = theta_t if cfg.strategy == "last_task" else star
        stats_theta = theta_t if cfg.class_stats_adapter == "task" else eval_theta
        feats = extract_features(task.x_train, backbone, stats_theta)
        current = {}
        for cid in task.classes:
            cf = feats[task.y_train == cid]
            gaussians[int(cid)] = fit_gaussian(cf, int(cid))
            current[int(cid)] = compute_prototype(cf, int(cid))
        old = {c: g for c, g in gaussians.items() if c not in current}
        prototypes = align_old_prototypes(old, cfg.align_samples, _seed(cfg.seed, t, 2))
        prototypes.update(current)

        for j_task in stream.tasks[:t]:
            pred = classify_batch(extract_features(j_task.x_test, backbone, eval_theta), prototypes)
            acc.set(t, j_task.index, float(np.mean(pred == j_task.y_test)))

        # cleanup: only the global state (plus the previous adapter for that init) crosses tasks
        carry = state.retained()
        if cfg.init == "previous_task":
            carry["theta_prev_task"] = theta_t
        del theta_t, head, stats
        audit_ok = set(carry) == expected and all(v.layout == layout for v in carry.values())

        entry = {"task": t, "memory_audit": audit_ok, "retained": sorted(carry)}
        if beta is not None:
            entry["beta"] = beta.summary()
            if beta.degenerate_fisher:
                log.warning("task %d: flat Fisher diagonal, using midpoint curvature", t)
            if beta.denominator_fallbacks:
                log.warning("task %d: %d coordinates used the 1/(L''+1) fallback", t, beta.denominator_fallbacks)
        task_reports.append(entry)

    digest_after = backbone.digest()
    metrics = compute_metrics(acc)
    report = {
        "name": cfg.name,
        "strategy": cfg.to_dict(),
        "stream": {"num_tasks": stream.num_tasks, "seed": stream.seed},
        "metrics": metrics,
        "accuracy": acc.rows(),
        "tasks": task_reports,
        "audits": {
            "memory": all(e["memory_audit"] for e in task_reports),
            "backbone_frozen": digest_before == digest_after,
            "backbone_sha256": digest_after,
            "beta_in_range": all(
                e["beta"]["min"] >= fcfg.clip_lo and e["beta"]["max"] <= fcfg.clip_hi
                for e in task_reports if "beta" in e
            ),
        },
    }
    return RunResult(acc, report, state, prototypes, dict(gaussians), last_fusion)
