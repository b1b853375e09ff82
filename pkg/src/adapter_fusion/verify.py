"""Oracle and identity checks behind ``daf verify``.

Every check draws from its own seeded generator and returns a worst-case
residual; a check passes when the residual is within its tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import fusion
from .model import AdapterLayout, ParameterVector, TaskHead, init_backbone, task_loss
from .numerics import Tape, finite_diff_check
from .stats import FusionStatistics, compute_fisher_diagonal

__all__ = ["CheckResult", "CHECKS", "run_checks"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    residual: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.residual <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<22} residual={self.residual:.3e} tol={self.tolerance:.1e} {status}"


def _triples(rng, n, dim):
    for _ in range(n):
        p, prev, cur = rng.normal(size=(3, dim)) * 10 ** rng.uniform(-2, 2)
        yield p, prev, cur, rng.uniform(fusion.CLIP_LO, fusion.CLIP_HI, size=dim)


def check_constraint(rng, **_) -> float:
    worst = 0.0
    for p, prev, cur, beta in _triples(rng, 1000, 128):
        star = fusion.fuse(p, prev, cur, beta)
        worst = max(worst, fusion.verify_constraint(p, prev, cur, star, beta))
    return worst


def check_delta_relation(rng, **_) -> float:
    return max(fusion.verify_delta_relation(p, prev, cur, beta) for p, prev, cur, beta in _triples(rng, 1000, 128))


def _scalar_stats(g, c):
    # coordinate 0 gets gradient g and scaled curvature c at alpha = 1 (F_min = 0, F_mean = 1)
    layout = AdapterLayout(2, 1, 1)
    f0 = c - 1.0
    rest = (4.0 - f0) / 2.0
    return layout, FusionStatistics.from_arrays(ParameterVector(np.array([g, 0, 0, 0.0]), layout),
                                                ParameterVector(np.array([f0, 0, rest, rest]), layout))


def check_beta_oracle(rng, **_) -> float:
    worst = 0.0
    cfg = fusion.FusionConfig(alpha=1.0)
    for _ in range(50):
        th_t = rng.normal()
        d = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 3.0)
        th_p = th_t + rng.uniform(-2, 2)
        th_prev = d + 2 * th_t - th_p
        g = rng.uniform(-0.9, 0.9) * abs(d)
        c = rng.uniform(1.05, 5.0)
        layout, stats = _scalar_stats(g, c)

        def vec(x):
            return ParameterVector(np.array([x, 0, 0, 0.0]), layout)

        closed = fusion.compute_beta(vec(th_p), vec(th_prev), vec(th_t), stats, cfg).pre_clip[0]
        grid = fusion.beta_oracle_grid_search(
            th_p, th_prev, th_t, lambda th: g * (th - th_t) + 0.5 * c * (th - th_t) ** 2, 100_000)
        worst = max(worst, abs(closed - grid))
    return worst


def _random_case(rng, layout):
    n = layout.size
    stats = FusionStatistics.from_arrays(ParameterVector(rng.normal(size=n), layout),
                                         ParameterVector(rng.exponential(size=n), layout))
    p, prev, cur = (ParameterVector(rng.normal(size=n), layout) for _ in range(3))
    return p, prev, cur, stats


def check_beta_forms(rng, **_) -> float:
    layout = AdapterLayout(4, 2, 2)
    worst = 0.0
    for _ in range(100):
        p, prev, cur, stats = _random_case(rng, layout)
        alpha = rng.uniform(0.1, 5.0)
        beta = fusion.compute_beta(p, prev, cur, stats, fusion.FusionConfig(alpha=alpha))
        drift = p.data + prev.data - 2 * cur.data
        curv = fusion.scaled_curvature(stats.fisher, stats.f_min, stats.f_mean, alpha)
        ref = fusion.beta_from_curvature(drift, stats.grad.data, curv)
        worst = max(worst, float(np.max(np.abs(beta.pre_clip - ref) / np.maximum(1.0, np.abs(ref)))))
    return worst


def check_beta_clipping(rng, clip_override=None, **_) -> float:
    """Largest distance of any clipped beta from the allowed interval."""
    layout = AdapterLayout(4, 2, 2)
    worst = 0.0
    for _ in range(100):
        scale = 10 ** rng.uniform(-4, 2)
        p, prev, cur, stats = _random_case(rng, layout)
        cur = cur.like(cur.data * scale)
        v = fusion.compute_beta(p, prev, cur, stats, _clip_override=clip_override).values.data
        below = np.maximum(fusion.CLIP_LO - v, 0.0)
        above = np.maximum(v - fusion.CLIP_HI, 0.0)
        worst = max(worst, float(np.max(below + above)))
    return worst


def check_gamma_reduction(rng, **_) -> float:
    mismatches = 0
    for p, prev, cur, beta in _triples(rng, 200, 64):
        if not np.array_equal(fusion.fuse_gamma(p, prev, cur, beta, 0.5), fusion.fuse(p, prev, cur, beta)):
            mismatches += 1
    return float(mismatches)


def check_kl_additivity(rng, **_) -> float:
    def g(k):
        return fusion.DiagonalGaussian(rng.normal(size=k), rng.uniform(0.1, 3.0, size=k))

    return max(fusion.kl_additivity_check(g(3), g(3), g(5), g(5)) for _ in range(100))


def check_running_average(rng, **_) -> float:
    worst = 0.0
    for length in (1, 2, 7, 20, 50):
        seq = rng.normal(size=(length, 64))
        avg = np.zeros(64)
        for t, v in enumerate(seq, start=1):
            avg = fusion.update_running_average(avg, v, t)
        ref = seq.mean(axis=0)
        worst = max(worst, float(np.linalg.norm(avg - ref) / np.linalg.norm(ref)))
    return worst


def _small_model(rng, scale=None, d_in=5, d=6, r=2, n=8, k=3):
    bb = init_backbone(d_in, d, 2, rng).freeze()
    layout = AdapterLayout(d, r, 2)
    theta = ParameterVector(rng.normal(scale=0.5, size=layout.size), layout)
    head = TaskHead.init(d, k, rng, scale=scale)
    x = rng.normal(size=(n, d_in))
    y = rng.integers(0, k, size=n)
    return bb, layout, theta, head, x, y


def check_gradients(rng, **_) -> float:
    worst = 0.0
    # even configurations use a linear head, odd ones the cosine head
    for i in range(20):
        bb, layout, theta, head, x, y = _small_model(rng, None if i % 2 == 0 else 8.0)
        worst = max(worst, finite_diff_check(
            lambda tape, node: task_loss(tape, node, x, y, bb, layout, head), theta.data))
    return worst


def check_fisher(rng, **_) -> float:
    worst = 0.0
    for i in range(6):
        bb, layout, theta, head, x, y = _small_model(rng, None if i % 2 == 0 else 8.0)
        sq = []
        for i in range(len(y)):
            tape = Tape()
            node = tape.leaf(theta.data)
            sq.append(tape.backward(task_loss(tape, node, x[i : i + 1], y[i : i + 1], bb, layout, head))[node] ** 2)
        ref = np.mean(sq, axis=0)
        worst = max(worst, float(np.max(np.abs(compute_fisher_diagonal(theta, x, y, bb, head).data - ref))))
    return worst


CHECKS: tuple[tuple[str, Callable, float], ...] = (
    ("constraint_identity", check_constraint, 1e-10),
    ("delta_relation", check_delta_relation, 1e-10),
    ("beta_grid_oracle", check_beta_oracle, 2e-5),
    ("beta_form_consistency", check_beta_forms, 1e-12),
    ("beta_clipping", check_beta_clipping, 0.0),
    ("gamma_reduction", check_gamma_reduction, 0.0),
    ("kl_additivity", check_kl_additivity, 1e-10),
    ("running_average", check_running_average, 1e-12),
    ("gradient_fd", check_gradients, 1e-4),
    ("fisher_oracle", check_fisher, 1e-12),
)


def run_checks(seed: int = 0, clip_override: tuple[float, float] | None = None,
               only: list[str] | None = None) -> list[CheckResult]:
    results = []
    for i, (name, fn, tol) in enumerate(CHECKS):
        if only and name not in only:
            continue
        rng = np.random.default_rng([seed, i])
        results.append(CheckResult(name, float(fn(rng, clip_override=clip_override)), tol))
    return results
