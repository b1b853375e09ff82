"""Fisher-scaled element-wise fusion of task adapters into a global adapter.

The global adapter is updated as ``beta * theta_p + beta * theta_prev +
(1 - 2 beta) * theta_t`` where ``beta`` comes from a closed-form minimiser of a
second-order model of the post-fusion loss plus a parameter-shift penalty.
Curvature is approximated by a rescaled Fisher diagonal so it is always >= 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import ConfigurationError, LayoutError, ParameterVector
from .stats import FusionStatistics

__all__ = [
    "BetaVector",
    "DiagonalGaussian",
    "FusionConfig",
    "GlobalState",
    "beta_from_curvature",
    "beta_oracle_grid_search",
    "compute_beta",
    "fuse",
    "fuse_gamma",
    "gaussian_kl",
    "kl_additivity_check",
    "scaled_curvature",
    "update_running_average",
    "verify_constraint",
    "verify_delta_relation",
]

CLIP_LO = 0.001
CLIP_HI = 0.499


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 1.25
    gamma: float = 0.5
    clip_lo: float = CLIP_LO
    clip_hi: float = CLIP_HI
    denom_epsilon: float = 1e-12
    per_layer_stats: bool = False  # experimental

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be > 0, got {self.alpha}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.clip_lo < self.clip_hi < 0.5:
            raise ConfigurationError(f"need clip_lo < clip_hi < 0.5, got [{self.clip_lo}, {self.clip_hi}]")
        if not self.denom_epsilon >= 0:
            raise ConfigurationError("denom_epsilon must be >= 0")


@dataclass(eq=False)
class BetaVector:
    values: ParameterVector
    pre_clip: np.ndarray
    clip_lo_count: int = 0
    clip_hi_count: int = 0
    denominator_fallbacks: int = 0
    degenerate_fisher: bool = False

    def summary(self) -> dict:
        v = self.values.data
        return {
            "min": float(v.min()),
            "mean": float(v.mean()),
            "max": float(v.max()),
            "count": int(v.size),
            "clipped_low": self.clip_lo_count,
            "clipped_high": self.clip_hi_count,
            "denominator_fallbacks": self.denominator_fallbacks,
            "degenerate_fisher": self.degenerate_fisher,
        }


@dataclass(eq=False)
class GlobalState:
    theta_star: ParameterVector
    theta_avg: ParameterVector
    task_index: int = 0

    @classmethod
    def initial(cls, theta_init: ParameterVector) -> "GlobalState":
        return cls(theta_init.copy(), theta_init.copy(), 0)

    def retained(self) -> dict[str, ParameterVector]:
        return {"theta_star": self.theta_star, "theta_avg": self.theta_avg}


def scaled_curvature(fisher: np.ndarray | ParameterVector, f_min: float, f_mean: float,
                     alpha: float) -> np.ndarray:
    """``alpha * (F - F_min) / (F_mean - F_min) + 1``; constant ``1 + alpha/2`` if F is flat."""
    f = fisher.data if isinstance(fisher, ParameterVector) else np.asarray(fisher, dtype=np.float64)
    if not f_mean > f_min:
        return np.full(f.shape, 1.0 + alpha / 2.0)
    return alpha * (f - f_min) / (f_mean - f_min) + 1.0


def beta_from_curvature(drift: np.ndarray, grad: np.ndarray, curvature: np.ndarray) -> np.ndarray:
    """Unclipped minimiser ``(D - L') / (D (L'' + 1))`` with D = theta_p + theta_prev - 2 theta_t."""
    return (drift - grad) / (drift * (curvature + 1.0))


def _fisher_beta(drift, grad, fisher, f_min, f_mean, alpha):
    spread = f_mean - f_min
    return spread * (drift - grad) / (drift * (alpha * fisher - alpha * f_min + 2.0 * f_mean - 2.0 * f_min))


def compute_beta(theta_p: ParameterVector, theta_prev_star: ParameterVector, theta_t: ParameterVector,
                 stats: FusionStatistics, cfg: FusionConfig | None = None, *,
                 _clip_override: tuple[float, float] | None = None) -> BetaVector:
    """Element-wise fusion coefficient from the Fisher-rescaled closed form, then clipped."""
    cfg = cfg or FusionConfig()
    theta_t.check_layout(theta_p, theta_prev_star, stats.grad)
    drift = theta_p.data + theta_prev_star.data - 2.0 * theta_t.data
    grad = stats.grad.data
    fisher = stats.fisher.data

    if cfg.per_layer_stats:
        curvature = np.empty_like(fisher)
        segs = theta_t.layout.segments
        degenerate = False
        for i in range(0, len(segs), 2):
            lo, hi = segs[i].offset, segs[i + 1].offset + segs[i + 1].size
            fmn, fmean = float(fisher[lo:hi].min()), float(fisher[lo:hi].mean())
            degenerate |= not fmean > fmn
            curvature[lo:hi] = scaled_curvature(fisher[lo:hi], fmn, fmean, cfg.alpha)
    else:
        degenerate = not stats.f_mean > stats.f_min
        curvature = scaled_curvature(fisher, stats.f_min, stats.f_mean, cfg.alpha)

    small = np.abs(drift) < cfg.denom_epsilon
    safe_drift = np.where(small, 1.0, drift)
    with np.errstate(divide="ignore", invalid="ignore"):
        if cfg.per_layer_stats or degenerate:
            pre = beta_from_curvature(safe_drift, grad, curvature)
        else:
            pre = _fisher_beta(safe_drift, grad, fisher, stats.f_min, stats.f_mean, cfg.alpha)
    pre = np.where(small, 1.0 / (curvature + 1.0), pre)

    lo, hi = _clip_override if _clip_override is not None else (cfg.clip_lo, cfg.clip_hi)
    clipped = np.clip(pre, lo, hi)
    return BetaVector(
        values=theta_t.like(clipped),
        pre_clip=pre,
        clip_lo_count=int(np.count_nonzero(pre < lo)),
        clip_hi_count=int(np.count_nonzero(pre > hi)),
        denominator_fallbacks=int(np.count_nonzero(small)),
        degenerate_fisher=bool(degenerate),
    )


def _beta_array(beta) -> np.ndarray:
    if isinstance(beta, BetaVector):
        return beta.values.data
    if isinstance(beta, ParameterVector):
        return beta.data
    return np.asarray(beta, dtype=np.float64)


def _check(theta_p, theta_prev_star, theta_t):
    if isinstance(theta_t, ParameterVector):
        theta_t.check_layout(theta_p, theta_prev_star)
        return theta_p.data, theta_prev_star.data, theta_t.data
    arrs = [np.asarray(v, dtype=np.float64) for v in (theta_p, theta_prev_star, theta_t)]
    if len({a.shape for a in arrs}) != 1:
        raise LayoutError(f"shape mismatch: {[a.shape for a in arrs]}")
    return arrs


def _wrap(template, data):
    return template.like(data) if isinstance(template, ParameterVector) else data


def fuse(theta_p, theta_prev_star, theta_t, beta):
    """``beta * theta_p + beta * theta_prev + (1 - 2 beta) * theta_t``, element-wise."""
    p, prev, cur = _check(theta_p, theta_prev_star, theta_t)
    b = _beta_array(beta)
    return _wrap(theta_t, b * p + b * prev + (1.0 - 2.0 * b) * cur)


def fuse_gamma(theta_p, theta_prev_star, theta_t, beta, gamma: float):
    """Re-weighted fusion ``2 g beta theta_p + 2 (1-g) beta theta_prev + (1 - 2 beta) theta_t``."""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1], got {gamma}")
    p, prev, cur = _check(theta_p, theta_prev_star, theta_t)
    b = _beta_array(beta)
    # (2 * 0.5) * b == b exactly, so gamma = 0.5 is bitwise equal to fuse()
    return _wrap(theta_t, (2.0 * gamma) * b * p + (2.0 * (1.0 - gamma)) * b * prev + (1.0 - 2.0 * b) * cur)


def update_running_average(theta_avg_prev, theta_t, t: int):
    if t < 1:
        raise ValueError(f"running average needs t >= 1, got {t}")
    if isinstance(theta_t, ParameterVector):
        theta_t.check_layout(theta_avg_prev)
        return theta_t.like(((t - 1) / t) * theta_avg_prev.data + (1.0 / t) * theta_t.data)
    return ((t - 1) / t) * np.asarray(theta_avg_prev, dtype=np.float64) + (1.0 / t) * np.asarray(theta_t)


def verify_constraint(theta_p, theta_prev_star, theta_t, theta_star, beta) -> float:
    """Max |shift + theta_prev + theta_p - theta_t - theta_star| with the factored shift.

    The shift is ``(beta - 1)(theta_p + theta_prev - 2 theta_t)``, which does not
    look at ``theta_star``; a corrupted fused vector therefore shows up here.
    """
    p, prev, cur = _check(theta_p, theta_prev_star, theta_t)
    star = theta_star.data if isinstance(theta_star, ParameterVector) else np.asarray(theta_star, dtype=np.float64)
    b = _beta_array(beta)
    shift = (b - 1.0) * (p + prev - 2.0 * cur)
    return float(np.max(np.abs(shift + prev + p - cur - star)))


def verify_delta_relation(theta_p, theta_prev_star, theta_t, beta) -> float:
    """Max |(theta_star - theta_t) - beta / (beta - 1) * shift| for the fused vector."""
    p, prev, cur = _check(theta_p, theta_prev_star, theta_t)
    b = _beta_array(beta)
    star = b * p + b * prev + (1.0 - 2.0 * b) * cur
    shift = star - prev + cur - p
    return float(np.max(np.abs((star - cur) - (b / (b - 1.0)) * shift)))


def fusion_objective(beta: np.ndarray, theta_p: float, theta_prev_star: float, theta_t: float,
                     loss: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Loss gap after fusion plus half the squared parameter shift, as a function of beta."""
    star = beta * theta_p + beta * theta_prev_star + (1.0 - 2.0 * beta) * theta_t
    return loss(star) - loss(np.asarray(theta_t)) + 0.5 * (star - theta_prev_star + theta_t - theta_p) ** 2


def beta_oracle_grid_search(theta_p: float, theta_prev_star: float, theta_t: float,
                            loss: Callable[[np.ndarray], np.ndarray], resolution: int = 100_000) -> float:
    """Brute-force argmin of the fusion objective over beta = k / resolution, 0 < k < resolution."""
    grid = np.arange(1, resolution, dtype=np.float64) / resolution
    values = fusion_objective(grid, theta_p, theta_prev_star, theta_t, loss)
    return float(grid[int(np.argmin(values))])


@dataclass(frozen=True)
class DiagonalGaussian:
    mu: np.ndarray
    var: np.ndarray = field(repr=False)

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).ravel()
        var = np.asarray(self.var, dtype=np.float64).ravel()
        if mu.shape != var.shape:
            raise ValueError(f"mean/variance shape mismatch {mu.shape} vs {var.shape}")
        if np.any(var <= 0):
            raise ValueError("variances must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "var", var)

    @classmethod
    def concat(cls, a: "DiagonalGaussian", b: "DiagonalGaussian") -> "DiagonalGaussian":
        return cls(np.concatenate([a.mu, b.mu]), np.concatenate([a.var, b.var]))


def gaussian_kl(q: DiagonalGaussian, p: DiagonalGaussian) -> float:
    """Closed-form KL(q || p) for diagonal Gaussians."""
    return float(0.5 * np.sum(np.log(p.var / q.var) + (q.var + (q.mu - p.mu) ** 2) / p.var - 1.0))


def _dense_kl(q: DiagonalGaussian, p: DiagonalGaussian) -> float:
    # general multivariate formula on explicit covariance matrices
    sq, sp = np.diag(q.var), np.diag(p.var)
    diff = p.mu - q.mu
    k = q.mu.size
    _, logdet_p = np.linalg.slogdet(sp)
    _, logdet_q = np.linalg.slogdet(sq)
    trace = np.trace(np.linalg.solve(sp, sq))
    maha = diff @ np.linalg.solve(sp, diff)
    return float(0.5 * (trace + maha - k + logdet_p - logdet_q))


def kl_additivity_check(q_s: DiagonalGaussian, p_init: DiagonalGaussian, q_g: DiagonalGaussian,
                        q_g_prev: DiagonalGaussian) -> float:
    """|KL(q_s x q_g || p_init x q_g_prev) - KL(q_s || p_init) - KL(q_g || q_g_prev)|."""
    joint = _dense_kl(DiagonalGaussian.concat(q_s, q_g), DiagonalGaussian.concat(p_init, q_g_prev))
    return abs(joint - gaussian_kl(q_s, p_init) - gaussian_kl(q_g, q_g_prev))
