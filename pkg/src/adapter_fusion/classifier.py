"""Cosine prototype classifier with Gaussian pseudo-feature alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ClassGaussian",
    "ClassPrototype",
    "DegenerateClassError",
    "VARIANCE_FLOOR",
    "align_old_prototypes",
    "classify",
    "classify_batch",
    "compute_prototype",
    "fit_gaussian",
    "prototype_matrix",
]

VARIANCE_FLOOR = 1e-6


class DegenerateClassError(ValueError):
    pass


@dataclass(frozen=True)
class ClassPrototype:
    class_id: int
    w: np.ndarray


@dataclass(frozen=True)
class ClassGaussian:
    class_id: int
    mu: np.ndarray
    var: np.ndarray


def compute_prototype(features, class_id: int = 0) -> ClassPrototype:
    """L2-normalised centroid of the class features."""
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if feats.shape[0] == 0:
        raise ValueError("cannot build a prototype from zero features")
    centroid = feats.mean(axis=0)
    norm = np.linalg.norm(centroid)
    if norm == 0.0:
        raise DegenerateClassError(f"class {class_id} has a zero centroid")
    return ClassPrototype(class_id, centroid / norm)


def fit_gaussian(features, class_id: int = 0, variance_floor: float = VARIANCE_FLOOR) -> ClassGaussian:
    """Per-dimension mean and unbiased variance, floored at ``variance_floor``."""
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if feats.shape[0] == 0:
        raise ValueError("cannot fit a Gaussian to zero features")
    mu = feats.mean(axis=0)
    if feats.shape[0] < 2:
        var = np.full(mu.shape, variance_floor)
    else:
        var = np.maximum(feats.var(axis=0, ddof=1), variance_floor)
    return ClassGaussian(class_id, mu, var)


def align_old_prototypes(gaussians: dict[int, ClassGaussian], samples_per_class: int,
                         seed: int) -> dict[int, ClassPrototype]:
    """Rebuild each stored class prototype from pseudo-features drawn from its Gaussian.

    Classes are visited in ascending id order from one generator, so the result
    depends only on (gaussians, samples_per_class, seed).
    """
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    out = {}
    for cid in sorted(gaussians):
        g = gaussians[cid]
        noise = rng.standard_normal((samples_per_class, g.mu.size))
        out[cid] = compute_prototype(g.mu + noise * np.sqrt(g.var), cid)
    return out


def prototype_matrix(prototypes: dict[int, ClassPrototype]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array(sorted(prototypes), dtype=np.int64)
    return ids, np.stack([prototypes[c].w for c in ids]) if len(ids) else np.empty((0, 0))


def classify(feature, prototypes: dict[int, ClassPrototype]) -> int:
    """Class whose prototype has the largest cosine similarity; ties go to the smallest id."""
    if not prototypes:
        raise ValueError("no prototypes to classify against")
    f = np.asarray(feature, dtype=np.float64).ravel()
    norm = np.linalg.norm(f)
    if norm == 0.0:
        raise ValueError("cannot classify a zero feature vector")
    ids, w = prototype_matrix(prototypes)
    # argmax returns the first maximum and ids are sorted ascending
    return int(ids[int(np.argmax(w @ (f / norm)))])


def classify_batch(features: np.ndarray, prototypes: dict[int, ClassPrototype]) -> np.ndarray:
    if not prototypes:
        raise ValueError("no prototypes to classify against")
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot classify a zero feature vector")
    ids, w = prototype_matrix(prototypes)
    return ids[np.argmax((feats / norms) @ w.T, axis=1)]
