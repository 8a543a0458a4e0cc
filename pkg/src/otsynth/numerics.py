"""Dense vector primitives: cosine distance, softmax, cross-entropy, sampling.

All functions accept array-likes and compute in float64 regardless of the
input dtype; accumulation therefore stays in double precision, which the
gradient checks elsewhere rely on.
"""

from __future__ import annotations

import numpy as np

from .errors import LabelOutOfRange, ZeroNormVector
from .rng import RngState

# Additive floor applied inside cross_entropy; keeps saturated classifier
# outputs from producing infinite loss.
PROB_FLOOR = 1e-12


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def cosine_distance(u, v) -> float:
    """1 - cos(u, v), clamped to [0, 2] against floating-point drift."""
    u = _as_f64(u)
    v = _as_f64(v)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroNormVector("cosine_distance needs vectors with positive norm")
    d = 1.0 - float(np.dot(u, v)) / (nu * nv)
    return min(max(d, 0.0), 2.0)


def cost_matrix(feats, centroids) -> np.ndarray:
    """Pairwise cosine-distance matrix, shape (n_feats, n_centroids).

    Raises ZeroNormVector naming the index of the first offending row.
    """
    X = np.atleast_2d(_as_f64(feats))
    E = np.atleast_2d(_as_f64(centroids))
    nx = np.linalg.norm(X, axis=1)
    ne = np.linalg.norm(E, axis=1)
    for name, norms in (("feature", nx), ("centroid", ne)):
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise ZeroNormVector(f"{name} {zero[0]} has zero norm")
    C = 1.0 - (X @ E.T) / np.outer(nx, ne)
    return np.clip(C, 0.0, 2.0)


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax over the last axis; rows sum to 1."""
    z = _as_f64(logits)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(probs, label: int) -> float:
    """-log(probs[label] + floor); nonnegative for any valid distribution."""
    p = _as_f64(probs)
    if not 0 <= label < p.shape[-1]:
        raise LabelOutOfRange(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(p[..., label] + PROB_FLOOR))


def batch_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row-wise -log(p[label]) for a (B, C) probability matrix."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise LabelOutOfRange("a label is out of range for the probability matrix")
    picked = probs[np.arange(len(labels)), labels]
    return -np.log(picked + PROB_FLOOR)


def gaussian_sample(rng: RngState, dim: int) -> np.ndarray:
    """``dim`` independent N(0, 1) draws; advances ``rng`` deterministically."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return rng.standard_normal(dim)


def validate_mass(weights, tol: float = 1e-9, name: str = "mass") -> np.ndarray:
    """Check nonnegativity and unit total mass; returns the float64 array."""
    w = _as_f64(weights)
    if np.any(w < 0):
        raise ValueError(f"{name} has negative entries")
    s = float(w.sum())
    if abs(s - 1.0) > tol:
        raise ValueError(f"{name} sums to {s!r}, expected 1 within {tol}")
    return w
