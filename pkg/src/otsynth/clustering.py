"""K-means++ seeding and Lloyd iteration over synthetic feature batches.

The cluster sizes double as the column marginal of the transport problem:
``cluster_mass`` turns per-cluster counts into a probability vector. The
metric is squared Euclidean distance throughout (standard K-means); the
cosine geometry lives in the transport cost, not here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AllEmpty, EmptyInput
from .rng import RngState


@dataclass
class ClusterResult:
    """Centroids plus the assignment bookkeeping the OT marginal needs."""

    centroids: np.ndarray        # (K, d)
    assignment: np.ndarray       # (M,) cluster index per point
    counts: np.ndarray           # (K,) points per cluster
    mass: np.ndarray             # (K,) counts / M
    inertia: float               # sum of squared distances to assigned centroids
    inertia_history: list[float] = field(default_factory=list)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, shape (M, K), clipped at zero."""
    d2 = (np.sum(points**2, axis=1)[:, None]
          + np.sum(centroids**2, axis=1)[None, :]
          - 2.0 * points @ centroids.T)
    return np.maximum(d2, 0.0)


def _label_sums(X: np.ndarray, assign: np.ndarray, k: int) -> np.ndarray:
    """Per-cluster coordinate sums with a fixed accumulation order."""
    return np.stack(
        [np.bincount(assign, weights=X[:, j], minlength=k)
         for j in range(X.shape[1])], axis=1)


def kmeans_pp_init(points, k: int, rng: RngState) -> np.ndarray:
    """D^2-weighted seeding: each new centroid is drawn with probability
    proportional to its squared distance from the nearest chosen one.

    Points that coincide with an existing centroid have zero selection
    probability as long as any distinct point remains; once every point
    coincides with some centroid, remaining slots are filled uniformly.
    """
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if X.shape[0] == 0:
        raise EmptyInput("kmeans_pp_init needs at least one point")
    if k < 1:
        raise ValueError("k must be >= 1")

    first = int(rng.integers(X.shape[0]))
    chosen = [first]
    d2 = _sq_dists(X, X[first:first + 1])[:, 0]
    while len(chosen) < k:
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(X.shape[0], 1, p=d2 / total)[0])
        else:
            idx = int(rng.integers(X.shape[0]))
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists(X, X[idx:idx + 1])[:, 0])
    return X[chosen].copy()


def kmeans(points, k: int, max_iters: int = 50,
           rng: RngState | None = None) -> ClusterResult:
    """K-means++ init followed by Lloyd iterations.

    Terminates when assignments stabilize or after ``max_iters``. Empty
    clusters are reseeded to the point currently farthest from its
    assigned centroid, keeping K fixed for the transport column dimension.
    Inertia is recorded after every assignment step and never increases.
    """
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    M = X.shape[0]
    if M == 0:
        raise EmptyInput("kmeans needs at least one point")
    if k < 1:
        raise ValueError("k must be >= 1")
    if rng is None:
        rng = RngState(0)

    centroids = kmeans_pp_init(X, k, rng)
    d2 = _sq_dists(X, centroids)
    assign = np.argmin(d2, axis=1)
    history = [float(d2[np.arange(M), assign].sum())]

    for _ in range(max_iters):
        previous = centroids.copy()
        counts = np.bincount(assign, minlength=k)
        # mean update; empty clusters keep their old centroid for now
        sums = _label_sums(X, assign, k)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]

        empty = np.flatnonzero(~nonempty)
        if empty.size:
            # relocate each empty centroid to the worst-served point
            dist_own = _sq_dists(X, centroids)[np.arange(M), assign]
            order = np.argsort(-dist_own, kind="stable")
            for slot, cluster in enumerate(empty):
                centroids[cluster] = X[order[slot % M]]

        d2 = _sq_dists(X, centroids)
        new_assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(M), new_assign].sum()))
        stable = (np.array_equal(new_assign, assign)
                  and np.array_equal(centroids, previous))
        assign = new_assign
        if stable:
            break

    # final mean update against the final assignment (no reseed), so the
    # centroid-equals-member-mean invariant holds on the returned result
    counts = np.bincount(assign, minlength=k)
    sums = _label_sums(X, assign, k)
    nonempty = counts > 0
    centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
    d2 = _sq_dists(X, centroids)
    inertia = float(d2[np.arange(M), assign].sum())
    history.append(inertia)

    return ClusterResult(
        centroids=centroids,
        assignment=assign,
        counts=counts,
        mass=counts / M,
        inertia=inertia,
        inertia_history=history,
    )


def cluster_mass(counts) -> np.ndarray:
    """Normalize per-cluster counts into the OT column marginal."""
    g = np.asarray(counts, dtype=np.float64)
    total = g.sum()
    if total < 1:
        raise AllEmpty("all clusters are empty")
    return g / total
