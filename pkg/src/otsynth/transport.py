"""Entropic optimal transport between feature sets and centroid sets.

``sinkhorn`` computes the entropic-regularized coupling by alternating
marginal scaling; with ``log_domain`` on (the default) the updates run on
dual potentials, which stays stable at regularization strengths far below
the cost scale. ``exact_ot_small`` is an unregularized reference solver
(transportation simplex) meant for small test instances only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateMarginal, InstanceTooLarge, NonFiniteCost,
                     ShapeMismatch, ZeroNormVector)
from .numerics import validate_mass


@dataclass
class SinkhornConfig:
    """Solver knobs: regularization strength, stopping rule, update domain."""

    epsilon: float = 0.05
    max_iterations: int = 2000
    marginal_tol: float = 1e-6
    log_domain: bool = True
    # Warm-start the potentials through a geometric epsilon ladder before
    # iterating at the target epsilon. Changes iteration count, not the
    # fixed point.
    epsilon_scaling: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.marginal_tol <= 0:
            raise ValueError("marginal_tol must be > 0")


@dataclass
class TransportPlan:
    """Nonnegative coupling with its target marginals and solver status."""

    entries: np.ndarray          # (N, K), nonnegative
    row_marginal: np.ndarray     # (N,)
    col_marginal: np.ndarray     # (K,)
    converged: bool
    iterations_used: int
    marginal_tol: float = 1e-6

    def row_residual(self) -> float:
        return float(np.max(np.abs(self.entries.sum(axis=1) - self.row_marginal)))

    def col_residual(self) -> float:
        return float(np.max(np.abs(self.entries.sum(axis=0) - self.col_marginal)))


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _sinkhorn_log(C, r, c, eps, tol, max_iter):
    """Dual-potential iteration; returns (plan, converged, iterations)."""
    log_r = np.log(r)
    log_c = np.log(c)
    f = np.zeros(len(r))
    g = np.zeros(len(c))
    it = 0

    # Geometric ladder from a softer epsilon down to the target; each rung
    # runs a couple of sweeps purely to warm-start f and g.
    ladder = []
    e = float(np.max(C)) / 2.0
    while e > eps * 1.5:
        ladder.append(e)
        e /= 2.0

    def sweep(e):
        nonlocal f, g
        f = e * (log_r - _logsumexp((g[None, :] - C) / e, axis=1))
        g = e * (log_c - _logsumexp((f[:, None] - C) / e, axis=0))

    for e in ladder:
        for _ in range(2):
            if it >= max_iter:
                break
            sweep(e)
            it += 1

    converged = False
    while it < max_iter:
        sweep(eps)
        it += 1
        P = np.exp((f[:, None] + g[None, :] - C) / eps)
        if (np.max(np.abs(P.sum(axis=1) - r)) <= tol
                and np.max(np.abs(P.sum(axis=0) - c)) <= tol):
            converged = True
            break
    P = np.exp((f[:, None] + g[None, :] - C) / eps)
    return P, converged, it


def _sinkhorn_scaling(C, r, c, eps, tol, max_iter):
    """Classic kernel-scaling iteration, adequate for moderate epsilon."""
    K = np.exp(-C / eps)
    u = np.ones(len(r))
    v = np.ones(len(c))
    converged = False
    it = 0
    while it < max_iter:
        u = r / (K @ v)
        v = c / (K.T @ u)
        it += 1
        P = u[:, None] * K * v[None, :]
        if (np.max(np.abs(P.sum(axis=1) - r)) <= tol
                and np.max(np.abs(P.sum(axis=0) - c)) <= tol):
            converged = True
            break
    P = u[:, None] * K * v[None, :]
    return P, converged, it


def sinkhorn(cost, r, c, cfg: SinkhornConfig | None = None) -> TransportPlan:
    """Entropic OT plan between row marginal ``r`` and column marginal ``c``.

    Zero-mass rows/columns are excluded from the solve and restored as zero
    plan rows/columns afterwards, so empty clusters upstream are harmless.
    Non-convergence within ``max_iterations`` is reported through the
    ``converged`` flag rather than an exception.
    """
    if cfg is None:
        cfg = SinkhornConfig()
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise ShapeMismatch(f"cost must be 2-D, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise NonFiniteCost("cost matrix contains NaN or Inf")
    r = np.asarray(r, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if C.shape != (len(r), len(c)):
        raise ShapeMismatch(
            f"cost shape {C.shape} does not match marginals ({len(r)}, {len(c)})")
    if r.sum() <= 0 or c.sum() <= 0:
        raise DegenerateMarginal("marginal with zero total mass")
    validate_mass(r, name="row marginal")
    validate_mass(c, name="column marginal")

    rows = np.flatnonzero(r > 0)
    cols = np.flatnonzero(c > 0)
    Cs = C[np.ix_(rows, cols)]
    rs = r[rows]
    cs = c[cols]

    if cfg.log_domain:
        solver = _sinkhorn_log if cfg.epsilon_scaling else _sinkhorn_log_plain
    else:
        solver = _sinkhorn_scaling
    Ps, converged, used = solver(
        Cs, rs, cs, cfg.epsilon, cfg.marginal_tol, cfg.max_iterations)

    P = np.zeros_like(C)
    P[np.ix_(rows, cols)] = Ps
    return TransportPlan(entries=P, row_marginal=r, col_marginal=c,
                         converged=converged, iterations_used=used,
                         marginal_tol=cfg.marginal_tol)


def _sinkhorn_log_plain(C, r, c, eps, tol, max_iter):
    """Log-domain iteration without the warm-start ladder."""
    log_r = np.log(r)
    log_c = np.log(c)
    f = np.zeros(len(r))
    g = np.zeros(len(c))
    converged = False
    it = 0
    while it < max_iter:
        f = eps * (log_r - _logsumexp((g[None, :] - C) / eps, axis=1))
        g = eps * (log_c - _logsumexp((f[:, None] - C) / eps, axis=0))
        it += 1
        P = np.exp((f[:, None] + g[None, :] - C) / eps)
        if (np.max(np.abs(P.sum(axis=1) - r)) <= tol
                and np.max(np.abs(P.sum(axis=0) - c)) <= tol):
            converged = True
            break
    P = np.exp((f[:, None] + g[None, :] - C) / eps)
    return P, converged, it


def ot_loss(plan: TransportPlan, cost) -> float:
    """Transport cost <P, C> of a fixed plan."""
    C = np.asarray(cost, dtype=np.float64)
    if C.shape != plan.entries.shape:
        raise ShapeMismatch(
            f"plan shape {plan.entries.shape} vs cost shape {C.shape}")
    return float(np.sum(plan.entries * C))


def ot_loss_grad_centroids(real_feats, centroids, plan: TransportPlan) -> np.ndarray:
    """Gradient of <P, C(X, E)> with respect to each centroid, P held fixed.

    For cosine cost C_nk = 1 - x_n.e_k / (|x_n||e_k|):

        dC_nk/de_k = -( x_n/(|x_n||e_k|) - (x_n.e_k) e_k / (|x_n||e_k|^3) )

    Returns an array of shape (K, d), one gradient row per centroid.
    """
    X = np.atleast_2d(np.asarray(real_feats, dtype=np.float64))
    E = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    P = plan.entries
    if P.shape != (X.shape[0], E.shape[0]):
        raise ShapeMismatch("plan shape does not match feature/centroid counts")
    nx = np.linalg.norm(X, axis=1)
    ne = np.linalg.norm(E, axis=1)
    if np.any(nx == 0.0) or np.any(ne == 0.0):
        raise ZeroNormVector("zero-norm vector in OT gradient")

    W = P / nx[:, None]                       # (N, K)
    term1 = (W.T @ X) / ne[:, None]           # (K, d)
    dots = X @ E.T                            # (N, K)
    s = np.sum(W * dots, axis=0)              # (K,)
    term2 = E * (s / ne**3)[:, None]          # (K, d)
    return term2 - term1


# ---------------------------------------------------------------------------
# Exact reference solver (transportation simplex), test scale only.
# ---------------------------------------------------------------------------

_MAX_ORACLE_CELLS = 64


def _northwest_corner(r, c):
    """Initial basic feasible solution with exactly n + m - 1 basis cells."""
    n, m = len(r), len(c)
    a = r.copy()
    b = c.copy()
    X = np.zeros((n, m))
    basis = []
    i = j = 0
    while True:
        t = max(min(a[i], b[j]), 0.0)
        X[i, j] = t
        basis.append((i, j))
        a[i] -= t
        b[j] -= t
        if i == n - 1 and j == m - 1:
            break
        if i == n - 1:
            j += 1
        elif j == m - 1:
            i += 1
        elif a[i] < b[j]:
            i += 1
        elif a[i] > b[j]:
            j += 1
        else:
            i += 1  # tie: advance one index only, keeping the basis a tree
    return X, basis


def _solve_duals(C, basis, n, m):
    u = np.full(n, np.nan)
    v = np.full(m, np.nan)
    u[0] = 0.0
    by_row = [[] for _ in range(n)]
    by_col = [[] for _ in range(m)]
    for (i, j) in basis:
        by_row[i].append(j)
        by_col[j].append(i)
    stack = [("r", 0)]
    while stack:
        kind, idx = stack.pop()
        if kind == "r":
            for j in by_row[idx]:
                if np.isnan(v[j]):
                    v[j] = C[idx, j] - u[idx]
                    stack.append(("c", j))
        else:
            for i in by_col[idx]:
                if np.isnan(u[i]):
                    u[i] = C[i, idx] - v[idx]
                    stack.append(("r", i))
    return u, v


def _find_cycle(basis, enter):
    """Unique cycle created by adding ``enter`` to the basis tree."""
    ei, ej = enter
    adj: dict[tuple, list[tuple]] = {}
    for (i, j) in basis:
        adj.setdefault(("r", i), []).append(("c", j))
        adj.setdefault(("c", j), []).append(("r", i))
    # path from the entering cell's column node back to its row node
    start, goal = ("c", ej), ("r", ei)
    prev = {start: None}
    stack = [start]
    while stack:
        node = stack.pop()
        if node == goal:
            break
        for nxt in adj.get(node, ()):
            if nxt not in prev:
                prev[nxt] = node
                stack.append(nxt)
    path = []
    node = goal
    while node is not None:
        path.append(node)
        node = prev[node]
    # cells along enter -> path; signs alternate starting with +enter
    cells = [enter]
    for a, b in zip(path, path[1:]):
        (ka, ia), (kb, ib) = a, b
        cells.append((ia, ib) if ka == "r" else (ib, ia))
    return cells


def exact_ot_small(cost, r, c) -> tuple[np.ndarray, float]:
    """Exact minimizer of <P, C> over the transportation polytope U(r, c).

    Northwest-corner start plus pivoting on positive dual violations
    (transportation simplex). Restricted to N*K <= 64 cells; this is a
    reference oracle for tests, not a production solver.
    """
    C = np.asarray(cost, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if C.shape != (len(r), len(c)):
        raise ShapeMismatch("cost shape does not match marginals")
    if C.size > _MAX_ORACLE_CELLS:
        raise InstanceTooLarge(
            f"{C.size} cells exceeds the {_MAX_ORACLE_CELLS}-cell oracle limit")
    if r.sum() <= 0 or c.sum() <= 0:
        raise DegenerateMarginal("marginal with zero total mass")
    validate_mass(r, name="row marginal")
    validate_mass(c, name="column marginal")

    rows = np.flatnonzero(r > 0)
    cols = np.flatnonzero(c > 0)
    Cs = C[np.ix_(rows, cols)]
    n, m = len(rows), len(cols)

    X, basis = _northwest_corner(r[rows].copy(), c[cols].copy())
    tol = 1e-11 * (1.0 + float(np.max(np.abs(Cs))))
    basis_set = set(basis)
    degenerate_streak = 0

    for _ in range(10_000):
        u, v = _solve_duals(Cs, basis, n, m)
        delta = u[:, None] + v[None, :] - Cs
        for (i, j) in basis:
            delta[i, j] = 0.0
        if degenerate_streak > 50:
            # Bland-style entering cell to break potential cycling
            cand = np.argwhere(delta > tol)
            if cand.size == 0:
                break
            enter = tuple(cand[0])
        else:
            flat = int(np.argmax(delta))
            enter = (flat // m, flat % m)
            if delta[enter] <= tol:
                break
        cells = _find_cycle(basis, enter)
        minus = cells[1::2]
        theta = min(X[cell] for cell in minus)
        leave = min(cell for cell in minus if X[cell] == theta)
        for k, cell in enumerate(cells):
            X[cell] += theta if k % 2 == 0 else -theta
        X[leave] = 0.0
        basis_set.discard(leave)
        basis_set.add(enter)
        basis = sorted(basis_set)
        degenerate_streak = degenerate_streak + 1 if theta <= tol else 0
    else:
        raise RuntimeError("transportation simplex failed to terminate")

    plan = np.zeros_like(C)
    plan[np.ix_(rows, cols)] = np.maximum(X, 0.0)
    value = float(np.sum(plan * C))
    return plan, value
