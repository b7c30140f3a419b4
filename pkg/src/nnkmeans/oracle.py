"""Independent brute-force references for the property tests.

Nothing here shares a solve routine with the main code paths: linear
systems go through naive Gaussian elimination instead of Cholesky, and the
kMeans reference is a from-scratch Lloyd iteration. These functions are
exponential or quadratic on purpose and must stay off hot paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .coding import query_atom_similarities
from .errors import DataError
from .kernels import self_similarity

MAX_ENUM_SUPPORT = 12


def _gauss_solve(mat: np.ndarray, rhs: np.ndarray):
    """Partial-pivot Gaussian elimination; None when the system is singular."""
    n = rhs.size
    aug = np.concatenate([mat.astype(np.float64).copy(), rhs.reshape(-1, 1).astype(np.float64)], axis=1)
    scale = max(1.0, float(np.abs(mat).max())) if mat.size else 1.0
    for col in range(n):
        pivot_row = col + int(np.argmax(np.abs(aug[col:, col])))
        if abs(aug[pivot_row, col]) <= 1e-12 * scale:
            return None
        if pivot_row != col:
            aug[[col, pivot_row]] = aug[[pivot_row, col]]
        for row in range(col + 1, n):
            factor = aug[row, col] / aug[col, col]
            aug[row, col:] -= factor * aug[col, col:]
    x = np.zeros(n, dtype=np.float64)
    for row in range(n - 1, -1, -1):
        x[row] = (aug[row, n] - aug[row, row + 1 : n] @ x[row + 1 : n]) / aug[row, row]
    return x


def _quad_objective(gram: np.ndarray, target: np.ndarray, x: np.ndarray) -> float:
    return float(x @ gram @ x - 2.0 * target @ x)


def nnls_enumerate(gram: np.ndarray, target: np.ndarray, max_support: int = MAX_ENUM_SUPPORT) -> np.ndarray:
    """Exact nonnegative minimizer of x'Gx - 2t'x by active-set enumeration.

    Every subset of coordinates is solved as an equality system; feasible
    candidates (entries >= -1e-12, then clamped) compete on the objective.
    The zero vector is always a candidate, so the result is well defined.
    """
    gram = np.asarray(gram, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n = target.size
    if n > max_support:
        raise DataError(f"enumeration over {n} coordinates exceeds the budget of {max_support}")
    best = np.zeros(n, dtype=np.float64)
    best_obj = 0.0
    for mask in range(1, 1 << n):
        idx = [i for i in range(n) if mask >> i & 1]
        sol = _gauss_solve(gram[np.ix_(idx, idx)], target[idx])
        if sol is None or sol.min() < -1e-12:
            continue
        x = np.zeros(n, dtype=np.float64)
        x[idx] = np.maximum(sol, 0.0)
        obj = _quad_objective(gram, target, x)
        if obj < best_obj:
            best_obj = obj
            best = x
    return best


def best_subset_code(query: np.ndarray, dictionary, k: int):
    """Global optimum of the k-sparse nonnegative coding problem.

    Exhausts every support of size at most k (dictionary must have at most
    ``MAX_ENUM_SUPPORT`` atoms) and returns ``(support, weights, error)``
    where error is the kernel-space reconstruction error at the optimum.
    """
    m = dictionary.n_atoms
    if m > MAX_ENUM_SUPPORT:
        raise DataError(f"subset search over {m} atoms exceeds the budget of {MAX_ENUM_SUPPORT}")
    query = np.asarray(query, dtype=np.float64).reshape(-1, 1)
    sims = query_atom_similarities(query, dictionary)[0]
    qss = float(self_similarity(query, dictionary.kernel)[0])
    atom_gram = dictionary.atom_gram

    best = (np.zeros(0, dtype=np.int64), np.zeros(0), qss)
    best_quad = 0.0
    for size in range(1, min(k, m) + 1):
        for subset in combinations(range(m), size):
            idx = np.asarray(subset, dtype=np.int64)
            sol = _gauss_solve(atom_gram[np.ix_(idx, idx)], sims[idx])
            if sol is None or sol.min() < -1e-12:
                continue
            x = np.maximum(sol, 0.0)
            quad = float(x @ atom_gram[np.ix_(idx, idx)] @ x - 2.0 * sims[idx] @ x)
            if quad < best_quad:
                best_quad = quad
                best = (idx, x, max(qss + quad, 0.0))
    return best


@dataclass
class LloydRun:
    """Per-iteration trace of the reference kMeans."""

    assignments_per_iter: list[np.ndarray]
    centroids_per_iter: list[np.ndarray]
    converged: bool


def lloyd_reference(data: np.ndarray, n_centroids: int, seed: int, max_iters: int) -> LloydRun:
    """Textbook Lloyd iterations with the library's seeding and tie rules.

    Initialization draws ``n_centroids`` distinct samples from
    ``default_rng(seed)`` without replacement; assignment ties go to the
    lowest centroid index. An emptied cluster is reseeded onto the
    worst-reconstructed unused sample, mirroring the trainer's policy.
    Stops when assignments repeat.
    """
    data = np.asarray(data, dtype=np.float64)
    d, n = data.shape
    rng = np.random.default_rng(seed)
    sel = rng.choice(n, size=n_centroids, replace=False)
    centroids = data[:, sel].copy()

    assignments_hist: list[np.ndarray] = []
    centroids_hist: list[np.ndarray] = []
    prev = None
    converged = False
    for _ in range(max_iters):
        dist = np.empty((n, n_centroids), dtype=np.float64)
        for m in range(n_centroids):
            diff = data - centroids[:, m][:, None]
            dist[:, m] = np.einsum("ij,ij->j", diff, diff)
        assign = np.argmin(dist, axis=1)
        errors = dist[np.arange(n), assign]

        counts = np.bincount(assign, minlength=n_centroids)
        empty = sorted(int(m) for m in np.flatnonzero(counts == 0))
        if empty:
            order = np.argsort(-errors, kind="stable")
            used = np.zeros(n, dtype=bool)
            ptr = 0
            queue = list(empty)
            while queue:
                m = queue.pop(0)
                while used[order[ptr]]:
                    ptr += 1
                i = int(order[ptr])
                used[i] = True
                old = int(assign[i])
                counts[old] -= 1
                if counts[old] == 0:
                    queue.append(old)
                assign[i] = m
                counts[m] += 1

        for m in range(n_centroids):
            members = np.flatnonzero(assign == m)
            centroids[:, m] = data[:, members].mean(axis=1)

        assignments_hist.append(assign.copy())
        centroids_hist.append(centroids.copy())
        if prev is not None and np.array_equal(assign, prev):
            converged = True
            break
        prev = assign
    return LloydRun(assignments_per_iter=assignments_hist, centroids_per_iter=centroids_hist, converged=converged)
