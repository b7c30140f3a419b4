"""Non-negative, adaptively sparse coding against a kernel dictionary.

A sample is coded in three moves: rank the atoms by kernel similarity,
solve a small non-negative quadratic program on the top candidates, then
prune near-zero weights. Sparsity adapts by itself: the solver zeroes
candidates that are redundant given the others, so a code may use fewer
than the budgeted number of atoms.

Everything here works on kernel values only; the mapped feature space is
never materialized.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky

from .errors import NnlsMaxIterError, NumericalError
from .kernels import as_feature_matrix, cross_similarity, self_similarity

# Queries are processed in blocks to bound the size of the query-by-support
# similarity scratch matrix.
_BLOCK_ENTRIES = 1 << 24


@dataclass
class SparseCode:
    """One coded sample: positive weights on a small set of atoms.

    ``indices`` are strictly increasing atom ids; ``weights`` are the
    matching strictly positive coefficients. ``query_self_similarity``
    stores kappa(q, q), needed to turn a code into a reconstruction error.
    """

    indices: np.ndarray
    weights: np.ndarray
    query_self_similarity: float

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.indices.shape != self.weights.shape or self.indices.ndim != 1:
            raise ValueError("indices and weights must be aligned 1-D arrays")

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.weights.tolist()))

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def dense(self, n_atoms: int) -> np.ndarray:
        out = np.zeros(n_atoms, dtype=np.float64)
        out[self.indices] = self.weights
        return out


@dataclass(frozen=True)
class CodingConfig:
    """Knobs for the per-sample coding step.

    ``candidate_pool`` widens the candidate set beyond the sparsity budget;
    it defaults to the budget itself (off).
    """

    sparsity: int
    prune_rel_tol: float = 1e-10
    nnls_max_iter: int = 200
    candidate_pool: int | None = None

    def __post_init__(self):
        if self.sparsity < 1:
            raise ValueError(f"sparsity must be >= 1, got {self.sparsity}")
        if not 0.0 < self.prune_rel_tol < 1.0:
            raise ValueError(f"prune_rel_tol must lie in (0, 1), got {self.prune_rel_tol}")
        if self.nnls_max_iter < 1:
            raise ValueError(f"nnls_max_iter must be >= 1, got {self.nnls_max_iter}")
        if self.candidate_pool is not None and self.candidate_pool < self.sparsity:
            raise ValueError("candidate_pool cannot be smaller than the sparsity budget")

    @property
    def pool(self) -> int:
        return self.candidate_pool if self.candidate_pool is not None else self.sparsity


def select_candidates(query_sims: np.ndarray, k: int) -> np.ndarray:
    """Indices of the min(k, M) largest similarities, ascending.

    Ties are broken toward the lowest index, so selection is deterministic.
    """
    sims = np.asarray(query_sims, dtype=np.float64)
    if sims.ndim != 1 or sims.size == 0:
        raise ValueError("empty dictionary: no atom similarities to select from")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    k = min(k, sims.size)
    order = np.argsort(-sims, kind="stable")
    return np.sort(order[:k])


def _chol_solve_psd(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Cholesky solve with one diagonal-jitter retry for PSD matrices."""
    try:
        low = cholesky(mat, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(mat) / mat.shape[0]
        if not jitter > 0:
            raise NumericalError("support matrix has nonpositive trace; cannot stabilize solve") from None
        try:
            low = cholesky(mat + jitter * np.eye(mat.shape[0]), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise NumericalError("support matrix is not positive semidefinite within jitter") from None
    return cho_solve((low, True), rhs, check_finite=False)


def nnls_on_support(gram: np.ndarray, target: np.ndarray, max_iter: int = 200) -> np.ndarray:
    """Minimize  w' G w - 2 t' w  subject to w >= 0 by active-set iteration.

    ``gram`` is the symmetric PSD similarity matrix of the candidate atoms
    and ``target`` their similarities to the query. The returned solution
    satisfies the KKT conditions to within ``1e-8 * max(1, ||target||_inf)``:
    zero residual on positive coordinates, nonnegative residual on the rest.

    The solver warm-starts from the unconstrained solve clipped at zero when
    the full system is cleanly positive definite, and falls back to the
    classic cold start otherwise (which also keeps weight off exactly
    duplicated atoms). Raises NnlsMaxIterError with the best iterate if the
    iteration budget runs out.
    """
    gram = np.asarray(gram, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1] or gram.shape[0] != target.size:
        raise ValueError(f"shape mismatch: gram {gram.shape}, target {target.shape}")
    n = target.size
    if n == 0:
        return np.zeros(0, dtype=np.float64)
    scale = max(1.0, float(np.abs(gram).max()))
    if float(np.abs(gram - gram.T).max()) > 1e-10 * scale:
        raise ValueError("support matrix must be symmetric")

    tol = 1e-8 * max(1.0, float(np.abs(target).max()))
    x = np.zeros(n, dtype=np.float64)
    passive = np.zeros(n, dtype=bool)

    # Warm start: unconstrained solve, clipped. Skipped when the full matrix
    # is not positive definite or the solve is numerically untrustworthy.
    try:
        low = cholesky(gram, lower=True, check_finite=False)
        unc = cho_solve((low, True), target, check_finite=False)
        if np.isfinite(unc).all() and np.abs(gram @ unc - target).max() <= 1e-6 * max(1.0, np.abs(target).max()):
            if unc.min() >= 0.0:
                return unc
            passive = unc > 0.0
            x = np.where(passive, unc, 0.0)
    except np.linalg.LinAlgError:
        pass

    iters = 0
    while True:
        resid = target - gram @ x
        grow = ~passive & (resid > tol)
        stale = passive & (np.abs(resid) > tol)
        if not grow.any() and not stale.any():
            return x
        if not stale.any():
            # Most violating held-at-zero coordinate enters the passive set;
            # np.argmax on the masked residual keeps ties at the lowest index.
            masked = np.where(passive, -np.inf, resid)
            passive[int(np.argmax(masked))] = True
        # Re-solve on the passive set, stepping back to feasibility as needed.
        while True:
            if iters >= max_iter:
                raise NnlsMaxIterError(f"active-set NNLS exceeded {max_iter} iterations", best=x)
            iters += 1
            z = np.zeros(n, dtype=np.float64)
            idx = np.flatnonzero(passive)
            if idx.size:
                z[idx] = _chol_solve_psd(gram[np.ix_(idx, idx)], target[idx])
            if idx.size == 0 or z[idx].min() > 0.0:
                x = z
                break
            shrink = passive & (z <= 0.0)
            denom = x - z
            with np.errstate(invalid="ignore", divide="ignore"):
                ratio = np.where(shrink & (denom > 0.0), x / denom, np.inf)
            ratio[shrink & (denom <= 0.0)] = 0.0
            j = int(np.argmin(ratio))
            alpha = ratio[j]
            x = x + alpha * (z - x)
            x[j] = 0.0
            passive[j] = False
            # Guard round-off: coordinates driven below zero leave the set too.
            dropped = passive & (x <= 0.0)
            x[dropped] = 0.0
            passive[dropped] = False


def _drop_duplicate_atoms(sub_gram: np.ndarray) -> np.ndarray:
    """Mask keeping the lowest-index copy of any exactly coincident atoms.

    Two candidates are coincident when their kernel-space distance
    g_ii + g_jj - 2 g_ij is zero; leaving both in would let the stabilized
    solve split weight across them.
    """
    n = sub_gram.shape[0]
    keep = np.ones(n, dtype=bool)
    diag = np.diag(sub_gram)
    for j in range(1, n):
        for i in range(j):
            if keep[i] and diag[i] + diag[j] - 2.0 * sub_gram[i, j] <= 0.0:
                keep[j] = False
                break
    return keep


def _code_from_sims(sims_row, qss, atom_gram, config):
    """Code one sample given its atom similarities; returns (idx, w, err)."""
    pool = min(config.pool, sims_row.size)
    cand = select_candidates(sims_row, pool)
    sub = atom_gram[np.ix_(cand, cand)]
    keep = _drop_duplicate_atoms(sub)
    if not keep.all():
        cand = cand[keep]
        sub = atom_gram[np.ix_(cand, cand)]
    tgt = sims_row[cand]
    w = nnls_on_support(sub, tgt, max_iter=config.nnls_max_iter)

    if pool > config.sparsity and int((w > 0.0).sum()) > config.sparsity:
        # Wider pool overshot the budget: keep the heaviest atoms, re-solve.
        order = np.argsort(-w, kind="stable")[: config.sparsity]
        cand = np.sort(cand[order])
        sub = atom_gram[np.ix_(cand, cand)]
        tgt = sims_row[cand]
        w = nnls_on_support(sub, tgt, max_iter=config.nnls_max_iter)

    wmax = w.max() if w.size else 0.0
    pos = w > config.prune_rel_tol * wmax if wmax > 0.0 else np.zeros(w.size, dtype=bool)
    idx = cand[pos]
    w = w[pos]
    err = qss - 2.0 * (w @ tgt[pos]) + w @ atom_gram[np.ix_(idx, idx)] @ w if w.size else qss
    return idx, w, max(float(err), 0.0)


def query_atom_similarities(queries: np.ndarray, dictionary) -> np.ndarray:
    """Similarity of each query to each atom in kernel space, as Q x M.

    Rows are computed one query at a time from the query-to-support kernel
    block, so batched and single-sample coding take the same numeric path.
    """
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2:
        raise ValueError("queries must be a d x Q column-sample matrix")
    coeffs = dictionary.coefficients
    n_q = queries.shape[1]
    sims = np.empty((n_q, coeffs.shape[1]), dtype=np.float64)
    block = max(1, _BLOCK_ENTRIES // max(1, dictionary.support.shape[1]))
    for start in range(0, n_q, block):
        stop = min(start + block, n_q)
        kqs = cross_similarity(queries[:, start:stop], dictionary.support, dictionary.kernel)
        for i in range(stop - start):
            sims[start + i] = kqs[i] @ coeffs
    return sims


def code_one(query: np.ndarray, dictionary, config: CodingConfig) -> SparseCode:
    """Sparse-code a single query against a dictionary.

    Far-away queries whose candidate weights all solve to zero yield the
    empty code; its reconstruction error is kappa(q, q).
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.size != dictionary.dim:
        raise ValueError(f"query has dimension {query.size}, dictionary expects {dictionary.dim}")
    col = np.ascontiguousarray(query[:, None])
    sims = query_atom_similarities(col, dictionary)[0]
    qss = float(self_similarity(col, dictionary.kernel)[0])
    idx, w, _ = _code_from_sims(sims, qss, dictionary.atom_gram, config)
    return SparseCode(indices=idx, weights=w, query_self_similarity=qss)


def code_batch(queries, dictionary, config: CodingConfig, threads: int = 1) -> list[SparseCode]:
    """Code every column sample; elementwise identical to a code_one loop.

    Samples are independent, so execution order cannot change any code.
    Per-sample solver failures are collected and re-raised at the end as a
    NumericalError carrying the failing sample indices (``failures``) and
    the codes that did succeed (``codes``).
    """
    fm = as_feature_matrix(queries)
    if fm.dim != dictionary.dim:
        raise ValueError(f"queries have dimension {fm.dim}, dictionary expects {dictionary.dim}")
    sims = query_atom_similarities(fm.data, dictionary)
    qss = self_similarity(fm.data, dictionary.kernel)
    atom_gram = dictionary.atom_gram
    n = fm.n_samples
    codes: list[SparseCode | None] = [None] * n
    failures: list[tuple[int, Exception]] = []

    def run(i: int):
        try:
            idx, w, _ = _code_from_sims(sims[i], float(qss[i]), atom_gram, config)
            codes[i] = SparseCode(indices=idx, weights=w, query_self_similarity=float(qss[i]))
        except NumericalError as exc:
            failures.append((i, exc))

    if threads > 1:
        chunk = max(1, n // (8 * threads))
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futs = [
                pool.submit(lambda lo=start: [run(i) for i in range(lo, min(lo + chunk, n))])
                for start in range(0, n, chunk)
            ]
            for fut in futs:
                fut.result()
    else:
        for i in range(n):
            run(i)

    if failures:
        failures.sort(key=lambda f: f[0])
        err = NumericalError(
            f"coding failed for {len(failures)} of {n} samples "
            f"(first failing indices {[i for i, _ in failures[:5]]})"
        )
        err.failures = failures
        err.codes = codes
        raise err
    return codes  # type: ignore[return-value]


def reconstruction_error(code: SparseCode, query_sims: np.ndarray, dictionary) -> float:
    """Kernel-space squared error of a code: kappa(q,q) - 2 w'.t + w'.G.w.

    The empty code reconstructs nothing and scores kappa(q, q). Negative
    round-off is clamped to zero.
    """
    if code.nnz == 0:
        return max(float(code.query_self_similarity), 0.0)
    query_sims = np.asarray(query_sims, dtype=np.float64)
    sub = dictionary.atom_gram[np.ix_(code.indices, code.indices)]
    err = (
        float(code.query_self_similarity)
        - 2.0 * float(code.weights @ query_sims[code.indices])
        + float(code.weights @ sub @ code.weights)
    )
    return max(err, 0.0)


def nearest_atom_code(sims_row: np.ndarray, qss: float, atom_gram_diag: np.ndarray) -> tuple[int, float]:
    """Hard unit-weight assignment to the closest atom in kernel space.

    Returns (atom index, squared distance). This is the 1-sparse
    degeneration used by the kMeans-style trainer mode: distance ranking,
    weight fixed at one, ties to the lowest index.
    """
    dist = atom_gram_diag - 2.0 * sims_row + qss
    j = int(np.argmin(dist))
    return j, max(float(dist[j]), 0.0)
