"""Dictionary learning by alternating sparse coding and a closed-form update.

The trainer alternates two phases until the objective stalls, the codes
stop changing, or the iteration budget runs out:

* coding: every sample gets a non-negative sparse code against the current
  atoms (kernel-space distances only);
* update: the coefficient matrix is refit in closed form as
  ``codes' (codes codes')^-1``, the minimizer of the reconstruction
  objective for fixed codes.

With a sparsity budget of one the coding phase degenerates to hard
nearest-atom assignment with unit weight, which makes the whole loop
coincide with Lloyd's kMeans (kernel kMeans for non-linear kernels). That
mode is recorded on the fitted dictionary and honored downstream.

Atoms that no sample uses would make the update singular; they are either
reseeded onto the worst-reconstructed sample or dropped, per config.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve, cholesky

from .coding import CodingConfig, _code_from_sims
from .errors import DataError, NumericalError
from .kernels import (
    GramView,
    KernelSpec,
    as_feature_matrix,
    cross_similarity,
    self_similarity,
)

_BLOCK_ENTRIES = 1 << 24

# Full training Gram matrices are cached only up to this many samples;
# larger fits recompute kernel blocks every iteration.
DEFAULT_FIT_GRAM_CAP = 4000

DEAD_ATOM_POLICIES = ("reseed_worst", "drop")


@dataclass
class DictionaryMeta:
    atoms: int
    sparsity: int
    iterations_run: int = 0
    seed: int = 0
    mode: str = "nnk"  # "kmeans" when fit with a 1-sparse budget


@dataclass(eq=False)
class Dictionary:
    """A trained dictionary: atoms are kernel-space combinations of stored samples.

    ``support`` (d x P) holds the training samples the atoms are built
    from; ``coefficients`` (P x M) holds one column of combination weights
    per atom. The atom Gram matrix is computed lazily and cached.
    """

    support: np.ndarray
    coefficients: np.ndarray
    kernel: KernelSpec
    meta: DictionaryMeta
    _gram_cache: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.support = np.ascontiguousarray(np.asarray(self.support, dtype=np.float64))
        self.coefficients = np.ascontiguousarray(np.asarray(self.coefficients, dtype=np.float64))
        if self.support.ndim != 2 or self.coefficients.ndim != 2:
            raise DataError("support and coefficients must be 2-D")
        if self.support.shape[1] != self.coefficients.shape[0]:
            raise DataError(
                f"support holds {self.support.shape[1]} samples but coefficients have "
                f"{self.coefficients.shape[0]} rows"
            )
        if not np.isfinite(self.support).all() or not np.isfinite(self.coefficients).all():
            raise DataError("dictionary contains non-finite values")

    @property
    def dim(self) -> int:
        return self.support.shape[0]

    @property
    def n_support(self) -> int:
        return self.support.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.coefficients.shape[1]

    @property
    def atom_gram(self) -> np.ndarray:
        if self._gram_cache is None:
            self._gram_cache = _atom_gram(self.support, self.coefficients, self.kernel)
        return self._gram_cache

    def equals(self, other: "Dictionary") -> bool:
        return (
            np.array_equal(self.support, other.support)
            and np.array_equal(self.coefficients, other.coefficients)
            and self.kernel == other.kernel
            and self.meta == other.meta
        )


def _atom_gram(support: np.ndarray, coefficients: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    p = support.shape[1]
    ka = np.empty((p, coefficients.shape[1]), dtype=np.float64)
    block = max(1, _BLOCK_ENTRIES // max(1, p))
    for start in range(0, p, block):
        stop = min(start + block, p)
        ka[start:stop] = cross_similarity(support[:, start:stop], support, kernel) @ coefficients
    g = coefficients.T @ ka
    return (g + g.T) * 0.5


@dataclass(frozen=True)
class FitConfig:
    """Training configuration. ``coding`` overrides the derived coding knobs."""

    atoms: int
    sparsity: int
    max_iters: int = 10
    rel_obj_tol: float = 1e-6
    seed: int = 0
    dead_atom_policy: str = "reseed_worst"
    coding: CodingConfig | None = None

    def __post_init__(self):
        if self.atoms < 1:
            raise ValueError(f"atoms must be >= 1, got {self.atoms}")
        if self.sparsity < 1:
            raise ValueError(f"sparsity must be >= 1, got {self.sparsity}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.rel_obj_tol > 0:
            raise ValueError(f"rel_obj_tol must be > 0, got {self.rel_obj_tol}")
        if self.dead_atom_policy not in DEAD_ATOM_POLICIES:
            raise ValueError(f"dead_atom_policy must be one of {DEAD_ATOM_POLICIES}")

    def coding_config(self) -> CodingConfig:
        return self.coding if self.coding is not None else CodingConfig(sparsity=self.sparsity)


@dataclass
class FitSnapshot:
    """Per-iteration state captured when fit() is asked to keep history."""

    iteration: int
    codes: sp.csc_matrix
    atoms: np.ndarray  # d x M input-space surrogate after the update
    objective: float


@dataclass
class FitReport:
    """Convergence audit trail for one fit.

    ``objective_per_iter[t]`` is the reconstruction objective right after
    the coding phase of iteration t. It is non-increasing between
    consecutive iterations whose earlier member had no dead-atom event.
    """

    objective_per_iter: list[float] = field(default_factory=list)
    dead_atom_events: list[tuple[int, int]] = field(default_factory=list)
    coding_seconds: list[float] = field(default_factory=list)
    update_seconds: list[float] = field(default_factory=list)
    converged: bool = False
    history: list[FitSnapshot] | None = None

    @property
    def wall_time_per_phase(self) -> list[tuple[float, float]]:
        return list(zip(self.coding_seconds, self.update_seconds))


def init_dictionary(data, config: FitConfig) -> Dictionary:
    """Seed a dictionary with ``atoms`` distinct training samples.

    Samples are drawn uniformly without replacement from a PCG64 stream
    seeded with ``config.seed``; each initial atom is exactly one sample
    (identity coefficients), so atoms start on the data itself.
    """
    fm = as_feature_matrix(data)
    if config.atoms > fm.n_samples:
        raise DataError(f"cannot draw {config.atoms} atoms from {fm.n_samples} samples")
    sel = _init_selection(fm.n_samples, config.atoms, config.seed)
    meta = DictionaryMeta(
        atoms=config.atoms,
        sparsity=config.sparsity,
        iterations_run=0,
        seed=config.seed,
        mode="kmeans" if config.sparsity == 1 else "nnk",
    )
    return Dictionary(
        support=fm.data[:, sel].copy(),
        coefficients=np.eye(config.atoms),
        kernel=KernelSpec("linear"),  # placeholder; fit() stamps the real kernel
        meta=meta,
    )


def _init_selection(n_samples: int, n_atoms: int, seed: int) -> np.ndarray:
    """The documented seeding protocol: PCG64(seed), choice without replacement."""
    rng = np.random.default_rng(seed)
    return rng.choice(n_samples, size=n_atoms, replace=False)


def dictionary_update(codes) -> np.ndarray:
    """Closed-form coefficient update ``codes' (codes codes')^-1``.

    ``codes`` is the M x N code matrix (sparse or dense, non-negative,
    column sparsity at most the coding budget). The result is the N x M
    coefficient matrix minimizing the reconstruction objective for these
    codes. Requires every atom to be in use; a singular system after
    dead-atom handling is a trainer bug and raises NumericalError.
    """
    w = codes.tocsr() if sp.issparse(codes) else sp.csr_matrix(np.asarray(codes, dtype=np.float64))
    m = w.shape[0]
    if np.any(np.diff(w.indptr) == 0):
        raise NumericalError("code matrix has unused atoms (zero rows); handle dead atoms before the update")
    g = (w @ w.T).toarray()
    g = (g + g.T) * 0.5
    try:
        low = cholesky(g, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        jitter = 1e-8 * np.trace(g) / m
        try:
            low = cholesky(g + jitter * np.eye(m), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise NumericalError(
                "code Gram matrix is singular even after jitter; "
                "dead-atom handling should have prevented this"
            ) from None
    return cho_solve((low, True), w.toarray(), check_finite=False).T


def objective(data, coefficients, codes, kernel: KernelSpec | None = None) -> float:
    """Reconstruction objective tr(K) - 2 tr(KAW) + tr(W'A'KAW), clamped at 0.

    ``data`` may be a FeatureMatrix or raw d x N array (then ``kernel`` is
    required) or a GramView. Coefficient rows index the data columns.
    """
    if isinstance(data, GramView):
        view = data
    else:
        fm = as_feature_matrix(data)
        if kernel is None:
            raise ValueError("kernel must be given when data is not a GramView")
        view = GramView(source=fm, spec=kernel, cache=None)
    a = np.asarray(coefficients, dtype=np.float64)
    w = codes.tocsr() if sp.issparse(codes) else sp.csr_matrix(np.asarray(codes, dtype=np.float64))
    n = view.n
    if a.shape[0] != n or w.shape != (a.shape[1], n):
        raise ValueError(f"shape mismatch: gram {n}, coefficients {a.shape}, codes {w.shape}")

    t1 = float(view.diagonal().sum())
    ka = np.empty((n, a.shape[1]), dtype=np.float64)
    block = max(1, _BLOCK_ENTRIES // max(1, n))
    for start in range(0, n, block):
        stop = min(start + block, n)
        ka[start:stop] = view.block(start, stop) @ a
    t2 = float(w.multiply(ka.T).sum())
    atom_g = a.T @ ka
    cw = (w.T @ atom_g.T).T  # dense M x N; sparse @ dense keeps memory modest
    t3 = float(w.multiply(cw).sum())
    return max(t1 - 2.0 * t2 + t3, 0.0)


def _reseed_dead(codes_idx, codes_w, errors, dead, row_counts):
    """Reseed each dead atom onto the worst-reconstructed unused sample.

    The chosen sample's code becomes 1-sparse on the reseeded atom with
    weight one. Clearing a sample's old code can orphan another atom; such
    atoms join the queue, so the result never has an unused atom. Mutates
    the code lists in place and returns the reseeded atom ids in order.
    """
    order = np.argsort(-errors, kind="stable")
    used = np.zeros(errors.size, dtype=bool)
    queue = sorted(int(m) for m in dead)
    events = []
    ptr = 0
    while queue:
        m = queue.pop(0)
        # Reseeded samples each host one distinct atom for good, so with
        # atoms <= samples the pointer cannot run out.
        while ptr < order.size and used[order[ptr]]:
            ptr += 1
        if ptr >= order.size:
            raise NumericalError("more unused atoms than samples available for reseeding")
        i = int(order[ptr])
        used[i] = True
        for r in codes_idx[i]:
            row_counts[r] -= 1
            if row_counts[r] == 0:
                queue.append(int(r))
        codes_idx[i] = np.array([m], dtype=np.int64)
        codes_w[i] = np.array([1.0], dtype=np.float64)
        row_counts[m] += 1
        events.append(m)
    return events


def handle_dead_atoms(codes, errors, policy: str = "reseed_worst"):
    """Repair a code matrix whose rows contain unused atoms.

    ``codes`` is the M x N code matrix (sparse or dense); ``errors`` the
    current per-sample reconstruction errors, which the reseed policy uses
    to pick its targets. Returns ``(repaired_codes, events)`` where events
    lists the reseeded (or dropped) atom indices; with ``policy="drop"``
    the returned matrix has those rows removed. The repaired matrix always
    has a nonsingular code Gram row structure (every atom used).
    """
    if policy not in DEAD_ATOM_POLICIES:
        raise ValueError(f"policy must be one of {DEAD_ATOM_POLICIES}")
    w = codes.tocsc() if sp.issparse(codes) else sp.csc_matrix(np.asarray(codes, dtype=np.float64))
    errors = np.asarray(errors, dtype=np.float64)
    m, n = w.shape
    row_counts = np.bincount(w.tocoo().row, minlength=m)
    dead = np.flatnonzero(row_counts == 0)
    if dead.size == 0:
        return w, []
    if policy == "drop":
        keep = np.flatnonzero(row_counts > 0)
        return w[keep], [int(i) for i in dead]
    codes_idx = []
    codes_w = []
    wc = w.tocsc()
    for i in range(n):
        lo, hi = wc.indptr[i], wc.indptr[i + 1]
        codes_idx.append(wc.indices[lo:hi].astype(np.int64))
        codes_w.append(wc.data[lo:hi].astype(np.float64))
    events = _reseed_dead(codes_idx, codes_w, errors, dead, row_counts)
    return _assemble_codes(codes_idx, codes_w, m, n), events


def _assemble_codes(codes_idx, codes_w, n_atoms, n_samples) -> sp.csc_matrix:
    indptr = np.zeros(n_samples + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(ix) for ix in codes_idx])
    indices = np.concatenate(codes_idx) if indptr[-1] else np.zeros(0, dtype=np.int64)
    data = np.concatenate(codes_w) if indptr[-1] else np.zeros(0, dtype=np.float64)
    return sp.csc_matrix((data, indices, indptr), shape=(n_atoms, n_samples))


def _codes_equal(a: sp.csc_matrix, b: sp.csc_matrix) -> bool:
    return (
        a.shape == b.shape
        and np.array_equal(a.indptr, b.indptr)
        and np.array_equal(a.indices, b.indices)
        and np.array_equal(a.data, b.data)
    )


def fit(
    data,
    kernel: KernelSpec,
    config: FitConfig,
    *,
    threads: int = 1,
    progress=None,
    keep_history: bool = False,
    gram_cache_cap: int = DEFAULT_FIT_GRAM_CAP,
):
    """Train a dictionary on column-sample data.

    Alternates coding and the closed-form update until the codes stop
    changing, the relative objective decrease falls below
    ``config.rel_obj_tol``, or ``config.max_iters`` is reached. The result
    is deterministic given (data, config, seed) under sequential execution.

    ``progress``, when given, is called after every iteration with
    ``(iteration, objective, dead_atom_count)``. Returns
    ``(Dictionary, FitReport)``; the dictionary's support is trimmed to the
    samples that actually carry coefficient weight.
    """
    fm = as_feature_matrix(data)
    x = fm.data
    n = fm.n_samples
    if config.atoms > n:
        raise DataError(f"cannot draw {config.atoms} atoms from {n} samples")
    coding_cfg = config.coding_config()
    hard_assign = config.sparsity == 1
    sel = _init_selection(n, config.atoms, config.seed)
    coeffs = np.zeros((n, config.atoms), dtype=np.float64)
    coeffs[sel, np.arange(config.atoms)] = 1.0

    qss = self_similarity(x, kernel)
    full_gram = cross_similarity(x, x, kernel) if n <= gram_cache_cap else None

    report = FitReport(history=[] if keep_history else None)
    prev_codes = None
    prev_idx = None
    prev_w = None
    prev_obj = None
    converged = False

    for it in range(config.max_iters):
        tic = time.perf_counter()
        ka = _gram_times(x, kernel, coeffs, full_gram)
        atom_g = coeffs.T @ ka
        atom_g = (atom_g + atom_g.T) * 0.5

        if hard_assign:
            # Nearest-atom assignment with unit weight: the exact 1-sparse
            # optimum, so no carry-over of old codes is needed.
            dist = np.diag(atom_g)[None, :] - 2.0 * ka + qss[:, None]
            assign = np.argmin(dist, axis=1)
            errors = np.maximum(dist[np.arange(n), assign], 0.0)
            codes_idx = [np.array([a], dtype=np.int64) for a in assign]
            codes_w = [np.array([1.0])] * n
        else:
            codes_idx, codes_w, errors = _code_all(ka, qss, atom_g, coding_cfg, threads, prev_idx, prev_w)
        report.coding_seconds.append(time.perf_counter() - tic)

        obj = float(errors.sum())
        report.objective_per_iter.append(obj)

        m_cur = coeffs.shape[1]
        row_counts = np.bincount(
            np.concatenate(codes_idx) if any(len(ix) for ix in codes_idx) else np.zeros(0, dtype=np.int64),
            minlength=m_cur,
        )
        dead = np.flatnonzero(row_counts == 0)
        had_event = dead.size > 0
        if had_event:
            if config.dead_atom_policy == "reseed_worst":
                events = _reseed_dead(codes_idx, codes_w, errors, dead, row_counts)
                report.dead_atom_events.extend((it, m) for m in events)
            else:
                keep = np.flatnonzero(row_counts > 0)
                remap = -np.ones(m_cur, dtype=np.int64)
                remap[keep] = np.arange(keep.size)
                codes_idx = [remap[ix] for ix in codes_idx]
                report.dead_atom_events.extend((it, int(m)) for m in dead)
                coeffs = coeffs[:, keep]
                m_cur = keep.size

        codes = _assemble_codes(codes_idx, codes_w, m_cur, n)

        tic = time.perf_counter()
        new_coeffs = dictionary_update(codes)
        report.update_seconds.append(time.perf_counter() - tic)

        if keep_history:
            report.history.append(
                FitSnapshot(iteration=it, codes=codes.copy(), atoms=x @ new_coeffs, objective=obj)
            )
        if progress is not None:
            progress(it, obj, int(dead.size))

        stable = prev_codes is not None and _codes_equal(codes, prev_codes)
        prev_codes = codes
        prev_idx, prev_w = codes_idx, codes_w
        coeffs = new_coeffs
        if stable:
            converged = True
            break
        if prev_obj is not None and not had_prev_event(report, it - 1):
            rel = (prev_obj - obj) / max(prev_obj, 1e-300)
            if rel < config.rel_obj_tol:
                converged = True
                break
        prev_obj = obj

    report.converged = converged
    dictionary = _trim(x, coeffs, kernel, config, len(report.objective_per_iter))
    return dictionary, report


def had_prev_event(report: FitReport, iteration: int) -> bool:
    """True when the given iteration logged a dead-atom event."""
    return any(ev_it == iteration for ev_it, _ in report.dead_atom_events)


def _gram_times(x, kernel, coeffs, full_gram):
    """K @ coeffs, using the cached Gram when available, blockwise otherwise."""
    if full_gram is not None:
        return full_gram @ coeffs
    n = x.shape[1]
    out = np.empty((n, coeffs.shape[1]), dtype=np.float64)
    block = max(1, _BLOCK_ENTRIES // max(1, n))
    for start in range(0, n, block):
        stop = min(start + block, n)
        out[start:stop] = cross_similarity(x[:, start:stop], x, kernel) @ coeffs
    return out


def _code_all(ka, qss, atom_g, coding_cfg, threads, prev_idx=None, prev_w=None):
    n = ka.shape[0]
    codes_idx: list = [None] * n
    codes_w: list = [None] * n
    errors = np.empty(n, dtype=np.float64)

    def run(i):
        idx, w, err = _code_from_sims(ka[i], float(qss[i]), atom_g, coding_cfg)
        if prev_idx is not None:
            # Top-k reselection can exclude a sample's old support, so the
            # fresh solve may score worse than the codes the update was fit
            # to. Keeping the better of the two makes every full iteration
            # non-increasing.
            pidx, pw = prev_idx[i], prev_w[i]
            if pidx.size:
                sub = atom_g[np.ix_(pidx, pidx)]
                perr = float(qss[i]) - 2.0 * float(pw @ ka[i][pidx]) + float(pw @ sub @ pw)
                perr = max(perr, 0.0)
            else:
                perr = max(float(qss[i]), 0.0)
            if perr < err:
                idx, w, err = pidx, pw, perr
        codes_idx[i] = idx
        codes_w[i] = w
        errors[i] = err

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
    return codes_idx, codes_w, errors


def _trim(x, coeffs, kernel, config, iterations_run) -> Dictionary:
    """Drop support samples with all-zero coefficient rows."""
    used = np.flatnonzero(np.any(coeffs != 0.0, axis=1))
    meta = DictionaryMeta(
        atoms=coeffs.shape[1],
        sparsity=config.sparsity,
        iterations_run=iterations_run,
        seed=config.seed,
        mode="kmeans" if config.sparsity == 1 else "nnk",
    )
    return Dictionary(
        support=x[:, used].copy(),
        coefficients=coeffs[used].copy(),
        kernel=kernel,
        meta=meta,
    )


def export_atoms(dictionary: Dictionary) -> np.ndarray:
    """Input-space surrogate of the atoms: ``support @ coefficients`` (d x M).

    Exact for the linear kernel (k = 1 columns are cluster centroids);
    otherwise the standard pre-image used for atom visualization.
    """
    return dictionary.support @ dictionary.coefficients
