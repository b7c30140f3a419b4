"""Kernel functions, batched similarity, and Gram matrices.

Sample matrices are column-major throughout the library: a ``d x N`` array
holds N samples of dimension d. Three kernels are supported:

* ``gaussian``: exp(-||x - y||^2 / (2 sigma^2))
* ``cosine``:   x.y / (||x|| ||y||), defined only for nonzero vectors
* ``linear``:   x.y
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DataError

KERNEL_KINDS = ("gaussian", "cosine", "linear")

# Full N x N Gram matrices are only materialized up to this many samples;
# larger datasets must use row-on-demand views.
DEFAULT_GRAM_CAP = 20_000


@dataclass(frozen=True)
class KernelSpec:
    """A kernel function identified by name plus its parameters.

    ``sigma`` is the Gaussian bandwidth and is ignored by the other kinds.
    """

    kind: str = "gaussian"
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KERNEL_KINDS}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ValueError(f"gaussian kernel requires sigma > 0, got {self.sigma}")

    @classmethod
    def parse(cls, text: str) -> "KernelSpec":
        """Parse the CLI grammar ``gaussian:sigma=<float> | cosine | linear``.

        A bare ``gaussian`` is accepted and uses the default sigma = 1.
        """
        text = text.strip()
        if ":" not in text:
            if text not in KERNEL_KINDS:
                raise ValueError(f"unknown kernel {text!r}; expected gaussian:sigma=<float>, cosine, or linear")
            return cls(kind=text)
        kind, _, params = text.partition(":")
        if kind != "gaussian":
            raise ValueError(f"kernel {kind!r} takes no parameters")
        key, _, value = params.partition("=")
        if key != "sigma" or not value:
            raise ValueError(f"bad gaussian parameter {params!r}; expected sigma=<float>")
        try:
            sigma = float(value)
        except ValueError:
            raise ValueError(f"bad sigma value {value!r}") from None
        return cls(kind="gaussian", sigma=sigma)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(kind=d["kind"], sigma=float(d.get("sigma", 1.0)))


@dataclass
class FeatureMatrix:
    """A dataset of column samples with optional integer labels.

    ``data`` is d x N (features by samples), float64, every entry finite.
    Labels, when present, are nonnegative integers, one per sample.
    """

    data: np.ndarray
    labels: np.ndarray | None = None
    standardized: bool = False

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DataError(f"feature matrix must be 2-D d x N with d, N >= 1, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise DataError("feature matrix contains non-finite values")
        self.data = data
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.ndim != 1 or labels.shape[0] != data.shape[1]:
                raise DataError(f"labels must be a length-{data.shape[1]} vector, got shape {labels.shape}")
            if not np.issubdtype(labels.dtype, np.integer):
                if not np.all(labels == np.floor(labels)):
                    raise DataError("labels must be integers")
            labels = labels.astype(np.int64)
            if labels.size and labels.min() < 0:
                raise DataError("labels must be nonnegative")
            self.labels = labels

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def n_classes(self) -> int:
        if self.labels is None:
            raise DataError("feature matrix has no labels")
        return int(self.labels.max()) + 1


def as_feature_matrix(data) -> FeatureMatrix:
    """Coerce a FeatureMatrix or a raw d x N array into a FeatureMatrix."""
    if isinstance(data, FeatureMatrix):
        return data
    return FeatureMatrix(data=np.asarray(data, dtype=np.float64))


def kernel_eval(x, y, spec: KernelSpec) -> float:
    """Evaluate the kernel on a single pair of vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"dimension mismatch: x has shape {x.shape}, y has shape {y.shape}")
    if spec.kind == "gaussian":
        diff = x - y
        return float(np.exp(-(diff @ diff) / (2.0 * spec.sigma * spec.sigma)))
    if spec.kind == "cosine":
        nx = np.sqrt(x @ x)
        ny = np.sqrt(y @ y)
        if nx == 0.0 or ny == 0.0:
            raise DataError("cosine kernel is undefined for zero vectors")
        return float((x @ y) / (nx * ny))
    return float(x @ y)


def cross_similarity(queries: np.ndarray, support: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Kernel values between two column-sample sets, as a Q x P matrix.

    Entry (q, p) equals ``kernel_eval(queries[:, q], support[:, p], spec)``.
    """
    queries = np.asarray(queries, dtype=np.float64)
    support = np.asarray(support, dtype=np.float64)
    if queries.ndim != 2 or support.ndim != 2:
        raise ValueError("cross_similarity expects 2-D column-sample matrices")
    if queries.shape[0] != support.shape[0]:
        raise ValueError(
            f"dimension mismatch: queries have {queries.shape[0]} features, support has {support.shape[0]}"
        )
    if spec.kind == "gaussian":
        sq = cdist(queries.T, support.T, "sqeuclidean")
        return np.exp(sq / (-2.0 * spec.sigma * spec.sigma))
    if spec.kind == "cosine":
        qn = np.sqrt(np.einsum("ij,ij->j", queries, queries))
        sn = np.sqrt(np.einsum("ij,ij->j", support, support))
        if np.any(qn == 0.0) or np.any(sn == 0.0):
            raise DataError("cosine kernel is undefined for zero vectors")
        return (queries.T @ support) / np.outer(qn, sn)
    return queries.T @ support


def self_similarity(data: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """kappa(x_i, x_i) for every column sample, as a length-N vector."""
    data = np.asarray(data, dtype=np.float64)
    if spec.kind == "linear":
        return np.einsum("ij,ij->j", data, data)
    if spec.kind == "cosine":
        norms = np.einsum("ij,ij->j", data, data)
        if np.any(norms == 0.0):
            raise DataError("cosine kernel is undefined for zero vectors")
    return np.ones(data.shape[1], dtype=np.float64)


@dataclass
class GramView:
    """Pairwise kernel values over one dataset, cached or computed on demand.

    When ``cache`` is set it holds the full symmetric N x N matrix. Without
    a cache, rows and blocks are computed from the source on every call.
    """

    source: FeatureMatrix
    spec: KernelSpec
    cache: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.source.n_samples

    def row(self, i: int) -> np.ndarray:
        if self.cache is not None:
            return self.cache[i]
        return cross_similarity(self.source.data[:, i : i + 1], self.source.data, self.spec)[0]

    def block(self, start: int, stop: int) -> np.ndarray:
        """Rows [start, stop) against all columns."""
        if self.cache is not None:
            return self.cache[start:stop]
        return cross_similarity(self.source.data[:, start:stop], self.source.data, self.spec)

    def diagonal(self) -> np.ndarray:
        if self.cache is not None:
            return np.diag(self.cache).copy()
        return self_similarity(self.source.data, self.spec)

    def full(self) -> np.ndarray:
        if self.cache is not None:
            return self.cache
        return cross_similarity(self.source.data, self.source.data, self.spec)


def gram(data, spec: KernelSpec, cap: int = DEFAULT_GRAM_CAP, materialize: bool = True) -> GramView:
    """Build a GramView over a dataset.

    With ``materialize=True`` (the default) the full N x N matrix is cached,
    which is refused above ``cap`` samples to bound memory; pass
    ``materialize=False`` for a row-on-demand view at any size.
    """
    fm = as_feature_matrix(data)
    if not materialize:
        return GramView(source=fm, spec=spec, cache=None)
    n = fm.n_samples
    if n > cap:
        raise DataError(
            f"gram matrix for {n} samples exceeds the cap of {cap}; "
            "pass materialize=False to compute rows on demand"
        )
    cache = cross_similarity(fm.data, fm.data, spec)
    # BLAS tiling can leave last-bit asymmetry on the linear path.
    cache = (cache + cache.T) * 0.5
    return GramView(source=fm, spec=spec, cache=cache)
