"""Per-class dictionaries and minimum-reconstruction-error classification.

One dictionary is trained per class on that class's samples; a query is
assigned to the class whose dictionary reconstructs it best. The full
query-by-class error matrix is always returned so callers can build
rejection rules on top without re-coding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coding import CodingConfig, _code_from_sims, nearest_atom_code, query_atom_similarities
from .errors import DataError
from .kernels import FeatureMatrix, KernelSpec, as_feature_matrix, self_similarity
from .training import Dictionary, FitConfig, FitReport, fit


@dataclass(eq=False)
class ClassifierModel:
    """One dictionary per class, sharing kernel and sparsity settings."""

    dictionaries: list[Dictionary]
    class_ids: np.ndarray

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.class_ids.ndim != 1 or self.class_ids.size != len(self.dictionaries):
            raise DataError("class_ids must list one id per dictionary")
        if np.unique(self.class_ids).size != self.class_ids.size:
            raise DataError("class_ids must be unique")

    @property
    def n_classes(self) -> int:
        return len(self.dictionaries)

    @property
    def kernel(self) -> KernelSpec:
        return self.dictionaries[0].kernel

    def equals(self, other: "ClassifierModel") -> bool:
        return (
            np.array_equal(self.class_ids, other.class_ids)
            and len(self.dictionaries) == len(other.dictionaries)
            and all(a.equals(b) for a, b in zip(self.dictionaries, other.dictionaries))
        )


def fit_per_class(
    data: FeatureMatrix,
    kernel: KernelSpec,
    config: FitConfig,
    *,
    threads: int = 1,
    progress=None,
) -> tuple[ClassifierModel, dict[int, FitReport]]:
    """Train one dictionary per label value.

    Each class fits on its own samples with seed ``config.seed + class_id``,
    so adding a class never perturbs the existing dictionaries. Classes are
    processed in ascending id order. ``progress`` receives
    ``(class_id, iteration, objective, dead_atom_count)``.
    """
    fm = as_feature_matrix(data)
    if fm.labels is None:
        raise DataError("per-class training requires labeled data")
    class_ids = np.unique(fm.labels)
    dictionaries = []
    reports: dict[int, FitReport] = {}
    for cid in class_ids.tolist():
        cols = np.flatnonzero(fm.labels == cid)
        if cols.size < config.atoms:
            raise DataError(
                f"class {cid} has {cols.size} samples, fewer than the {config.atoms} atoms requested"
            )
        sub = FeatureMatrix(data=fm.data[:, cols].copy(), standardized=fm.standardized)
        cfg = FitConfig(
            atoms=config.atoms,
            sparsity=config.sparsity,
            max_iters=config.max_iters,
            rel_obj_tol=config.rel_obj_tol,
            seed=config.seed + int(cid),
            dead_atom_policy=config.dead_atom_policy,
            coding=config.coding,
        )
        cb = None if progress is None else (lambda it, obj, dead, _c=cid: progress(_c, it, obj, dead))
        dic, rep = fit(sub, kernel, cfg, threads=threads, progress=cb)
        dictionaries.append(dic)
        reports[int(cid)] = rep
    return ClassifierModel(dictionaries=dictionaries, class_ids=class_ids), reports


def class_errors(queries, model: ClassifierModel, config: CodingConfig | None = None) -> np.ndarray:
    """Reconstruction error of every query against every class dictionary (Q x C).

    Dictionaries fit in kMeans mode score nearest-atom distance; the rest
    are sparse-coded with the dictionary's training sparsity unless
    ``config`` overrides it.
    """
    fm = as_feature_matrix(queries)
    errors = np.empty((fm.n_samples, model.n_classes), dtype=np.float64)
    for c, dic in enumerate(model.dictionaries):
        if fm.dim != dic.dim:
            raise DataError(f"queries have dimension {fm.dim}, class {model.class_ids[c]} expects {dic.dim}")
        sims = query_atom_similarities(fm.data, dic)
        qss = self_similarity(fm.data, dic.kernel)
        if dic.meta.mode == "kmeans" and config is None:
            diag = np.diag(dic.atom_gram).copy()
            for i in range(fm.n_samples):
                _, err = nearest_atom_code(sims[i], float(qss[i]), diag)
                errors[i, c] = err
        else:
            cfg = config if config is not None else CodingConfig(sparsity=dic.meta.sparsity)
            for i in range(fm.n_samples):
                _, _, err = _code_from_sims(sims[i], float(qss[i]), dic.atom_gram, cfg)
                errors[i, c] = err
    return errors


def classify(
    queries,
    model: ClassifierModel,
    config: CodingConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Predict the class with the lowest reconstruction error per query.

    Returns ``(labels, errors)`` where errors is the Q x C diagnostic
    matrix. Ties go to the lowest class id.
    """
    errors = class_errors(queries, model, config)
    labels = model.class_ids[np.argmin(errors, axis=1)]
    return labels, errors


def accuracy(predicted, truth) -> float:
    """Fraction of matching entries."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape or predicted.ndim != 1:
        raise ValueError(f"length mismatch: predicted {predicted.shape}, truth {truth.shape}")
    return float(np.mean(predicted == truth))
