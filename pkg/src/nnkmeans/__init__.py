"""Kernel dictionary learning with non-negative, adaptively sparse coding.

The package trains geometric dictionaries whose atoms are kernel-space
combinations of actual training samples, codes data as non-negative
mixtures of at most k atoms, classifies by per-class reconstruction error,
and ships a CLI for synthetic data, training, coding, classification, and
benchmarking.
"""

from .classify import ClassifierModel, accuracy, class_errors, classify, fit_per_class
from .coding import (
    CodingConfig,
    SparseCode,
    code_batch,
    code_one,
    nnls_on_support,
    reconstruction_error,
    select_candidates,
)
from .dataio import (
    SynthSpec,
    apply_standardization,
    load_csv,
    load_matrix,
    load_model,
    make_synthetic,
    save_matrix,
    save_model,
    standardize,
)
from .errors import DataError, NnkError, NnlsMaxIterError, NumericalError
from .kernels import (
    FeatureMatrix,
    GramView,
    KernelSpec,
    cross_similarity,
    gram,
    kernel_eval,
    self_similarity,
)
from .training import (
    Dictionary,
    DictionaryMeta,
    FitConfig,
    FitReport,
    dictionary_update,
    export_atoms,
    fit,
    handle_dead_atoms,
    init_dictionary,
    objective,
)

__version__ = "0.1.0"

__all__ = [
    "ClassifierModel",
    "CodingConfig",
    "DataError",
    "Dictionary",
    "DictionaryMeta",
    "FeatureMatrix",
    "FitConfig",
    "FitReport",
    "GramView",
    "KernelSpec",
    "NnkError",
    "NnlsMaxIterError",
    "NumericalError",
    "SparseCode",
    "SynthSpec",
    "accuracy",
    "apply_standardization",
    "class_errors",
    "classify",
    "code_batch",
    "code_one",
    "cross_similarity",
    "dictionary_update",
    "export_atoms",
    "fit",
    "fit_per_class",
    "gram",
    "handle_dead_atoms",
    "init_dictionary",
    "kernel_eval",
    "load_csv",
    "load_matrix",
    "load_model",
    "make_synthetic",
    "nnls_on_support",
    "objective",
    "reconstruction_error",
    "save_matrix",
    "save_model",
    "select_candidates",
    "self_similarity",
    "standardize",
]
