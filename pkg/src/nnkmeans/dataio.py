"""Dataset ingestion, standardization, synthetic data, and serialization.

File formats owned here:

* CSV interchange: one row per sample, comma separators, ``.`` decimals,
  UTF-8, LF or CRLF. Lines starting with ``#`` are comments (the CLI puts
  its reproducibility header there). Floats are written with 17 significant
  digits, which round-trips float64 exactly.
* ``NNKM`` matrix file: magic ``NNKM``, u32 version, u64 rows, u64 cols
  (all little-endian), then row-major float64 payload.
* ``NNKD`` model file: magic ``NNKD``, u32 header length, a JSON header,
  then per dictionary two length-prefixed binary blocks (support matrix,
  coefficient matrix). Round trips are bit-exact.

Randomness uses numpy's PCG64 (``default_rng``) everywhere, so a seed
reproduces the same bytes on any platform.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .classify import ClassifierModel
from .errors import DataError
from .kernels import FeatureMatrix, KernelSpec
from .training import Dictionary, DictionaryMeta

_MATRIX_MAGIC = b"NNKM"
_MODEL_MAGIC = b"NNKD"
MATRIX_FORMAT_VERSION = 1
MODEL_FORMAT_VERSION = 1

# Synthetic generator constants: spiral arms spanning three quarter turns,
# starting at unit radius, adjacent arms separated radially by the
# inter-class offset. Arms never cross, so classes are separable at low
# noise while each class still covers the whole plane nonlinearly.
ARC_SPAN = 1.5 * math.pi
ARC_BASE_RADIUS = 1.0
ARC_CLASS_OFFSET = 0.35


# ---------------------------------------------------------------------------
# CSV


def _fmt(value: float) -> str:
    return format(value, ".17g")


def load_csv(path, has_header: bool = False, label_column: int | None = None) -> FeatureMatrix:
    """Read a row-per-sample CSV into a column-major FeatureMatrix.

    ``label_column`` selects an integer label column (negative indices count
    from the end). Ragged rows, non-numeric cells, and non-finite values
    are reported with their line number.
    """
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    skip_header = has_header
    with open(path, "r", newline="", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if skip_header:
                skip_header = False
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
                if label_column is not None and not -width <= label_column < width:
                    raise DataError(f"{path}: label column {label_column} out of range for {width} columns")
            elif len(cells) != width:
                raise DataError(f"{path}: line {line_no}: expected {width} columns, found {len(cells)}")
            values = []
            for j, cell in enumerate(cells):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: line {line_no}: non-numeric value {cell.strip()!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: line {line_no}: non-finite value {cell.strip()!r}")
                values.append(v)
            if label_column is not None:
                lab = values.pop(label_column % width)
                if lab != int(lab):
                    raise DataError(f"{path}: line {line_no}: label {lab} is not an integer")
                labels.append(int(lab))
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float64).T
    return FeatureMatrix(data=data, labels=np.asarray(labels, dtype=np.int64) if labels else None)


def save_features_csv(path, fm: FeatureMatrix, comment: str | None = None) -> None:
    """Write a FeatureMatrix as row-per-sample CSV, labels in the last column."""
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for i in range(fm.n_samples):
            cells = [_fmt(v) for v in fm.data[:, i]]
            if fm.labels is not None:
                cells.append(str(int(fm.labels[i])))
            fh.write(",".join(cells) + "\n")


def save_rows_csv(path, matrix: np.ndarray, header: str | None = None, comment: str | None = None) -> None:
    """Write a 2-D array one row per line with full float64 precision."""
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        if header:
            fh.write(header + "\n")
        for row in matrix:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def save_codes_csv(path, codes, n_atoms: int, dense: bool = False, comment: str | None = None) -> None:
    """Export sparse codes as (sample_index, atom_index, weight) triples.

    With ``dense=True`` writes the full samples-by-atoms weight matrix
    instead.
    """
    if dense:
        mat = np.zeros((len(codes), n_atoms), dtype=np.float64)
        for i, code in enumerate(codes):
            mat[i, code.indices] = code.weights
        header = ",".join(f"atom_{m}" for m in range(n_atoms))
        save_rows_csv(path, mat, header=header, comment=comment)
        return
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("sample_index,atom_index,weight\n")
        for i, code in enumerate(codes):
            for m, w in zip(code.indices, code.weights):
                fh.write(f"{i},{int(m)},{_fmt(w)}\n")


def save_predictions_csv(path, labels, errors, class_ids, comment: str | None = None) -> None:
    """Write per-sample predictions plus the per-class error matrix."""
    labels = np.asarray(labels)
    errors = np.asarray(errors, dtype=np.float64)
    class_ids = np.asarray(class_ids)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("sample_index,predicted_label," + ",".join(f"e_{int(c)}" for c in class_ids) + "\n")
        for i in range(labels.size):
            fh.write(f"{i},{int(labels[i])}," + ",".join(_fmt(v) for v in errors[i]) + "\n")


# ---------------------------------------------------------------------------
# Standardization


def standardize(fm: FeatureMatrix) -> tuple[FeatureMatrix, np.ndarray, np.ndarray]:
    """Shift and scale each feature to zero mean, unit variance.

    Returns the transformed matrix plus the per-feature means and raw
    standard deviations, for applying the same transform to held-out data.
    Features with (near-)zero variance are left centered but unscaled.
    """
    if fm.n_samples < 2:
        raise DataError("standardization needs at least 2 samples")
    means = fm.data.mean(axis=1)
    stds = fm.data.std(axis=1)
    out = apply_standardization(fm, means, stds)
    return out, means, stds


def apply_standardization(fm: FeatureMatrix, means: np.ndarray, stds: np.ndarray) -> FeatureMatrix:
    """Apply previously estimated standardization parameters."""
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    if means.shape != (fm.dim,) or stds.shape != (fm.dim,):
        raise DataError(f"transform parameters must have shape ({fm.dim},)")
    scale = np.maximum(stds, 1e-12)
    data = (fm.data - means[:, None]) / scale[:, None]
    labels = fm.labels.copy() if fm.labels is not None else None
    return FeatureMatrix(data=data, labels=labels, standardized=True)


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Interleaved-arcs generator settings."""

    classes: int = 4
    n_train: int = 600
    n_test: int = 200
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        for name, count in (("n_train", self.n_train), ("n_test", self.n_test)):
            if count < self.classes or count % self.classes != 0:
                raise ValueError(f"{name}={count} must be a positive multiple of classes={self.classes}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def arc_curve(cls: int, classes: int, t: np.ndarray) -> np.ndarray:
    """Noiseless arc for one class at parameter values t in [0, ARC_SPAN)."""
    growth = ARC_CLASS_OFFSET * classes / (2.0 * math.pi)
    radius = ARC_BASE_RADIUS + growth * t
    theta = t + 2.0 * math.pi * cls / classes
    return np.vstack([radius * np.cos(theta), radius * np.sin(theta)])


def make_synthetic(spec: SynthSpec) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Sample the interleaved-arcs dataset: (train, test), both labeled.

    Class c lies on a spiral arm spanning three quarter turns that starts
    at unit radius and is rotated by 2*pi*c/classes about the shared
    center; the radius grows just fast enough that arms at the same polar
    angle sit ARC_CLASS_OFFSET apart, so arms interleave without crossing.
    Gaussian noise of scale ``noise_sigma`` is added per coordinate. The
    draw order is fixed (train split then test split, classes ascending,
    angles before noise), so a seed fully determines both splits.
    """
    rng = np.random.default_rng(spec.seed)
    splits = []
    for count in (spec.n_train, spec.n_test):
        per = count // spec.classes
        blocks = []
        labels = []
        for cls in range(spec.classes):
            t = rng.uniform(0.0, ARC_SPAN, size=per)
            pts = arc_curve(cls, spec.classes, t)
            pts = pts + rng.normal(0.0, spec.noise_sigma, size=pts.shape)
            blocks.append(pts)
            labels.extend([cls] * per)
        data = np.hstack(blocks)
        splits.append(FeatureMatrix(data=data, labels=np.asarray(labels, dtype=np.int64)))
    return splits[0], splits[1]


# ---------------------------------------------------------------------------
# Binary matrix file


def save_matrix(path, matrix: np.ndarray) -> None:
    """Write a 2-D float64 matrix in the NNKM binary format."""
    matrix = np.ascontiguousarray(np.asarray(matrix, dtype=np.float64))
    if matrix.ndim != 2:
        raise DataError(f"matrix file stores 2-D arrays, got shape {matrix.shape}")
    if not np.isfinite(matrix).all():
        raise DataError("matrix contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(_MATRIX_MAGIC)
        fh.write(struct.pack("<I", MATRIX_FORMAT_VERSION))
        fh.write(struct.pack("<QQ", matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.astype("<f8", copy=False).tobytes(order="C"))


def load_matrix(path) -> np.ndarray:
    """Read an NNKM matrix file, validating magic, version, and payload size."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != _MATRIX_MAGIC:
        raise DataError(f"{path}: not a matrix file (bad magic)")
    if len(blob) < 24:
        raise DataError(f"{path}: header truncated")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != MATRIX_FORMAT_VERSION:
        raise DataError(f"{path}: format version {version} unsupported (expected {MATRIX_FORMAT_VERSION})")
    rows, cols = struct.unpack_from("<QQ", blob, 8)
    expected = rows * cols * 8
    payload = blob[24:]
    if len(payload) != expected:
        raise DataError(f"{path}: payload truncated: expected {expected} bytes, found {len(payload)}")
    matrix = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
    if not np.isfinite(matrix).all():
        raise DataError(f"{path}: payload contains non-finite values")
    return matrix


# ---------------------------------------------------------------------------
# Model file


def _dict_header(dic: Dictionary) -> dict:
    return {
        "P": dic.n_support,
        "M": dic.n_atoms,
        "sparsity": dic.meta.sparsity,
        "iterations_run": dic.meta.iterations_run,
        "seed": dic.meta.seed,
        "mode": dic.meta.mode,
    }


def save_model(model, path) -> None:
    """Serialize a Dictionary or ClassifierModel; the round trip is bit-exact."""
    if isinstance(model, Dictionary):
        kind = "dictionary"
        dicts = [model]
        class_ids = None
    elif isinstance(model, ClassifierModel):
        kind = "classifier"
        dicts = model.dictionaries
        class_ids = model.class_ids.tolist()
    else:
        raise DataError(f"cannot serialize object of type {type(model).__name__}")

    first = dicts[0]
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": kind,
        "kernel": first.kernel.to_dict(),
        "d": first.dim,
        "k": first.meta.sparsity,
        "seed": first.meta.seed,
        "M": first.n_atoms if kind == "dictionary" else [d.n_atoms for d in dicts],
        "P": first.n_support if kind == "dictionary" else [d.n_support for d in dicts],
        "dictionaries": [_dict_header(d) for d in dicts],
    }
    if class_ids is not None:
        header["C"] = len(class_ids)
        header["class_ids"] = class_ids

    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for dic in dicts:
            for section in (dic.support, dic.coefficients):
                payload = np.ascontiguousarray(section).astype("<f8", copy=False).tobytes(order="C")
                fh.write(struct.pack("<Q", len(payload)))
                fh.write(payload)


def _read_block(blob: bytes, offset: int, rows: int, cols: int, what: str) -> tuple[np.ndarray, int]:
    if offset + 8 > len(blob):
        raise DataError(f"{what}: length prefix truncated")
    (length,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    if length != rows * cols * 8:
        raise DataError(f"{what}: expected {rows * cols * 8} bytes, header says {length}")
    if offset + length > len(blob):
        raise DataError(f"{what}: truncated ({len(blob) - offset} of {length} bytes present)")
    arr = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols).copy()
    return arr, offset + length


def load_model(path):
    """Deserialize a model file into a Dictionary or ClassifierModel."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != _MODEL_MAGIC:
        raise DataError(f"{path}: not a model file (bad magic)")
    if len(blob) < 8:
        raise DataError(f"{path}: header truncated")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    if 8 + hlen > len(blob):
        raise DataError(f"{path}: JSON header truncated")
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: bad JSON header: {exc}") from None
    version = header.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise DataError(f"{path}: format version {version} unsupported (expected {MODEL_FORMAT_VERSION})")

    kernel = KernelSpec.from_dict(header["kernel"])
    dim = int(header["d"])
    offset = 8 + hlen
    dicts = []
    for i, dh in enumerate(header["dictionaries"]):
        p, m = int(dh["P"]), int(dh["M"])
        support, offset = _read_block(blob, offset, dim, p, f"{path}: support block of dictionary {i}")
        coeffs, offset = _read_block(blob, offset, p, m, f"{path}: coefficient block of dictionary {i}")
        meta = DictionaryMeta(
            atoms=m,
            sparsity=int(dh["sparsity"]),
            iterations_run=int(dh["iterations_run"]),
            seed=int(dh["seed"]),
            mode=dh["mode"],
        )
        dicts.append(Dictionary(support=support, coefficients=coeffs, kernel=kernel, meta=meta))
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes after the last section")

    if header["kind"] == "dictionary":
        return dicts[0]
    class_ids = np.asarray(header["class_ids"], dtype=np.int64)
    return ClassifierModel(dictionaries=dicts, class_ids=class_ids)
