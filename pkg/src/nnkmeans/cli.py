"""Command-line surface: synth, fit, code, classify, bench, export-atoms.

Every output artifact starts with a ``# {...}`` comment carrying the fully
resolved configuration, so a file is reproducible from its own header.
Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .classify import ClassifierModel, accuracy, classify, fit_per_class
from .coding import CodingConfig, code_batch
from .dataio import (
    SynthSpec,
    load_csv,
    load_model,
    make_synthetic,
    save_codes_csv,
    save_features_csv,
    save_model,
    save_predictions_csv,
    save_rows_csv,
)
from .errors import DataError, NumericalError
from .kernels import KernelSpec
from .training import Dictionary, FitConfig, export_atoms, fit

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="base random seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads for coding (1 = sequential)")
    common.add_argument(
        "--kernel",
        type=str,
        default="gaussian:sigma=1",
        help="kernel spec: gaussian:sigma=<float> | cosine | linear",
    )
    common.add_argument("--quiet", action="store_true", help="suppress progress output")
    common.add_argument("--json", action="store_true", dest="as_json", help="machine-readable summary on stdout")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="nnkmeans",
        description="Kernel dictionary learning with non-negative sparse coding.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the interleaved-arcs dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument(
        "--train", type=int, default=600, dest="train_count", help="training samples (divisible by classes)"
    )
    p.add_argument("--test", type=int, default=200, dest="test_count", help="test samples (divisible by classes)")
    p.add_argument("--noise", type=float, default=0.05, help="gaussian noise sigma")
    p.add_argument("--out", required=True, help="output directory for train.csv / test.csv")

    p = sub.add_parser("fit", parents=[common], help="train a dictionary (or one per class)")
    p.add_argument("--data", required=True, help="row-per-sample CSV")
    p.add_argument("--atoms", type=int, required=True)
    p.add_argument("--sparsity", type=int, required=True)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-6, help="relative objective-decrease stop")
    p.add_argument("--per-class", action="store_true", help="train one dictionary per label")
    p.add_argument("--label-column", type=int, default=None, help="label column (default: last, when --per-class)")
    p.add_argument("--dead-atom-policy", choices=("reseed_worst", "drop"), default="reseed_worst")
    p.add_argument("--model", required=True, help="output model file")

    p = sub.add_parser("code", parents=[common], help="sparse-code samples against a saved dictionary")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--label-column", type=int, default=None, help="label column to strip from the data file")
    p.add_argument("--sparsity", type=int, default=None, help="override the training sparsity")
    p.add_argument("--dense", action="store_true", help="write the dense weight matrix instead of triples")
    p.add_argument("--out", required=True)

    p = sub.add_parser("classify", parents=[common], help="minimum-reconstruction-error classification")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--label-column", type=int, default=None, help="true-label column (enables accuracy)")
    p.add_argument("--sparsity", type=int, default=None, help="override the training sparsity")
    p.add_argument("--out", required=True, help="predictions CSV")

    p = sub.add_parser("bench", parents=[common], help="atoms-grid accuracy/time sweep")
    p.add_argument("--data", required=True, help="labeled training CSV")
    p.add_argument("--test", required=True, help="labeled test CSV")
    p.add_argument("--label-column", type=int, default=-1)
    p.add_argument("--atoms-grid", required=True, help="comma-separated atom counts, e.g. 10,20,50")
    p.add_argument("--sparsity", type=int, required=True)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--repeats", type=int, default=10, help="runs per grid cell (seed + repeat index)")
    p.add_argument("--out", required=True, help="output directory for bench.csv / bench.json")

    p = sub.add_parser("export-atoms", parents=[common], help="write input-space atoms, one per row")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)

    return parser


# Path-valued flags are excluded from the reproducibility header: they do
# not influence output bytes, and embedding them would break the
# same-flags-same-bytes guarantee across directories.
_PATH_FLAGS = {"out", "data", "test", "model"}


def _config_json(args: argparse.Namespace) -> str:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in _PATH_FLAGS}
    return json.dumps(resolved, sort_keys=True, default=str)


def _emit(args, human: str, payload: dict) -> None:
    if args.as_json:
        print(json.dumps(payload, sort_keys=True))
    elif not args.quiet:
        print(human)


def cmd_synth(args) -> int:
    spec = SynthSpec(
        classes=args.classes,
        n_train=args.train_count,
        n_test=args.test_count,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    train, test = make_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    comment = _config_json(args)
    save_features_csv(out / "train.csv", train, comment=comment)
    save_features_csv(out / "test.csv", test, comment=comment)
    _emit(
        args,
        f"wrote {train.n_samples} train and {test.n_samples} test samples to {out}",
        {"train": str(out / "train.csv"), "test": str(out / "test.csv"), "classes": spec.classes},
    )
    return EXIT_OK


def _load_features(path, label_column):
    return load_csv(path, label_column=label_column)


def cmd_fit(args) -> int:
    kernel = KernelSpec.parse(args.kernel)
    label_column = args.label_column
    if label_column is None and args.per_class:
        label_column = -1
    fm = _load_features(args.data, label_column)
    config = FitConfig(
        atoms=args.atoms,
        sparsity=args.sparsity,
        max_iters=args.iters,
        rel_obj_tol=args.tol,
        seed=args.seed,
        dead_atom_policy=args.dead_atom_policy,
    )
    if args.per_class:
        progress = None
        if not args.quiet and not args.as_json:
            progress = lambda cid, it, obj, dead: print(
                f"class {cid}  iter {it}  objective {obj:.6f}  dead_atoms {dead}"
            )
        model, reports = fit_per_class(fm, kernel, config, threads=args.threads, progress=progress)
        converged = all(rep.converged for rep in reports.values())
        final_obj = {int(c): rep.objective_per_iter[-1] for c, rep in reports.items()}
    else:
        progress = None
        if not args.quiet and not args.as_json:
            progress = lambda it, obj, dead: print(f"iter {it}  objective {obj:.6f}  dead_atoms {dead}")
        model, report = fit(fm, kernel, config, threads=args.threads, progress=progress)
        converged = report.converged
        final_obj = report.objective_per_iter[-1]
    save_model(model, args.model)
    _emit(
        args,
        f"model written to {args.model} (converged={converged})",
        {"model": args.model, "converged": converged, "final_objective": final_obj},
    )
    return EXIT_OK


def cmd_code(args) -> int:
    model = load_model(args.model)
    if isinstance(model, ClassifierModel):
        raise DataError("code needs a single-dictionary model; this file holds a per-class classifier")
    fm = _load_features(args.data, args.label_column)
    sparsity = args.sparsity if args.sparsity is not None else model.meta.sparsity
    config = CodingConfig(sparsity=sparsity)
    codes = code_batch(fm, model, config, threads=args.threads)
    save_codes_csv(args.out, codes, n_atoms=model.n_atoms, dense=args.dense, comment=_config_json(args))
    nnz = sum(code.nnz for code in codes)
    _emit(
        args,
        f"coded {len(codes)} samples ({nnz} nonzeros) to {args.out}",
        {"out": args.out, "samples": len(codes), "nonzeros": nnz},
    )
    return EXIT_OK


def cmd_classify(args) -> int:
    model = load_model(args.model)
    if isinstance(model, Dictionary):
        raise DataError("classify needs a per-class model; fit with --per-class first")
    fm = _load_features(args.data, args.label_column)
    config = CodingConfig(sparsity=args.sparsity) if args.sparsity is not None else None
    labels, errors = classify(fm, model, config)
    save_predictions_csv(args.out, labels, errors, model.class_ids, comment=_config_json(args))
    payload = {"out": args.out, "samples": int(labels.size)}
    human = f"classified {labels.size} samples to {args.out}"
    if fm.labels is not None:
        acc = accuracy(labels, fm.labels)
        payload["accuracy"] = acc
        human += f"  accuracy {acc:.4f}"
    _emit(args, human, payload)
    return EXIT_OK


def cmd_bench(args) -> int:
    kernel = KernelSpec.parse(args.kernel)
    train = _load_features(args.data, args.label_column)
    test = _load_features(args.test, args.label_column)
    if train.labels is None or test.labels is None:
        raise DataError("bench requires labeled train and test data")
    try:
        grid = [int(tok) for tok in args.atoms_grid.split(",") if tok.strip()]
    except ValueError:
        raise ValueError(f"bad --atoms-grid {args.atoms_grid!r}; expected comma-separated integers") from None
    if not grid:
        raise ValueError("--atoms-grid is empty")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for atoms in grid:
        for rep in range(args.repeats):
            seed = args.seed + rep
            config = FitConfig(
                atoms=atoms,
                sparsity=args.sparsity,
                max_iters=args.iters,
                seed=seed,
            )
            tic = time.perf_counter()
            model, reports = fit_per_class(train, kernel, config, threads=args.threads)
            train_s = time.perf_counter() - tic
            coding_s = sum(sum(rep_.coding_seconds) for rep_ in reports.values())
            update_s = sum(sum(rep_.update_seconds) for rep_ in reports.values())
            tic = time.perf_counter()
            pred, _ = classify(test, model)
            test_s = time.perf_counter() - tic
            acc = accuracy(pred, test.labels)
            rows.append((atoms, rep, seed, acc, train_s, coding_s, update_s, test_s))
            if not args.quiet and not args.as_json:
                print(f"atoms {atoms}  repeat {rep}  accuracy {acc:.4f}  train {train_s:.3f}s  test {test_s:.3f}s")

    comment = _config_json(args)
    csv_path = out / "bench.csv"
    with open(csv_path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(f"# {comment}\n")
        fh.write("atoms,repeat,seed,accuracy,train_s,train_coding_s,train_update_s,test_s\n")
        for row in rows:
            atoms, rep, seed, acc, train_s, coding_s, update_s, test_s = row
            fh.write(
                f"{atoms},{rep},{seed},{acc:.17g},{train_s:.17g},{coding_s:.17g},{update_s:.17g},{test_s:.17g}\n"
            )

    summary = []
    for atoms in grid:
        cell = [r for r in rows if r[0] == atoms]
        accs = np.array([r[3] for r in cell])
        trains = np.array([r[4] for r in cell])
        tests = np.array([r[7] for r in cell])
        summary.append(
            {
                "atoms": atoms,
                "repeats": len(cell),
                "accuracy_mean": float(accs.mean()),
                "accuracy_std": float(accs.std()),
                "train_s_mean": float(trains.mean()),
                "train_s_std": float(trains.std()),
                "test_s_mean": float(tests.mean()),
                "test_s_std": float(tests.std()),
            }
        )
    json_path = out / "bench.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump({"config": json.loads(comment), "summary": summary}, fh, sort_keys=True, indent=2)
        fh.write("\n")

    _emit(args, f"bench results in {csv_path} and {json_path}", {"csv": str(csv_path), "json": str(json_path)})
    if args.as_json:
        print(json.dumps({"summary": summary}, sort_keys=True))
    return EXIT_OK


def cmd_export_atoms(args) -> int:
    model = load_model(args.model)
    comment = _config_json(args)
    if isinstance(model, Dictionary):
        atoms = export_atoms(model).T  # one atom per row
        save_rows_csv(args.out, atoms, comment=comment)
        count = atoms.shape[0]
    else:
        with open(args.out, "w", newline="\n", encoding="utf-8") as fh:
            fh.write(f"# {comment}\n")
            count = 0
            for cid, dic in zip(model.class_ids, model.dictionaries):
                for atom in export_atoms(dic).T:
                    fh.write(f"{int(cid)}," + ",".join(format(v, ".17g") for v in atom) + "\n")
                    count += 1
    _emit(args, f"wrote {count} atoms to {args.out}", {"out": args.out, "atoms": count})
    return EXIT_OK


_DISPATCH = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "code": cmd_code,
    "classify": cmd_classify,
    "bench": cmd_bench,
    "export-atoms": cmd_export_atoms,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return _DISPATCH[args.command](args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())
