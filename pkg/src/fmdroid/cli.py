"""``fmdroid`` command line.

Every subcommand writes its artifact plus ``<artifact>.run.json`` recording
the resolved arguments, inputs, outputs and timing. ``fmdroid replay`` re-runs
a recorded command. Failures print one JSON object on stderr and exit with a
code from :data:`EXIT_CODES`.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, baselines, corpus, evaluation, extraction, features, fm, kernels, modelio
from .errors import (
    DatasetFormatError,
    DegenerateLabelsError,
    DictionaryError,
    DimensionMismatchError,
    FmdroidError,
    InfeasibleSpecError,
    ManifestParseError,
    ModelFormatError,
)

logger = logging.getLogger("fmdroid")

EXIT_CODES = {
    "error": 1,
    "usage": 2,
    "missing_input": 3,
    "dimension_mismatch": 4,
    "format": 5,
    "data": 6,
}

MANIFEST_SUFFIX = ".run.json"
TOKENS_SUFFIX = ".tokens"
LABELS_FILE = "labels.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _classify_error(exc):
    if isinstance(exc, UsageError):
        return "usage"
    if isinstance(exc, (FileNotFoundError, NotADirectoryError, DictionaryError)):
        return "missing_input"
    if isinstance(exc, DimensionMismatchError):
        return "dimension_mismatch"
    if isinstance(exc, (DatasetFormatError, ModelFormatError, ManifestParseError, ValueError)):
        return "format"
    if isinstance(exc, (DegenerateLabelsError, InfeasibleSpecError)):
        return "data"
    return "error"


# -- shared helpers ----------------------------------------------------------


def _manifest_path(out):
    out = Path(out)
    return out.with_name(out.name + MANIFEST_SUFFIX)


def _write_manifest(args, argv, started, inputs, outputs, config=None, seed=None):
    record = {
        "subcommand": args.command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "config": config or {},
        "inputs": [os.fspath(p) for p in inputs],
        "outputs": [os.fspath(p) for p in outputs],
        "seed": seed if seed is not None else getattr(args, "seed", None),
        "version": __version__,
        "backend": kernels.BACKEND,
        "duration_s": round(time.perf_counter() - started, 6),
    }
    with open(_manifest_path(args.out), "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _train_config(args):
    base = fm.TrainConfig.load(args.config).to_dict() if args.config else fm.TrainConfig().to_dict()
    for flag, key in (
        ("seed", "seed"),
        ("epochs", "epochs"),
        ("k", "k"),
        ("batch_size", "batch_size"),
        ("lr", "learning_rate"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    return fm.TrainConfig.from_dict(base)


def _mask(args, dim):
    if args.mask == "full":
        if args.allow:
            raise UsageError("--allow only applies to --mask partial")
        return fm.InteractionMask.full()
    if not args.vocab:
        raise UsageError("--mask partial needs --vocab to know each feature's category")
    vocab = features.read_vocabulary(args.vocab)
    if len(vocab) != dim:
        raise DimensionMismatchError(f"vocabulary has {len(vocab)} tokens, dataset dim is {dim}")
    try:
        pairs = [fm.parse_category_pair(text) for text in args.allow]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return fm.InteractionMask.partial(pairs, vocab)


def _load_any_model(path):
    kind = modelio.model_type(path)
    if kind == "fm":
        return fm.load_model(path)
    return baselines.load_baseline(path)


def _probabilities(model, ds):
    if isinstance(model, fm.FmModel):
        return fm.predict_proba_dataset(model, ds)
    if model.dim != ds.dim:
        raise DimensionMismatchError(f"dataset has dim {ds.dim}, model expects {model.dim}")
    return model.predict_proba_dataset(ds)


def _bundle_dirs(root):
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: bundle directory not found")
    return sorted(p for p in root.iterdir() if (p / "AndroidManifest.xml").is_file())


def _resolve_dicts(explicit, bundles_dir=None):
    if explicit:
        return Path(explicit)
    if bundles_dir is not None and (Path(bundles_dir) / "dicts").is_dir():
        return Path(bundles_dir) / "dicts"
    return None


def _fmt(x):
    return repr(float(x))


# -- subcommands -------------------------------------------------------------


def cmd_gen_corpus(args, argv):
    started = time.perf_counter()
    spec = corpus.CorpusSpec.load(args.spec) if args.spec else corpus.CorpusSpec()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.n_apps is not None:
        overrides["n_apps"] = args.n_apps
    if overrides:
        spec = corpus.CorpusSpec.from_dict({**spec.to_dict(), **overrides})
    out = Path(args.out)
    dirs = corpus.generate_bundles(spec, out)
    _write_manifest(args, argv, started, [args.spec] if args.spec else [], [out], spec.to_dict(), spec.seed)
    print(json.dumps({"apps": len(dirs), "out": os.fspath(out)}))


def cmd_extract(args, argv):
    started = time.perf_counter()
    dicts = _resolve_dicts(args.dicts, args.bundles)
    perm_map, lists = extraction.load_dictionaries(dicts)
    dirs = _bundle_dirs(args.bundles)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def run(d):
        stats = extraction.ExtractionStats()
        try:
            tokens = extraction.extract_bundle(extraction.load_bundle(d), perm_map, lists, stats)
        except ManifestParseError as exc:
            raise ManifestParseError(f"{d.name}: {exc}") from None
        features.write_tokens(tokens, out / (d.name + TOKENS_SUFFIX))
        return stats

    total = extraction.ExtractionStats()
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run, dirs))
    else:
        results = [run(d) for d in dirs]
    for s in results:
        total.merge(s)
    labels = Path(args.bundles) / LABELS_FILE
    if labels.is_file():
        (out / LABELS_FILE).write_bytes(labels.read_bytes())
    if total.manifest_skipped or total.smali_skipped:
        logger.warning(
            "skipped %d manifest elements and %d smali lines", total.manifest_skipped, total.smali_skipped
        )
    inputs = [args.bundles] + ([dicts] if dicts else [])
    _write_manifest(args, argv, started, inputs, [out], {"dicts": os.fspath(dicts) if dicts else "packaged"})
    print(json.dumps({"bundles": len(dirs), "manifest_skipped": total.manifest_skipped, "smali_skipped": total.smali_skipped}))


def _read_token_dir(tokens_dir):
    root = Path(tokens_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: token directory not found")
    apps = {}
    for p in sorted(root.glob("*" + TOKENS_SUFFIX)):
        try:
            apps[p.name[: -len(TOKENS_SUFFIX)]] = features.read_tokens(p)
        except ValueError as exc:
            raise DatasetFormatError(f"{p}: {exc}") from None
    if not apps:
        raise FileNotFoundError(f"{root}: no *{TOKENS_SUFFIX} files")
    return apps


def _encode_rows(app_ids, apps, labels, vocab):
    vectors, ys, fams = [], [], []
    dropped = 0
    for app_id in app_ids:
        vec, d = features.encode(apps[app_id], vocab)
        dropped += d
        y, fam = labels[app_id]
        vectors.append(vec)
        ys.append(y)
        fams.append(fam)
    fam_col = fams if any(f is not None for f in fams) else None
    return features.LabeledDataset(vectors, ys, len(vocab), fam_col), dropped


def cmd_encode(args, argv):
    started = time.perf_counter()
    apps = _read_token_dir(args.tokens)
    labels_path = Path(args.labels) if args.labels else Path(args.tokens) / LABELS_FILE
    if not labels_path.is_file():
        raise FileNotFoundError(f"{labels_path}: labels file not found")
    labels = corpus.read_labels(labels_path)
    missing = sorted(set(apps) - set(labels))
    if missing:
        raise DatasetFormatError(f"no label for {len(missing)} apps, e.g. {missing[0]}")
    ids = sorted(apps)

    if args.test_fraction:
        train_pos, test_pos = evaluation.split_indices([labels[a][0] for a in ids], args.test_fraction, args.seed or 0)
        parts = {"train": [ids[i] for i in train_pos], "test": [ids[i] for i in test_pos]}
    else:
        parts = {"dataset": ids}
    fit_ids = parts.get("train", ids)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.vocab:
        vocab = features.read_vocabulary(args.vocab)
    else:
        vocab = features.build_vocabulary(apps[a] for a in fit_ids)
        features.write_vocabulary(vocab, out / "vocab.txt")
        outputs.append(out / "vocab.txt")
    summary = {"dim": len(vocab)}
    for name, part_ids in parts.items():
        ds, dropped = _encode_rows(part_ids, apps, labels, vocab)
        features.write_dataset(ds, out / f"{name}.txt")
        (out / f"{name}.ids").write_text("".join(a + "\n" for a in part_ids), encoding="utf-8")
        outputs += [out / f"{name}.txt", out / f"{name}.ids"]
        summary[name] = {"rows": len(ds), "dropped_tokens": dropped}
    inputs = [args.tokens, labels_path] + ([args.vocab] if args.vocab else [])
    _write_manifest(args, argv, started, inputs, outputs, {"test_fraction": args.test_fraction}, args.seed or 0)
    print(json.dumps(summary, sort_keys=True))


def cmd_train(args, argv):
    started = time.perf_counter()
    ds = features.read_dataset(args.dataset)
    cfg = _train_config(args)
    if args.model == "fm":
        mask = _mask(args, ds.dim)
        model = fm.train(ds, cfg, mask)
        fm.save_model(model, args.out)
        params = model.parameter_count
    elif args.model == "logistic":
        if args.mask != "full":
            raise UsageError("--mask applies to --model fm only")
        model = baselines.train_logistic(ds, cfg)
        baselines.save_baseline(model, args.out)
        params = 1 + model.dim
    else:
        model = baselines.train_bernoulli_nb(ds, args.alpha)
        baselines.save_baseline(model, args.out)
        params = 2 + 4 * model.dim
    config = {"model": args.model, "train": cfg.to_dict(), "mask": args.mask, "allow": sorted(args.allow)}
    inputs = [args.dataset] + ([args.vocab] if args.vocab else []) + ([args.config] if args.config else [])
    _write_manifest(args, argv, started, inputs, [args.out], config, cfg.seed)
    print(json.dumps({"model": args.model, "parameters": params, "out": args.out}))


def _bundle_dataset(args):
    if not args.vocab:
        raise UsageError("--bundle needs --vocab to encode the app")
    vocab = features.read_vocabulary(args.vocab)
    dicts = _resolve_dicts(args.dicts)
    perm_map, lists = extraction.load_dictionaries(dicts)
    path = Path(args.bundle)
    tokens = extraction.extract_bundle(extraction.load_bundle(path), perm_map, lists)
    vec, dropped = features.encode(tokens, vocab)
    if dropped:
        logger.warning("%d tokens of %s are not in the vocabulary", dropped, path.name)
    return [path.resolve().name], features.LabeledDataset([vec], [1], len(vocab))


def cmd_predict(args, argv):
    started = time.perf_counter()
    model = _load_any_model(args.model)
    if args.bundle:
        ids, ds = _bundle_dataset(args)
    else:
        ds = features.read_dataset(args.dataset)
        ids_path = Path(args.dataset).with_suffix(".ids")
        ids = ids_path.read_text(encoding="utf-8").split() if ids_path.is_file() else [str(i) for i in range(len(ds))]
        if len(ids) != len(ds):
            raise DatasetFormatError(f"{ids_path} lists {len(ids)} apps, dataset has {len(ds)} rows")
    probs = _probabilities(model, ds)
    preds = fm.classify(probs, args.threshold)
    lines = [f"{a},{_fmt(p)},{int(y):+d}" for a, p, y in zip(ids, probs, preds)]
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("app_id,probability,label\n")
            fh.writelines(line + "\n" for line in lines)
        inputs = [args.model, args.bundle or args.dataset]
        _write_manifest(args, argv, started, inputs, [args.out], {"threshold": args.threshold})
    else:
        sys.stdout.write("".join(line + "\n" for line in lines))


def cmd_evaluate(args, argv):
    started = time.perf_counter()
    model = _load_any_model(args.model)
    ds = features.read_dataset(args.dataset)
    report = evaluation.evaluate_scores(ds.labels, _probabilities(model, ds), args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "report.csv"]
    evaluation.write_metrics_csv(report, outputs[0])
    if report.roc is not None:
        evaluation.write_roc_csv(report.roc, out / "roc.csv")
        outputs.append(out / "roc.csv")
    _write_manifest(args, argv, started, [args.model, args.dataset], outputs, {"threshold": args.threshold})
    m = report.metrics
    summary = {name: getattr(m, name) for name in evaluation.METRIC_NAMES}
    summary["auc"] = report.roc.auc if report.roc is not None else None
    print(json.dumps(summary, sort_keys=True))


def cmd_cv(args, argv):
    started = time.perf_counter()
    ds = features.read_dataset(args.dataset)
    cfg = _train_config(args)
    mask = _mask(args, ds.dim)
    reports = evaluation.cross_validate(ds, cfg, args.folds, cfg.seed, mask, args.threshold)
    evaluation.write_cv_csv(reports, args.out)
    config = {"train": cfg.to_dict(), "folds": args.folds, "mask": args.mask, "allow": sorted(args.allow)}
    _write_manifest(args, argv, started, [args.dataset], [args.out], config, cfg.seed)
    print(json.dumps({"folds": len(reports), "mean_accuracy": float(np.mean([r.metrics.accuracy for r in reports]))}))


def cmd_families(args, argv):
    started = time.perf_counter()
    ds = features.read_dataset(args.dataset)
    cfg = _train_config(args)
    mask = _mask(args, ds.dim)
    report = evaluation.evaluate_families(
        ds, cfg, args.test_fraction, cfg.seed, mask=mask, jobs=args.jobs, threshold=args.threshold
    )
    evaluation.write_family_csv(report, args.out)
    config = {"train": cfg.to_dict(), "test_fraction": args.test_fraction, "mask": args.mask, "allow": sorted(args.allow)}
    _write_manifest(args, argv, started, [args.dataset], [args.out], config, cfg.seed)
    print(json.dumps({r.family: (r.metrics.recall if r.metrics else r.status) for r in report.rows}, sort_keys=True))


def cmd_replay(args, argv):
    with open(args.manifest, encoding="utf-8") as fh:
        record = json.load(fh)
    saved = record.get("argv")
    if not isinstance(saved, list) or not saved or saved[0] == "replay":
        raise DatasetFormatError(f"{args.manifest}: no replayable command recorded")
    # recorded paths are relative to the original working directory
    here = os.getcwd()
    os.chdir(record.get("cwd") or here)
    try:
        return _run(saved)
    finally:
        os.chdir(here)


# -- parser ------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with training options")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)


def _add_mask_flags(p):
    p.add_argument("--mask", choices=("full", "partial"), default="full")
    p.add_argument("--allow", action="append", default=[], metavar="CAT_A:CAT_B")
    p.add_argument("--vocab", help="vocabulary file (needed for --mask partial)")


def build_parser():
    parser = _Parser(prog="fmdroid", description="Android malware detection with factorization machines.")
    parser.add_argument("--version", action="version", version=f"fmdroid {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="write a synthetic bundle corpus")
    p.add_argument("--spec", help="CorpusSpec JSON (default: built-in desk spec)")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-apps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("extract", help="extract token sets from decompiled bundles")
    p.add_argument("bundles")
    p.add_argument("--dicts", help="dictionary directory (default: <bundles>/dicts, else packaged)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("encode", help="one-hot encode token files into a dataset")
    p.add_argument("tokens")
    p.add_argument("--labels", help="labels CSV (default: <tokens>/labels.csv)")
    p.add_argument("--vocab", help="reuse this vocabulary instead of building one")
    p.add_argument("--test-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("dataset")
    p.add_argument("--model", choices=("fm", "logistic", "bernoulli-nb"), default="fm")
    p.add_argument("--alpha", type=float, default=1.0, help="naive Bayes smoothing")
    _add_train_flags(p)
    _add_mask_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score a dataset or a single bundle")
    p.add_argument("model")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset")
    src.add_argument("--bundle")
    p.add_argument("--vocab")
    p.add_argument("--dicts")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics and ROC of a model on a dataset")
    p.add_argument("model")
    p.add_argument("dataset")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cv", help="stratified k-fold cross validation")
    p.add_argument("dataset")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--threshold", type=float, default=0.5)
    _add_train_flags(p)
    _add_mask_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("families", help="one-vs-rest evaluation per family")
    p.add_argument("dataset")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--jobs", type=int, default=1)
    _add_train_flags(p)
    _add_mask_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_families)

    p = sub.add_parser("replay", help="re-run the command recorded in a .run.json file")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def _run(argv):
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        raise UsageError("--jobs must be at least 1")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="fmdroid: %(message)s")
    return args.func(args, argv) or 0


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _run(argv)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        kind = _classify_error(exc)
        detail = exc.code if isinstance(exc, FmdroidError) else type(exc).__name__
        print(json.dumps({"error": kind, "detail": detail, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES[kind]
