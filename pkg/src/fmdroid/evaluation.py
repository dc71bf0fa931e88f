"""Detection metrics, ROC curves and the train/test protocols.

Metrics are evaluated in exact rational arithmetic and only rounded to
floats at the end, so hand-computed values compare exactly. A metric whose
denominator is zero is reported as 0 and named in ``undefined``.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import fm
from .errors import DegenerateLabelsError
from .features import LabeledDataset

logger = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "fpr")


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


def confusion(labels: Sequence[int], predictions: Sequence[int]) -> Confusion:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape:
        raise ValueError(f"{labels.size} labels but {predictions.size} predictions")
    if labels.size == 0:
        raise ValueError("cannot build a confusion matrix from no samples")
    pos = labels == 1
    hit = predictions == 1
    return Confusion(
        tp=int(np.count_nonzero(pos & hit)),
        tn=int(np.count_nonzero(~pos & ~hit)),
        fp=int(np.count_nonzero(~pos & hit)),
        fn=int(np.count_nonzero(pos & ~hit)),
    )


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    fpr: float
    undefined: frozenset = frozenset()

    def as_dict(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}


def exact_metrics(c: Confusion) -> tuple:
    """``(values, undefined)`` with every value a :class:`Fraction`."""
    if c.total <= 0:
        raise ValueError("empty confusion matrix")
    undefined = set()

    def ratio(num, den, name):
        if den == 0:
            undefined.add(name)
            return Fraction(0)
        return Fraction(num, den)

    precision = ratio(c.tp, c.tp + c.fp, "precision")
    recall = ratio(c.tp, c.tp + c.fn, "recall")
    if precision + recall == 0:
        undefined.add("f1")
        f1 = Fraction(0)
    else:
        f1 = 2 * precision * recall / (precision + recall)
    values = {
        "accuracy": Fraction(c.tp + c.tn, c.total),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "fpr": ratio(c.fp, c.fp + c.tn, "fpr"),
    }
    return values, frozenset(undefined)


def metrics(c: Confusion) -> Metrics:
    values, undefined = exact_metrics(c)
    return Metrics(**{k: float(v) for k, v in values.items()}, undefined=undefined)


# -- ROC ----------------------------------------------------------------------


@dataclass(frozen=True)
class RocCurve:
    thresholds: tuple
    points: tuple  # (fpr, tpr), thresholds descending
    auc: float


def roc(labels, scores) -> RocCurve:
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.size == 0 or labels.shape != scores.shape:
        raise ValueError("labels and scores must be nonempty and of equal length")
    P = int(np.count_nonzero(labels == 1))
    N = labels.size - P
    if P == 0 or N == 0:
        raise DegenerateLabelsError("ROC needs both classes")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = (labels[order] == 1).astype(np.int64)
    # last position of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tps = np.cumsum(pos)[ends]
    fps = (ends + 1) - tps
    fpr = np.r_[0.0, fps / N]
    tpr = np.r_[0.0, tps / P]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    thresholds = (float("inf"),) + tuple(float(t) for t in s[ends])
    return RocCurve(thresholds, tuple(zip(fpr.tolist(), tpr.tolist())), auc)


# -- splitting ------------------------------------------------------------------


def _strata(keys):
    groups = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    return [groups[k] for k in sorted(groups, key=str)]


def split_indices(keys, test_fraction=0.2, seed=0) -> tuple:
    """Stratified split of positions ``0..len(keys)-1`` into train and test."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    train, test = [], []
    for members in _strata(keys):
        perm = rng.permutation(len(members))
        n_test = int(np.floor(len(members) * test_fraction + 0.5))
        test.extend(members[p] for p in perm[:n_test])
        train.extend(members[p] for p in perm[n_test:])
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(test), dtype=np.int64)


def split_train_test(ds: LabeledDataset, test_fraction=0.2, seed=0, stratified=True) -> tuple:
    if stratified:
        for label in (1, -1):
            if ds.labels.count(label) < 2:
                raise ValueError("each class needs at least 2 samples for a stratified split")
        keys = ds.labels
    else:
        keys = [0] * len(ds)
    train, test = split_indices(keys, test_fraction, seed)
    return ds.subset(train), ds.subset(test)


def stratified_kfold(ds_or_labels, k=5, seed=0) -> list:
    """``k`` disjoint index arrays (test folds) covering every sample."""
    labels = ds_or_labels.labels if isinstance(ds_or_labels, LabeledDataset) else list(ds_or_labels)
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    folds = [[] for _ in range(k)]
    for members in _strata(labels):
        if len(members) < k:
            raise ValueError(f"class has {len(members)} samples, fewer than k={k}")
        perm = rng.permutation(len(members))
        for pos, p in enumerate(perm):
            folds[pos % k].append(members[p])
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


# -- whole-model evaluation -------------------------------------------------------


@dataclass
class EvalReport:
    confusion: Confusion
    metrics: Metrics
    roc: RocCurve | None


def evaluate_scores(labels, probabilities, threshold=0.5) -> EvalReport:
    preds = fm.classify(probabilities, threshold)
    c = confusion(labels, preds)
    try:
        curve = roc(labels, probabilities)
    except DegenerateLabelsError:
        curve = None
    return EvalReport(c, metrics(c), curve)


def cross_validate(ds: LabeledDataset, cfg: fm.TrainConfig, k=5, seed=0, mask=None, threshold=0.5) -> list:
    """Train on k-1 folds, score the held-out fold; one report per fold."""
    reports = []
    for fold in stratified_kfold(ds, k, seed):
        held = np.zeros(len(ds), dtype=bool)
        held[fold] = True
        model = fm.train(ds.subset(np.flatnonzero(~held)), cfg, mask)
        test = ds.subset(fold)
        reports.append(evaluate_scores(test.labels, fm.predict_proba_dataset(model, test), threshold))
    return reports


@dataclass
class FamilyRow:
    family: str
    samples: int
    metrics: Metrics | None = None
    status: str = "ok"


@dataclass
class FamilyReport:
    rows: list = field(default_factory=list)
    average: dict = field(default_factory=dict)

    @property
    def evaluated(self):
        return [r for r in self.rows if r.metrics is not None]


def macro_average(rows) -> dict:
    """Exact arithmetic mean of each metric column."""
    if not rows:
        return {}
    return {
        name: float(sum(Fraction(getattr(r.metrics, name)) for r in rows) / len(rows))
        for name in METRIC_NAMES
    }


CLEAN_FAMILY = "clean"


def evaluate_families(
    ds: LabeledDataset, cfg: fm.TrainConfig, test_fraction=0.2, seed=0, min_samples=10, mask=None, jobs=1, threshold=0.5
) -> FamilyReport:
    """One-vs-rest FM per family (clean apps form the family ``clean``)."""
    if ds.family is None:
        raise ValueError("dataset carries no family labels")
    fams = [f if f is not None else CLEAN_FAMILY for f in ds.family]
    names = sorted(set(fams))
    if len(names) < 2:
        raise ValueError("family evaluation needs at least two families")
    train_idx, test_idx = split_indices(fams, test_fraction, seed)
    fam_arr = np.asarray(fams, dtype=object)

    rows, jobs_todo = [], []
    for fi, name in enumerate(names):
        count = int(np.count_nonzero(fam_arr == name))
        row = FamilyRow(name, count)
        rows.append(row)
        if count < min_samples:
            row.status = f"skipped: fewer than {min_samples} samples"
            logger.warning("family %s skipped (%d samples)", name, count)
            continue
        if not np.any(fam_arr[test_idx] == name):
            row.status = "skipped: absent from test split"
            logger.warning("family %s absent from test split", name)
            continue
        jobs_todo.append((fi, row))

    def run(item):
        fi, row = item
        y = np.where(fam_arr == row.family, 1, -1)
        binary = LabeledDataset(ds.vectors, y.tolist(), ds.dim)
        train = binary.subset(train_idx)
        test = binary.subset(test_idx)
        model = fm.train(train, _with_seed(cfg, cfg.seed + fi), mask)
        report = evaluate_scores(test.labels, fm.predict_proba_dataset(model, test), threshold)
        row.metrics = report.metrics

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(run, jobs_todo))
    else:
        for item in jobs_todo:
            run(item)
    out = FamilyReport(rows)
    out.average = macro_average(out.evaluated)
    return out


def _with_seed(cfg, seed):
    return fm.TrainConfig(**{**cfg.to_dict(), "seed": seed})


# -- report files ----------------------------------------------------------------


def write_metrics_csv(report: EvalReport, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value", "flag"])
        m = report.metrics
        for name in METRIC_NAMES:
            w.writerow([name, repr(getattr(m, name)), "undefined" if name in m.undefined else ""])
        for name in ("tp", "tn", "fp", "fn"):
            w.writerow([name, getattr(report.confusion, name), ""])
        if report.roc is not None:
            w.writerow(["auc", repr(report.roc.auc), ""])


def write_roc_csv(curve: RocCurve, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, (x, y) in zip(curve.thresholds, curve.points):
            w.writerow([repr(t), repr(x), repr(y)])
        w.writerow(["auc", repr(curve.auc)])


def write_family_csv(report: FamilyReport, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["family", "samples", "precision", "recall", "f1", "fpr", "accuracy", "status"])
        for r in report.rows:
            if r.metrics is None:
                w.writerow([r.family, r.samples, "", "", "", "", "", r.status])
            else:
                m = r.metrics
                w.writerow([r.family, r.samples, repr(m.precision), repr(m.recall), repr(m.f1), repr(m.fpr), repr(m.accuracy), r.status])
        a = report.average
        if a:
            w.writerow(["Average", "", repr(a["precision"]), repr(a["recall"]), repr(a["f1"]), repr(a["fpr"]), repr(a["accuracy"]), ""])


def write_cv_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", *METRIC_NAMES, "auc"])
        for i, r in enumerate(reports):
            auc = repr(r.roc.auc) if r.roc is not None else ""
            w.writerow([i, *(repr(getattr(r.metrics, n)) for n in METRIC_NAMES), auc])
        means = [float(np.mean([getattr(r.metrics, n) for r in reports])) for n in METRIC_NAMES]
        aucs = [r.roc.auc for r in reports if r.roc is not None]
        w.writerow(["mean", *(repr(v) for v in means), repr(float(np.mean(aucs))) if aucs else ""])
