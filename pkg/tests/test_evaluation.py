import csv
from fractions import Fraction as F
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmdroid import evaluation as ev, fm
from fmdroid.errors import DegenerateLabelsError
from fmdroid.evaluation import Confusion, FamilyReport, FamilyRow
from fmdroid.features import LabeledDataset, SparseVector


def auc_by_pairs(labels, scores):
    """Probability a random positive outscores a random negative, ties half."""
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y != 1]
    wins = sum(F(1) if p > q else F(1, 2) if p == q else F(0) for p, q in product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_confusion_counts():
    c = ev.confusion([1, 1, -1, -1, 1], [1, -1, -1, 1, 1])
    assert c == Confusion(tp=2, tn=1, fp=1, fn=1)


def test_confusion_rejects_mismatch():
    with pytest.raises(ValueError):
        ev.confusion([1, -1], [1])
    with pytest.raises(ValueError):
        ev.confusion([], [])


def test_metric_example():
    values, undefined = ev.exact_metrics(Confusion(tp=90, tn=95, fp=5, fn=10))
    assert values == {
        "accuracy": F(185, 200),
        "precision": F(90, 95),
        "recall": F(90, 100),
        "f1": F(2 * 90, 2 * 90 + 5 + 10),
        "fpr": F(5, 100),
    }
    assert undefined == frozenset()


def test_no_false_positives():
    m = ev.metrics(Confusion(tp=40, tn=60, fp=0, fn=2))
    assert m.precision == 1.0 and m.fpr == 0.0


def test_zero_denominators_are_flagged():
    m = ev.metrics(Confusion(tp=0, tn=10, fp=0, fn=0))
    assert m.precision == m.recall == m.f1 == 0.0
    assert m.undefined == {"precision", "recall", "f1"}
    m = ev.metrics(Confusion(tp=3, tn=0, fp=0, fn=1))
    assert m.undefined == {"fpr"}


def test_roc_perfect_inverted_and_constant():
    y = [1, 1, -1, -1]
    assert ev.roc(y, [0.9, 0.8, 0.2, 0.1]).auc == 1.0
    assert ev.roc(y, [0.1, 0.2, 0.8, 0.9]).auc == 0.0
    curve = ev.roc(y, [0.5] * 4)
    assert curve.auc == 0.5
    assert curve.points == ((0.0, 0.0), (1.0, 1.0))


def test_roc_endpoints_and_monotone():
    rng = np.random.default_rng(60)
    y = rng.choice([-1, 1], 50)
    curve = ev.roc(y, rng.integers(0, 10, 50))
    assert curve.points[0] == (0.0, 0.0) and curve.points[-1] == (1.0, 1.0)
    xs, ys = zip(*curve.points)
    assert list(xs) == sorted(xs) and list(ys) == sorted(ys)
    assert curve.thresholds[0] == float("inf")


def test_roc_single_class():
    with pytest.raises(DegenerateLabelsError):
        ev.roc([1, 1], [0.1, 0.2])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([-1, 1]), st.integers(0, 6)), min_size=2, max_size=30))
def test_auc_matches_pair_count(rows):
    y, s = zip(*rows)
    if len(set(y)) < 2:
        return
    assert ev.roc(y, s).auc == pytest.approx(float(auc_by_pairs(y, s)), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([-1, 1]), st.integers(-40, 40)), min_size=2, max_size=30))
def test_auc_invariant_under_monotone_maps(rows):
    # quarter-step grid so the maps stay strictly increasing in doubles
    y, s = zip(*rows)
    if len(set(y)) < 2:
        return
    s = np.array(s) / 4.0
    assert ev.roc(y, s).auc == ev.roc(y, fm.sigmoid(s)).auc == ev.roc(y, 3 * s + 1).auc


def test_split_example():
    keys = [1] * 10 + [-1] * 10
    train, test = ev.split_indices(keys, 0.2, seed=0)
    assert len(test) == 4 and len(train) == 16
    assert sum(keys[i] == 1 for i in test) == 2
    assert set(train).isdisjoint(test) and sorted([*train, *test]) == list(range(20))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(2, 60), st.integers(0, 2**32))
def test_split_keeps_class_shares(pos, neg, seed):
    keys = [1] * pos + [-1] * neg
    _, test = ev.split_indices(keys, 0.2, seed)
    assert abs(sum(keys[i] == 1 for i in test) - 0.2 * pos) <= 1
    assert abs(sum(keys[i] == -1 for i in test) - 0.2 * neg) <= 1


def test_split_train_test_needs_both_classes():
    ds = LabeledDataset([SparseVector((), 1)] * 4, [1, 1, 1, -1], 1)
    with pytest.raises(ValueError, match="at least 2"):
        ev.split_train_test(ds)
    with pytest.raises(ValueError):
        ev.split_indices([1, 1], test_fraction=1.0)


def test_kfold_partitions():
    labels = [1] * 13 + [-1] * 7
    folds = ev.stratified_kfold(labels, 5, seed=3)
    assert sorted(np.concatenate(folds).tolist()) == list(range(20))
    for fold in folds:
        pos = sum(labels[i] == 1 for i in fold)
        assert abs(pos - 13 / 5) <= 1 and abs(len(fold) - pos - 7 / 5) <= 1
    assert [f.tolist() for f in folds] == [f.tolist() for f in ev.stratified_kfold(labels, 5, seed=3)]


def test_kfold_too_few():
    with pytest.raises(ValueError):
        ev.stratified_kfold([1] * 10 + [-1] * 3, 5)
    with pytest.raises(ValueError):
        ev.stratified_kfold([1, -1], 1)


def _metrics(**kw):
    base = dict(accuracy=0.0, precision=0.0, recall=0.0, f1=0.0, fpr=0.0)
    base.update(kw)
    return ev.Metrics(**base)


def test_macro_average_is_exact():
    rows = [FamilyRow("a", 10, _metrics(recall=0.1)), FamilyRow("b", 10, _metrics(recall=0.2)), FamilyRow("c", 10, _metrics(recall=0.3))]
    avg = ev.macro_average(rows)
    assert avg["recall"] == float((F(0.1) + F(0.2) + F(0.3)) / 3)
    assert ev.macro_average([]) == {}


def _family_dataset(rng, per_family, fams):
    vectors, labels, family = [], [], []
    for fi, name in enumerate(fams):
        for _ in range(per_family):
            vectors.append(SparseVector((fi,), len(fams)))
            labels.append(-1 if name == "clean" else 1)
            family.append(None if name == "clean" else name)
    return LabeledDataset(vectors, labels, len(fams), family)


def test_family_evaluation_skips_small_families(caplog):
    ds = _family_dataset(np.random.default_rng(0), 20, ["clean", "A", "B"])
    ds = LabeledDataset(
        [*ds.vectors, SparseVector((1,), 3)], [*ds.labels, 1], 3, [*ds.family, "Tiny"]
    )
    report = ev.evaluate_families(ds, fm.TrainConfig(epochs=30, k=2, batch_size=16, learning_rate=0.05))
    status = {r.family: r.status for r in report.rows}
    assert status["Tiny"].startswith("skipped") and status["A"] == "ok"
    assert [r.family for r in report.evaluated] == ["A", "B", "clean"]
    assert "Tiny" in caplog.text
    for r in report.evaluated:
        assert r.metrics.recall == 1.0
    assert report.average == ev.macro_average(report.evaluated)


def test_family_evaluation_needs_families():
    ds = LabeledDataset([SparseVector((0,), 1)] * 4, [1, -1, 1, -1], 1)
    with pytest.raises(ValueError):
        ev.evaluate_families(ds, fm.TrainConfig())


def test_family_csv(tmp_path):
    report = FamilyReport([FamilyRow("A", 12, _metrics(recall=1.0)), FamilyRow("B", 3, status="skipped: fewer than 10 samples")])
    report.average = ev.macro_average(report.evaluated)
    ev.write_family_csv(report, tmp_path / "f.csv")
    rows = list(csv.reader(open(tmp_path / "f.csv")))
    assert rows[0][0] == "family" and rows[-1][0] == "Average"
    assert rows[2][-1].startswith("skipped") and rows[2][2] == ""


def test_metrics_and_roc_csv(tmp_path):
    report = ev.evaluate_scores([1, -1, 1, -1], [0.9, 0.1, 0.4, 0.6])
    ev.write_metrics_csv(report, tmp_path / "m.csv")
    ev.write_roc_csv(report.roc, tmp_path / "r.csv")
    table = {r[0]: r[1] for r in csv.reader(open(tmp_path / "m.csv"))}
    assert float(table["accuracy"]) == 0.5 and table["tp"] == "1"
    assert float(table["auc"]) == 0.75
    roc_rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert roc_rows[0] == ["threshold", "fpr", "tpr"] and roc_rows[-1][0] == "auc"


def test_cross_validate_runs_every_fold(tmp_path):
    ds = _family_dataset(np.random.default_rng(0), 15, ["clean", "A"])
    reports = ev.cross_validate(ds, fm.TrainConfig(epochs=30, k=2, batch_size=8, learning_rate=0.05), k=3)
    assert len(reports) == 3 and all(r.metrics.accuracy == 1.0 for r in reports)
    ev.write_cv_csv(reports, tmp_path / "cv.csv")
    assert open(tmp_path / "cv.csv").read().splitlines()[-1].startswith("mean,1.0")
