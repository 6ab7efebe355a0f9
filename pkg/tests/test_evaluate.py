import numpy as np
import pytest

from conftest import toy_separable_set
from lucenet import evaluate as E
from lucenet.data import IDENTITY_AUGMENT
from lucenet.evaluate import (ConfusionCounts, FoldReport, accuracy,
                              confusion_at_threshold, cross_validate, make_folds,
                              roc_curve, sensitivity, specificity,
                              threshold_at_specificity)
from lucenet.model import DenseNetConfig
from lucenet.train import TrainConfig

TINY = DenseNetConfig(input_size=16, stem_filters=4, growth_rate=2,
                      block_layout=(1, 1), compression=0.5,
                      head_dims=(4, 4, 4), head_override=True)


def pairwise_auc(scores, labels):
    """O(n^2) ordering statistic: P(pos outscores neg), ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else (0.5 if p == q else 0.0)
    return wins / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# confusion metrics (reported clinical arithmetic)
# ---------------------------------------------------------------------------

def test_reported_cnn_operating_point():
    c = ConfusionCounts(tp=16, fn=1, tn=22, fp=1)
    assert round(sensitivity(c), 2) == 0.94
    assert round(specificity(c), 2) == 0.96
    assert round(accuracy(c), 2) == 0.95
    assert accuracy(c) == 38 / 40


def test_reported_reader_operating_point():
    c = ConfusionCounts(tp=9, fn=8, tn=22, fp=1)
    assert round(sensitivity(c), 2) == 0.53
    assert round(specificity(c), 2) == 0.96


def test_undefined_metrics_return_marker():
    no_pos = ConfusionCounts(tp=0, fn=0, tn=5, fp=2)
    assert sensitivity(no_pos) is None
    assert specificity(no_pos) == 5 / 7
    no_neg = ConfusionCounts(tp=3, fn=2, tn=0, fp=0)
    assert specificity(no_neg) is None


def test_metrics_permutation_invariant():
    rng = np.random.default_rng(0)
    scores = rng.random(30)
    labels = (rng.random(30) < 0.4).astype(int)
    base = confusion_at_threshold(scores, labels, 0.5)
    perm = rng.permutation(30)
    shuffled = confusion_at_threshold(scores[perm], labels[perm], 0.5)
    assert base == shuffled


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

def label_mix(n, seed=0, pos_frac=0.45):
    rng = np.random.default_rng(seed)
    return [(f"s{i:04d}", "loose" if rng.random() < pos_frac else "well_fixed")
            for i in range(n)]


def test_forty_samples_five_folds_of_eight():
    split = make_folds(label_mix(40), k=5, seed=1)
    assert all(len(v) == 8 for v in split.val_ids)


def test_leave_one_out():
    items = label_mix(12)
    split = make_folds(items, k=12, seed=2, stratified=False)
    assert all(len(v) == 1 for v in split.val_ids)


def test_fold_partition_laws_random_draws():
    # spot sample of the acceptance sweep (1000 draws there)
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(10, 80))
        k = int(rng.integers(2, min(n, 9)))
        stratified = bool(rng.integers(2))
        items = label_mix(n, seed=int(rng.integers(1 << 30)))
        counts = {lbl: sum(1 for _, l in items if l == lbl)
                  for lbl in ("loose", "well_fixed")}
        if stratified and min(counts.values()) < k:
            continue
        split = make_folds(items, k, seed=int(rng.integers(1 << 30)),
                           stratified=stratified)
        flat = [i for fold in split.val_ids for i in fold]
        assert sorted(flat) == sorted(i for i, _ in items)       # exhaustive
        assert len(set(flat)) == n                                # disjoint
        sizes = [len(v) for v in split.val_ids]
        assert max(sizes) - min(sizes) <= 1                       # balanced
        if stratified:
            by_label = dict(items)
            for lbl in ("loose", "well_fixed"):
                per = [sum(1 for i in fold if by_label[i] == lbl)
                       for fold in split.val_ids]
                assert max(per) - min(per) <= 1                   # class balance
        for fold in range(k):
            train = split.train_ids(fold)
            assert set(train).isdisjoint(split.val_ids[fold])
            assert len(train) + len(split.val_ids[fold]) == n


def test_fold_errors():
    with pytest.raises(ValueError, match="cannot fill"):
        make_folds(label_mix(3), k=5, seed=0)
    skewed = [(f"s{i}", "loose" if i < 2 else "well_fixed") for i in range(20)]
    with pytest.raises(ValueError, match="fewer than k"):
        make_folds(skewed, k=5, seed=0, stratified=True)


# ---------------------------------------------------------------------------
# ROC / AUC
# ---------------------------------------------------------------------------

def test_perfect_separation_auc_one():
    roc = roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert roc.auc == 1.0
    assert roc.points[0] == (0.0, 0.0) and roc.points[-1] == (1.0, 1.0)


def test_random_scores_auc_near_half():
    rng = np.random.default_rng(7)
    scores = rng.random(10_000)
    labels = (rng.random(10_000) < 0.5).astype(int)
    assert abs(roc_curve(scores, labels).auc - 0.5) < 0.02


def test_trapezoid_equals_pairwise_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(4, 200))
        labels = np.zeros(n, dtype=int)
        labels[:max(1, n // 3)] = 1
        rng.shuffle(labels)
        if rng.random() < 0.5:
            scores = rng.random(n)
        else:  # heavy ties
            scores = rng.integers(0, 4, n).astype(float) / 3.0
        auc = roc_curve(scores, labels).auc
        assert abs(auc - pairwise_auc(scores, labels)) < 1e-12


def test_roc_invariant_under_monotone_transform():
    rng = np.random.default_rng(13)
    scores = rng.random(64)
    labels = (rng.random(64) < 0.5).astype(int)
    base = roc_curve(scores, labels)
    warped = roc_curve(np.exp(3 * scores) + 7, labels)
    assert base.points == warped.points
    assert base.auc == warped.auc


def test_auc_flips_with_labels():
    rng = np.random.default_rng(17)
    scores = rng.random(40)
    labels = (rng.random(40) < 0.5).astype(int)
    a = roc_curve(scores, labels).auc
    b = roc_curve(scores, 1 - labels).auc
    assert abs(a + b - 1.0) < 1e-12


def test_roc_rejects_single_class():
    with pytest.raises(ValueError, match="both classes"):
        roc_curve([0.3, 0.4], [1, 1])


def test_threshold_at_specificity():
    scores = np.array([0.9, 0.8, 0.7, 0.6, 0.4, 0.3, 0.2, 0.1])
    labels = np.array([1, 1, 0, 1, 0, 0, 0, 0])
    t = threshold_at_specificity(scores, labels, 0.8)
    c = confusion_at_threshold(scores, labels, t)
    assert specificity(c) >= 0.8
    assert sensitivity(c) == 1.0


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_crossval():
    samples = toy_separable_set(n=24)
    config = TrainConfig(epochs=2, batch_size=4, lr=1e-3, regime="retrained",
                         seed=0, augment=IDENTITY_AUGMENT)
    return cross_validate(samples, TINY, config, k=4, seed=5), samples


def test_every_sample_scored_exactly_once(toy_crossval):
    result, samples = toy_crossval
    scored = [i for f in result.report.folds for i in f.scores]
    assert sorted(scored) == sorted(s.id for s in samples)


def test_mean_auc_is_arithmetic_mean(toy_crossval):
    result, _ = toy_crossval
    per_fold = [f.roc.auc for f in result.report.folds]
    assert abs(result.report.mean_auc - np.mean(per_fold)) < 1e-12


def test_average_curve_spans_unit_interval(toy_crossval):
    result, _ = toy_crossval
    curve = result.report.average_curve
    assert len(curve) == 101
    assert curve[0][0] == 0.0 and curve[-1][0] == 1.0
    assert curve[-1][1] == 1.0
    tprs = [t for _, t in curve]
    assert all(b >= a - 1e-12 for a, b in zip(tprs, tprs[1:]))


def test_report_csv_structure(toy_crossval, tmp_path):
    result, _ = toy_crossval
    path = tmp_path / "report.csv"
    E.report_to_csv(result.report, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "fold,tp,fp,tn,fn,sensitivity,specificity,accuracy,auc"
    assert len(lines) == 1 + 4 + 1
    assert lines[-1].startswith("mean,")


def test_report_svg_structure(toy_crossval, tmp_path):
    result, _ = toy_crossval
    path = tmp_path / "roc.svg"
    E.report_to_svg(result.report, path, reader_point=(1 - 0.96, 0.53))
    text = path.read_text()
    assert text.count("<polyline") == 1 + 4 + 1   # chance + folds + average
    assert "<circle" in text
    assert "</svg>" in text


def test_undefined_metric_written_as_marker(tmp_path):
    report = FoldReport(
        folds=[E.FoldResult(0, ConfusionCounts(0, 0, 4, 0),
                            roc_curve([0.9, 0.1], [1, 0]), ("a",), {"a": 0.9})],
        mean_auc=1.0, average_curve=((0.0, 0.0), (1.0, 1.0)))
    path = tmp_path / "r.csv"
    E.report_to_csv(report, path)
    assert "undefined" in path.read_text()
