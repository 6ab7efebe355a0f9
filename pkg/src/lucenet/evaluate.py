"""Five-fold cross-validation, confusion metrics, ROC/AUC, and reporting.

The positive class is "loose" throughout. Undefined ratios (an empty class)
come back as None, never silently as 0 or NaN. Per-fold ROC curves sweep
every distinct score with ties grouped; the cross-fold average curve is a
vertical average (tpr interpolated on a fixed 101-point fpr grid), and both
the per-fold curves and the average are reported so either reading of a
cross-fold "average ROC" stays inspectable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from . import train as TR
from .data import LABEL_LOOSE, SampleImage
from .rng import derive_seed, substream

log = logging.getLogger(__name__)

FPR_GRID = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class FoldSplit:
    k: int
    val_ids: tuple[tuple[str, ...], ...]
    all_ids: tuple[str, ...]

    def train_ids(self, fold: int) -> tuple[str, ...]:
        held = set(self.val_ids[fold])
        return tuple(i for i in self.all_ids if i not in held)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class RocCurve:
    points: tuple[tuple[float, float], ...]   # (fpr, tpr), (0,0) .. (1,1)
    auc: float


@dataclass
class FoldResult:
    fold: int
    counts: ConfusionCounts
    roc: RocCurve
    val_ids: tuple[str, ...]
    scores: dict[str, float]


@dataclass
class FoldReport:
    folds: list[FoldResult]
    mean_auc: float
    average_curve: tuple[tuple[float, float], ...]
    provenance: dict = field(default_factory=dict)


def make_folds(labeled_ids: list[tuple[str, str]], k: int, seed: int,
               stratified: bool = True) -> FoldSplit:
    """Partition ids into k validation folds, sizes within 1 of each other.

    Stratified mode additionally balances per-class counts within +-1 per
    fold by dealing each class's shuffled ids round-robin, continuing the
    fold pointer across classes.
    """
    n = len(labeled_ids)
    if k < 2:
        raise ValueError("make_folds: k must be >= 2")
    if n < k:
        raise ValueError(f"make_folds: {n} samples cannot fill {k} folds")
    ids = [i for i, _ in labeled_ids]
    if len(set(ids)) != n:
        raise ValueError("make_folds: duplicate sample ids")
    rng = substream(seed, "folds")
    folds: list[list[str]] = [[] for _ in range(k)]
    if stratified:
        by_label: dict[str, list[str]] = {}
        for sample_id, label in labeled_ids:
            by_label.setdefault(label, []).append(sample_id)
        for label in sorted(by_label):
            if len(by_label[label]) < k:
                raise ValueError(f"make_folds: class {label!r} has "
                                 f"{len(by_label[label])} samples, fewer than k={k}")
        offset = 0
        for label in sorted(by_label):
            members = by_label[label]
            order = rng.permutation(len(members))
            for j, idx in enumerate(order):
                folds[(offset + j) % k].append(members[idx])
            offset = (offset + len(members)) % k
    else:
        order = rng.permutation(n)
        for j, idx in enumerate(order):
            folds[j % k].append(ids[idx])
    return FoldSplit(k, tuple(tuple(f) for f in folds), tuple(ids))


def sensitivity(c: ConfusionCounts) -> float | None:
    return c.tp / (c.tp + c.fn) if (c.tp + c.fn) else None


def specificity(c: ConfusionCounts) -> float | None:
    return c.tn / (c.tn + c.fp) if (c.tn + c.fp) else None


def accuracy(c: ConfusionCounts) -> float | None:
    return (c.tp + c.tn) / c.total if c.total else None


def confusion_at_threshold(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionCounts(tp=int((pred & pos).sum()), fp=int((pred & ~pos).sum()),
                           tn=int((~pred & ~pos).sum()), fn=int((~pred & pos).sum()))


def roc_curve(scores, labels) -> RocCurve:
    """Threshold sweep over distinct scores (ties grouped), trapezoidal AUC."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("roc_curve: scores and labels must be equal-length vectors")
    if not np.isfinite(scores).all():
        raise ValueError("roc_curve: scores must be finite")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_curve: both classes must be present")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = (labels[order] == 1)
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += int(sorted_pos[i:j].sum())
        fp += (j - i) - int(sorted_pos[i:j].sum())
        points.append((fp / n_neg, tp / n_pos))
        i = j
    auc = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return RocCurve(tuple(points), auc)


def threshold_at_specificity(scores, labels, min_specificity: float) -> float:
    """Lowest threshold whose specificity still meets the floor.

    Lower thresholds admit more positives, so this is the operating point of
    maximum sensitivity at the requested specificity.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    best = None
    for t in np.unique(scores):
        c = confusion_at_threshold(scores, labels, t)
        spec = specificity(c)
        if spec is not None and spec >= min_specificity:
            best = t if best is None else min(best, t)
    if best is None:
        raise ValueError(f"threshold_at_specificity: no threshold reaches "
                         f"specificity {min_specificity}")
    return float(best)


def vertical_average(curves: list[RocCurve]) -> tuple[tuple[float, float], ...]:
    """tpr averaged across folds at a fixed 101-point fpr grid."""
    grid_tprs = []
    for curve in curves:
        fprs = np.array([p[0] for p in curve.points])
        tprs = np.array([p[1] for p in curve.points])
        # collapse vertical segments: keep the highest tpr at each fpr
        keep_fpr, keep_tpr = [], []
        for f, t in zip(fprs, tprs):
            if keep_fpr and f == keep_fpr[-1]:
                keep_tpr[-1] = max(keep_tpr[-1], t)
            else:
                keep_fpr.append(f)
                keep_tpr.append(t)
        grid_tprs.append(np.interp(FPR_GRID, keep_fpr, keep_tpr))
    mean_tpr = np.mean(grid_tprs, axis=0)
    return tuple(zip(FPR_GRID.tolist(), mean_tpr.tolist()))


@dataclass
class CrossValResult:
    report: FoldReport
    models: list[M.Model]
    histories: list[TR.TrainHistory]
    split: FoldSplit


def cross_validate(dataset: list[SampleImage], model_config: M.DenseNetConfig,
                   train_config: TR.TrainConfig, k: int = 5, seed: int = 0,
                   stratified: bool = True, jobs: int = 1,
                   snapshot_epochs: tuple[int, ...] = ()) -> CrossValResult:
    """Train k fold models and score each validation fold exactly once.

    The no-leakage rule is asserted at runtime, not just by construction:
    the ids used to fit fold i and the ids scored for fold i must be
    disjoint, and every id is scored exactly once across folds. Folds are
    independent; ``jobs`` > 1 trains them in worker threads, with results
    assembled by fold index so the output is identical either way.
    """
    by_id = {s.id: s for s in dataset}
    if len(by_id) != len(dataset):
        raise ValueError("cross_validate: duplicate sample ids in dataset")
    split = make_folds([(s.id, s.label) for s in dataset], k, seed, stratified)

    def run_fold(fold: int) -> tuple[FoldResult, M.Model, TR.TrainHistory]:
        try:
            val_ids = split.val_ids[fold]
            train_ids = split.train_ids(fold)
            assert set(val_ids).isdisjoint(train_ids), \
                f"fold {fold}: train/validation leakage"
            fold_seed = derive_seed(seed, "fold", str(fold))
            fold_config = replace(train_config, seed=fold_seed)
            model = _build_for_regime(model_config, fold_config, fold_seed)
            train_set = [by_id[i] for i in train_ids]
            model, history = TR.fit(model, train_set, fold_config,
                                    snapshot_epochs=snapshot_epochs)
            val_set = [by_id[i] for i in val_ids]
            probs = TR.score_samples(model, val_set)
            labels = np.array([1 if s.label == LABEL_LOOSE else 0 for s in val_set])
            result = FoldResult(
                fold=fold,
                counts=confusion_at_threshold(probs, labels, 0.5),
                roc=roc_curve(probs, labels),
                val_ids=val_ids,
                scores={s.id: float(p) for s, p in zip(val_set, probs)},
            )
            return result, model, history
        except (ValueError, ArithmeticError, OSError, M.CheckpointError) as exc:
            raise RuntimeError(f"cross_validate: fold {fold} failed: {exc}") from exc

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run_fold, range(k)))
    else:
        outcomes = [run_fold(fold) for fold in range(k)]
    folds = [o[0] for o in outcomes]
    models = [o[1] for o in outcomes]
    histories = [o[2] for o in outcomes]

    scored_ids: set[str] = set()
    for result in folds:
        assert scored_ids.isdisjoint(result.val_ids), \
            f"fold {result.fold}: validation ids scored twice"
        scored_ids.update(result.val_ids)
    assert scored_ids == set(split.all_ids), "not every sample was scored once"
    report = FoldReport(
        folds=folds,
        mean_auc=float(np.mean([f.roc.auc for f in folds])),
        average_curve=vertical_average([f.roc for f in folds]),
        provenance={"seed": seed, "k": k, "regime": train_config.regime,
                    "stratified": stratified, "epochs": train_config.epochs,
                    "batch_size": train_config.batch_size,
                    "lr": train_config.lr},
    )
    return CrossValResult(report, models, histories, split)


def _build_for_regime(model_config: M.DenseNetConfig, config: TR.TrainConfig,
                      fold_seed: int) -> M.Model:
    if config.regime == "pretrained":
        if not config.pretext_checkpoint:
            raise ValueError("pretrained regime needs a pretext checkpoint path")
        model = M.build_from_checkpoint(config.pretext_checkpoint,
                                        config=model_config,
                                        head_seed=derive_seed(fold_seed, "head"))
        return M.freeze_backbone(model)
    return M.build(model_config, seed=derive_seed(fold_seed, "init"))


# ---------------------------------------------------------------------------
# report serialisation
# ---------------------------------------------------------------------------

def _fmt(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.6f}"


def report_to_csv(report: FoldReport, path) -> None:
    """fold,tp,fp,tn,fn,sensitivity,specificity,accuracy,auc plus a mean row.

    The mean row totals the counts and arithmetically averages the ratios.
    """
    lines = ["fold,tp,fp,tn,fn,sensitivity,specificity,accuracy,auc"]
    for f in report.folds:
        c = f.counts
        lines.append(f"{f.fold},{c.tp},{c.fp},{c.tn},{c.fn},"
                     f"{_fmt(sensitivity(c))},{_fmt(specificity(c))},"
                     f"{_fmt(accuracy(c))},{f.roc.auc:.6f}")
    tot = ConfusionCounts(tp=sum(f.counts.tp for f in report.folds),
                          fp=sum(f.counts.fp for f in report.folds),
                          tn=sum(f.counts.tn for f in report.folds),
                          fn=sum(f.counts.fn for f in report.folds))

    def mean_of(metric):
        vals = [metric(f.counts) for f in report.folds]
        vals = [v for v in vals if v is not None]
        return sum(vals) / len(vals) if vals else None

    lines.append(f"mean,{tot.tp},{tot.fp},{tot.tn},{tot.fn},"
                 f"{_fmt(mean_of(sensitivity))},{_fmt(mean_of(specificity))},"
                 f"{_fmt(mean_of(accuracy))},{report.mean_auc:.6f}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def report_to_svg(report: FoldReport, path,
                  reader_point: tuple[float, float] | None = None) -> None:
    """ROC plot: per-fold curves light, vertical average bold, chance dashed.

    ``reader_point`` is an optional (fpr, tpr) operating point rendered as a
    marker, for overlaying an external reader's performance.
    """
    size, margin = 480, 48
    span = size - 2 * margin

    def sx(fpr):
        return margin + fpr * span

    def sy(tpr):
        return size - margin - tpr * span

    def polyline(points, style):
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in points)
        return f'<polyline fill="none" {style} points="{coords}"/>'

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" '
        f'fill="none" stroke="#444444" stroke-width="1"/>',
        polyline([(0, 0), (1, 1)],
                 'stroke="#888888" stroke-width="1" stroke-dasharray="6,4"'),
    ]
    for f in report.folds:
        parts.append(polyline(f.roc.points, 'stroke="#9ecae1" stroke-width="1"'))
    parts.append(polyline(report.average_curve, 'stroke="#08519c" stroke-width="2.5"'))
    if reader_point is not None:
        parts.append(f'<circle cx="{sx(reader_point[0]):.2f}" '
                     f'cy="{sy(reader_point[1]):.2f}" r="5" fill="#d62728"/>')
    parts.append(f'<text x="{size // 2}" y="{size - 12}" font-size="13" '
                 f'text-anchor="middle" font-family="sans-serif">'
                 f'false positive rate</text>')
    parts.append(f'<text x="14" y="{size // 2}" font-size="13" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'transform="rotate(-90 14 {size // 2})">true positive rate</text>')
    parts.append(f'<text x="{margin + 6}" y="{margin + 18}" font-size="13" '
                 f'font-family="sans-serif">mean AUC {report.mean_auc:.3f}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
