"""Confusion-matrix metrics, rank-based AUC, group-stratified k-fold CV and
the grid search built on it."""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .data import DatasetManifest
from .ensemble import SPLIT_RATIOS, _class_groups, combine_many, run_parallel, train_ensemble, model_probabilities
from .errors import InfeasibleSplitError, ParameterError, UndefinedMetricError, UsageError
from .model import ModelConfig
from .training import TrainConfig

METRICS = ("sensitivity", "specificity", "balanced_accuracy", "accuracy", "auc")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    tn: int
    fp: int

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fn + other.fn, self.tn + other.tn, self.fp + other.fp)

    def as_table(self) -> np.ndarray:
        """Rows = true (Asymptomatic, Symptomatic), columns = predicted."""
        return np.array([[self.tn, self.fp], [self.fn, self.tp]])

    def render(self) -> str:
        rows = [("Asymptomatic", self.tn, self.fp), ("Symptomatic", self.fn, self.tp)]
        corner = "true \\ predicted"
        lines = [f"{corner:<18}{'Asymptomatic':>14}{'Symptomatic':>14}"]
        lines += [f"{name:<18}{a:>14d}{b:>14d}" for name, a, b in rows]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class MetricsReport:
    sensitivity: float
    specificity: float
    balanced_accuracy: float
    accuracy: float
    auc: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def confusion(labels, predicted) -> ConfusionMatrix:
    labels, predicted = np.asarray(labels), np.asarray(predicted)
    if labels.shape != predicted.shape or labels.ndim != 1:
        raise UsageError(f"labels {labels.shape} and predictions {predicted.shape} must be equal-length vectors")
    for name, arr in (("labels", labels), ("predictions", predicted)):
        if np.any((arr != 0) & (arr != 1)):
            raise ParameterError(f"{name} must be 0 or 1")
    pos, neg = labels == 1, labels == 0
    return ConfusionMatrix(
        tp=int(np.sum(pos & (predicted == 1))),
        fn=int(np.sum(pos & (predicted == 0))),
        tn=int(np.sum(neg & (predicted == 0))),
        fp=int(np.sum(neg & (predicted == 1))),
    )


def metrics(cm: ConfusionMatrix, auc: float | None = None) -> MetricsReport:
    if cm.tp + cm.fn == 0:
        raise UndefinedMetricError("sensitivity is undefined without positive examples")
    if cm.tn + cm.fp == 0:
        raise UndefinedMetricError("specificity is undefined without negative examples")
    sens = cm.tp / (cm.tp + cm.fn)
    spec = cm.tn / (cm.tn + cm.fp)
    acc = (cm.tp + cm.tn) / (cm.tp + cm.fn + cm.tn + cm.fp)
    return MetricsReport(sens, spec, (sens + spec) / 2, acc, auc)


def roc_auc(labels, scores) -> float:
    """Mann-Whitney AUC with midranks: P(pos > neg) + 0.5 P(pos == neg)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise UsageError(f"labels {labels.shape} and scores {scores.shape} differ in shape")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    """(false positive rate, true positive rate) at every distinct threshold."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    thresholds = np.unique(scores)[::-1]
    n_pos, n_neg = max(np.sum(labels == 1), 1), max(np.sum(labels == 0), 1)
    tpr = [0.0] + [np.sum((scores >= t) & (labels == 1)) / n_pos for t in thresholds]
    fpr = [0.0] + [np.sum((scores >= t) & (labels == 0)) / n_neg for t in thresholds]
    return np.array(fpr), np.array(tpr)


def mean_std(values) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


# ---------------------------------------------------------------- folds


def assign_folds(manifest: DatasetManifest, k: int = 4, seed: int = 0) -> np.ndarray:
    """Fold index per entry: per class, shuffled groups are dealt round-robin."""
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    groups = _class_groups(manifest)
    rng = np.random.default_rng([seed, 41])
    fold_of: dict[str, int] = {}
    for label in (0, 1):
        ids = groups[label]
        if len(ids) < k:
            raise InfeasibleSplitError(f"class {label} has {len(ids)} groups, fewer than k={k}")
        for pos, i in enumerate(rng.permutation(len(ids))):
            fold_of[ids[i]] = pos % k
    return np.array([fold_of[e.group] for e in manifest.entries], dtype=np.int64)


def fold_manifest(manifest: DatasetManifest, folds: np.ndarray, fold: int, seed: int = 0) -> DatasetManifest:
    """Fold ``fold`` becomes test; the rest is split train/val per class with
    the train:val proportions of the default three-way split."""
    val_ratio = SPLIT_RATIOS[1] / (SPLIT_RATIOS[0] + SPLIT_RATIOS[1])
    rest = DatasetManifest([e for e, f in zip(manifest.entries, folds) if f != fold], manifest.root)
    groups = _class_groups(rest)
    rng = np.random.default_rng([seed, 43, fold])
    split_of: dict[str, str] = {}
    for label in (0, 1):
        ids = groups[label]
        n_val = int(np.floor(val_ratio * len(ids)))
        if n_val < 1 or n_val >= len(ids):
            raise InfeasibleSplitError(f"fold {fold}: class {label} has {len(ids)} non-test groups, "
                                       "too few for train and val")
        for pos, i in enumerate(rng.permutation(len(ids))):
            split_of[ids[i]] = "val" if pos < n_val else "train"
    splits = ["test" if f == fold else split_of[e.group] for e, f in zip(manifest.entries, folds)]
    return manifest.with_splits(splits)


@dataclass
class FoldResult:
    fold: int
    indices: np.ndarray
    labels: np.ndarray
    scores: np.ndarray
    predicted: np.ndarray
    cm: ConfusionMatrix
    report: MetricsReport
    extra: dict = field(default_factory=dict)


@dataclass
class CVResult:
    folds: list[FoldResult]

    def summary(self) -> dict[str, tuple[float, float]]:
        return {m: mean_std([getattr(f.report, m) for f in self.folds]) for m in METRICS}

    def pooled_confusion(self) -> ConfusionMatrix:
        total = ConfusionMatrix(0, 0, 0, 0)
        for f in self.folds:
            total = total + f.cm
        return total


# A pipeline trains on the manifest's train/val entries and scores its test
# entries: (fold manifest, images, seed) -> (scores, predicted labels, extra).
Pipeline = Callable[[DatasetManifest, np.ndarray, int], tuple]


@dataclass
class EnsemblePipeline:
    model_cfg: ModelConfig = ModelConfig()
    train_cfg: TrainConfig = TrainConfig()
    scheme: str = "average"
    threshold: float = 0.465

    def __call__(self, manifest: DatasetManifest, images: np.ndarray, seed: int):
        ensemble, _ = train_ensemble(manifest, images, self.model_cfg, self.train_cfg, seed,
                                     self.scheme, self.threshold)
        ys = model_probabilities(ensemble, images[manifest.indices("test")])
        p, labels = combine_many(ys, ensemble.scheme, ensemble.threshold)
        return p, labels, {"model_probs": ys}


def _score_fold(manifest, folds, fold, images, pipeline, seed) -> FoldResult:
    fm = fold_manifest(manifest, folds, fold, seed)
    test = fm.indices("test")
    out = pipeline(fm, images, seed * 1000 + fold)
    scores, predicted = np.asarray(out[0], dtype=np.float64), np.asarray(out[1], dtype=np.int64)
    extra = out[2] if len(out) > 2 else {}
    labels = manifest.labels[test]
    cm = confusion(labels, predicted)
    return FoldResult(fold, test, labels, scores, predicted, cm, metrics(cm, roc_auc(labels, scores)), extra)


def _score_fold_star(args):
    return _score_fold(*args)


def kfold_cv(manifest: DatasetManifest, images, pipeline: Pipeline, k: int = 4, seed: int = 0,
             jobs: int = 1) -> CVResult:
    """Group-stratified k-fold CV; every fold is the test set once."""
    folds = assign_folds(manifest, k, seed)
    tasks = [(manifest, folds, i, images, pipeline, seed) for i in range(k)]
    return CVResult(run_parallel(_score_fold_star, tasks, jobs))


def rescore(cv: CVResult, scheme: str, threshold: float) -> CVResult:
    """Re-combine stored per-model probabilities under another scheme/threshold."""
    folds = []
    for f in cv.folds:
        p, pred = combine_many(f.extra["model_probs"], scheme, threshold)
        cm = confusion(f.labels, pred)
        folds.append(replace(f, scores=p, predicted=pred, cm=cm, report=metrics(cm, roc_auc(f.labels, p))))
    return CVResult(folds)


# ---------------------------------------------------------------- search


def expand_grid(grid: dict) -> list[dict]:
    """Cartesian product of ``{"model": {...}, "train": {...}, "ensemble": {...}}``
    where each leaf maps a field to a list of candidate values."""
    if not grid or not any(grid.values()):
        raise ParameterError("search grid is empty")
    unknown = set(grid) - {"model", "train", "ensemble"}
    if unknown:
        raise ParameterError(f"unknown grid sections {sorted(unknown)}")
    axes = [(sec, key, list(vals)) for sec in ("model", "train", "ensemble")
            for key, vals in sorted(grid.get(sec, {}).items())]
    for sec, key, vals in axes:
        if not vals:
            raise ParameterError(f"grid axis {sec}.{key} has no values")
    points = []
    for combo in itertools.product(*(vals for _, _, vals in axes)):
        point: dict = {"model": {}, "train": {}, "ensemble": {}}
        for (sec, key, _), v in zip(axes, combo):
            point[sec][key] = v
        points.append(point)
    return points


@dataclass
class SearchRow:
    point: dict
    summary: dict[str, tuple[float, float]]

    @property
    def key(self) -> str:
        return json.dumps(self.point, sort_keys=True)


def hyperparameter_search(grid: dict, manifest: DatasetManifest, images, base_model: ModelConfig = ModelConfig(),
                          base_train: TrainConfig = TrainConfig(), base_scheme: str = "average",
                          base_threshold: float = 0.465, k: int = 4, seed: int = 0, jobs: int = 1) -> list[SearchRow]:
    """k-fold CV for every grid point, ranked by mean balanced accuracy, then
    mean AUC, then the canonical JSON of the point.

    Points that differ only in scheme/threshold share one set of trained
    ensembles.
    """
    points = expand_grid(grid)
    cache: dict[str, CVResult] = {}
    rows = []
    for point in points:
        model_cfg = replace(base_model, **point["model"])
        train_cfg = replace(base_train, **point["train"])
        scheme = point["ensemble"].get("scheme", base_scheme)
        threshold = float(point["ensemble"].get("threshold", base_threshold))
        unknown = set(point["ensemble"]) - {"scheme", "threshold"}
        if unknown:
            raise ParameterError(f"unknown ensemble grid keys {sorted(unknown)}")
        train_key = json.dumps([model_cfg.to_dict(), train_cfg.to_dict()], sort_keys=True)
        if train_key not in cache:
            cache[train_key] = kfold_cv(manifest, images, EnsemblePipeline(model_cfg, train_cfg, scheme, threshold),
                                        k, seed, jobs)
        rows.append(SearchRow(point, rescore(cache[train_key], scheme, threshold).summary()))
    rows.sort(key=lambda r: (-r.summary["balanced_accuracy"][0], -r.summary["auc"][0], r.key))
    return rows


# ---------------------------------------------------------------- CSV output


def _fmt(x) -> str:
    return repr(float(x))


def write_fold_csv(cv: CVResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", *METRICS, "tp", "fn", "tn", "fp"])
        for f in cv.folds:
            w.writerow([f.fold + 1, *(_fmt(getattr(f.report, m)) for m in METRICS),
                        f.cm.tp, f.cm.fn, f.cm.tn, f.cm.fp])


def write_summary_csv(cv: CVResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "mean", "std"])
        for m, (mu, sd) in cv.summary().items():
            w.writerow([m, _fmt(mu), _fmt(sd)])


def write_search_csv(rows: list[SearchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "config", *(f"{m}_{s}" for m in METRICS for s in ("mean", "std"))])
        for rank, r in enumerate(rows, start=1):
            w.writerow([rank, r.key, *(_fmt(v) for m in METRICS for v in r.summary[m])])
