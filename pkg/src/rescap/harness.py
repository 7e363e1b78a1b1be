"""Training loop, stratified cross-validation and evaluation metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from rescap import autodiff as ad
from rescap import model as mdl
from rescap.errors import (
    NonFiniteGradient,
    NonFiniteLoss,
    NonFiniteValue,
    SingleClass,
    TooFewSamples,
)
from rescap.featurize import FeatureMatrix

METRIC_KEYS = ("acc", "sen", "spe", "pre", "mcc", "auc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion_at_threshold(
    scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5
) -> ConfusionCounts:
    tp = tn = fp = fn = 0
    for s, y in zip(scores, labels):
        pred = s >= threshold
        if y == 1:
            tp, fn = (tp + 1, fn) if pred else (tp, fn + 1)
        else:
            fp, tn = (fp + 1, tn) if pred else (fp, tn + 1)
    return ConfusionCounts(tp, tn, fp, fn)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def metrics_from_counts(c: ConfusionCounts) -> tuple[float, float, float, float, float]:
    """Accuracy, sensitivity, specificity, precision and MCC from counts.

    Degenerate denominators yield 0.0 (MCC's zero denominator included).
    """
    acc = _ratio(c.tp + c.tn, c.total)
    sen = _ratio(c.tp, c.tp + c.fn)
    spe = _ratio(c.tn, c.tn + c.fp)
    pre = _ratio(c.tp, c.tp + c.fp)
    denom = math.sqrt(
        float(c.tp + c.fp) * float(c.tp + c.fn) * float(c.tn + c.fp) * float(c.tn + c.fn)
    )
    mcc = (c.tp * c.tn - c.fp * c.fn) / denom if denom > 0 else 0.0
    return acc, sen, spe, pre, mcc


def roc_auc(scored: Sequence[tuple[float, int]]) -> tuple[float, list[tuple[float, float]]]:
    """Rank-based AUC (ties count half) plus the swept ROC curve.

    AUC equals the probability that a random positive outscores a random
    negative; the curve is swept over all distinct score thresholds and runs
    from (0, 0) to (1, 1).
    """
    scores = np.array([s for s, _ in scored], dtype=np.float64)
    labels = np.array([y for _, y in scored], dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both classes present")

    # average ranks (1-based) handle ties exactly like pair counting with 0.5
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    auc = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    points = [(0.0, 0.0)]
    for thr in sorted(set(scores), reverse=True):
        pred = scores >= thr
        tpr = float((pred & (labels == 1)).sum()) / n_pos
        fpr = float((pred & (labels == 0)).sum()) / n_neg
        points.append((fpr, tpr))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return auc, points


def trapezoid_auc(points: Sequence[tuple[float, float]]) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


@dataclass
class MetricsReport:
    acc: float
    sen: float
    spe: float
    pre: float
    mcc: float
    auc: Optional[float]
    threshold: float
    confusion: ConfusionCounts
    roc_points: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "sen": self.sen,
            "spe": self.spe,
            "pre": self.pre,
            "mcc": self.mcc,
            "auc": self.auc,
            "threshold": self.threshold,
            "confusion": {
                "tp": self.confusion.tp,
                "tn": self.confusion.tn,
                "fp": self.confusion.fp,
                "fn": self.confusion.fn,
            },
            "roc": [[fpr, tpr] for fpr, tpr in self.roc_points],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            acc=d["acc"],
            sen=d["sen"],
            spe=d["spe"],
            pre=d["pre"],
            mcc=d["mcc"],
            auc=d["auc"],
            threshold=d["threshold"],
            confusion=ConfusionCounts(**d["confusion"]),
            roc_points=[tuple(p) for p in d["roc"]],
        )


def evaluate_scores(
    scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5
) -> MetricsReport:
    """Metrics at a threshold plus threshold-free ROC/AUC.

    With a single class present every thresholded metric is still emitted
    and only AUC is withheld.
    """
    confusion = confusion_at_threshold(scores, labels, threshold)
    acc, sen, spe, pre, mcc = metrics_from_counts(confusion)
    try:
        auc, points = roc_auc(list(zip(scores, labels)))
    except SingleClass:
        auc, points = None, []
    return MetricsReport(acc, sen, spe, pre, mcc, auc, threshold, confusion, points)


# --- folds -------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    seed: int
    k: int
    assignments: dict[str, int]

    def fold_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f == fold]


def stratified_kfold(
    entries: Sequence[tuple[str, int]], k: int = 5, seed: int = 0
) -> FoldPlan:
    """Shuffle each class with the seed, then deal ids round-robin to folds.

    Fold sizes per class differ by at most one; needs >= k samples per class.
    """
    by_class: dict[int, list[str]] = {0: [], 1: []}
    for seq_id, label in entries:
        by_class[int(label)].append(seq_id)
    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    for label in (0, 1):
        ids = by_class[label]
        if len(ids) < k:
            raise TooFewSamples(f"class {label} has {len(ids)} samples for {k} folds")
        perm = rng.permutation(len(ids))
        for pos, idx in enumerate(perm):
            assignments[ids[idx]] = pos % k
    # keep entry order for reproducible iteration
    ordered = {seq_id: assignments[seq_id] for seq_id, _ in entries}
    return FoldPlan(seed=seed, k=k, assignments=ordered)


# --- training ------------------------------------------------------------------

@dataclass
class TrainSettings:
    batch_size: int = 128
    lr: float = 1e-3
    epochs: int = 100
    patience: int = 10
    clip_norm: float = 5.0
    shuffle_seed: int = 0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: Optional[float] = None
    val_acc: Optional[float] = None


def _batches(n: int, batch_size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


def _forward_scores(params: mdl.ModelParams, feats: list[FeatureMatrix], batch_size: int) -> np.ndarray:
    scores = []
    for sel in _batches(len(feats), batch_size):
        x = mdl.stack_inputs([feats[i] for i in sel], params.config)
        scores.append(mdl.forward(params, x, mode="infer").data.reshape(-1))
    return np.concatenate(scores)


def _mean_bce(scores: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(scores, ad.BCE_EPS, 1.0 - ad.BCE_EPS)
    return float(-(labels * np.log(p) + (1 - labels) * np.log1p(-p)).mean())


def train(
    config: mdl.ModelConfig,
    train_data: Sequence[tuple[FeatureMatrix, int]],
    val_data: Optional[Sequence[tuple[FeatureMatrix, int]]] = None,
    settings: Optional[TrainSettings] = None,
) -> tuple[mdl.ModelParams, list[EpochStats]]:
    """Minibatch Adam on binary cross-entropy with seeded shuffling.

    With validation data, training stops early once the validation loss has
    not improved for ``patience`` epochs and the best-validation parameters
    are returned.
    """
    settings = settings or TrainSettings()
    if not train_data:
        raise TooFewSamples("training requires at least one sample")
    labels = np.array([y for _, y in train_data], dtype=np.float64)
    if len(set(labels.tolist())) < 2:
        raise SingleClass("training data contains a single class")

    params = mdl.build(config)
    history: list[EpochStats] = []
    if settings.epochs == 0:
        return params, history

    feats = [f for f, _ in train_data]
    opt = ad.Adam(params.trainable(), lr=settings.lr)
    rng = np.random.default_rng(settings.shuffle_seed)
    best: Optional[mdl.ModelParams] = None
    best_val = math.inf
    stale = 0

    for epoch in range(settings.epochs):
        order = rng.permutation(len(feats))
        total_loss = 0.0
        for sel in _batches(len(feats), settings.batch_size, order):
            x = mdl.stack_inputs([feats[i] for i in sel], config)
            y = labels[sel].reshape(-1, 1)
            try:
                prob = mdl.forward(params, x, mode="train")
                loss = ad.bce_loss(prob, y)
                opt.zero_grad()
                ad.backward(loss)
                ad.clip_global_norm(params.trainable(), settings.clip_norm)
                opt.step()
            except (NonFiniteValue, NonFiniteGradient) as exc:
                raise NonFiniteLoss(f"epoch {epoch}: {exc}") from exc
            total_loss += float(loss.data) * len(sel)
        stats = EpochStats(epoch=epoch, train_loss=total_loss / len(feats))

        if val_data:
            val_scores = _forward_scores(params, [f for f, _ in val_data], settings.batch_size)
            val_labels = np.array([y for _, y in val_data], dtype=np.float64)
            stats.val_loss = _mean_bce(val_scores, val_labels)
            stats.val_acc = float(((val_scores >= 0.5) == (val_labels == 1)).mean())
            if stats.val_loss < best_val:
                best_val = stats.val_loss
                best = params.copy()
                stale = 0
            else:
                stale += 1
        history.append(stats)
        if val_data and stale >= settings.patience:
            break

    if best is not None:
        params = best
    return params, history


def evaluate(
    params: mdl.ModelParams,
    data: Sequence[tuple[FeatureMatrix, int]],
    threshold: float = 0.5,
    batch_size: int = 128,
) -> MetricsReport:
    """Inference-mode metrics on labelled features."""
    scores = _forward_scores(params, [f for f, _ in data], batch_size)
    return evaluate_scores(scores, [y for _, y in data], threshold)


# --- cross-validation -----------------------------------------------------------

@dataclass
class CVResult:
    per_fold: list[MetricsReport]
    fold_plan: FoldPlan

    def summary(self) -> tuple[dict, dict]:
        mean: dict[str, Optional[float]] = {}
        std: dict[str, Optional[float]] = {}
        for key in METRIC_KEYS:
            vals = [getattr(r, key) for r in self.per_fold]
            if any(v is None for v in vals):
                mean[key] = std[key] = None
            else:
                mean[key] = float(np.mean(vals))
                std[key] = float(np.std(vals))
        return mean, std

    def to_dict(self) -> dict:
        mean, std = self.summary()
        return {
            "k": self.fold_plan.k,
            "seed": self.fold_plan.seed,
            "per_fold": [r.to_dict() for r in self.per_fold],
            "mean": mean,
            "std": std,
        }


FeatureSource = Mapping[str, FeatureMatrix] | Callable[[str], FeatureMatrix]


def _lookup(features: FeatureSource, seq_id: str) -> FeatureMatrix:
    if callable(features):
        return features(seq_id)
    return features[seq_id]


def cross_validate(
    config: mdl.ModelConfig,
    entries: Sequence[tuple[str, int]],
    features: FeatureSource,
    k: int = 5,
    seed: int = 0,
    settings: Optional[TrainSettings] = None,
) -> CVResult:
    """Train k models on stratified folds of the training entries.

    Each fold's held-out part doubles as its validation set.  Only ids
    listed in ``entries`` are ever featurized, so test-split rows can never
    leak in.
    """
    plan = stratified_kfold(entries, k=k, seed=seed)
    label_by_id = dict(entries)
    reports: list[MetricsReport] = []
    for fold in range(k):
        train_pairs = [
            (_lookup(features, sid), label_by_id[sid])
            for sid, f in plan.assignments.items()
            if f != fold
        ]
        held_pairs = [
            (_lookup(features, sid), label_by_id[sid])
            for sid, f in plan.assignments.items()
            if f == fold
        ]
        fold_config = mdl.ModelConfig.from_dict({**config.to_dict(), "seed": config.seed + fold})
        params, _ = train(fold_config, train_pairs, held_pairs, settings)
        reports.append(evaluate(params, held_pairs))
    return CVResult(per_fold=reports, fold_plan=plan)


# --- artifacts -------------------------------------------------------------------

def write_history_csv(history: Sequence[EpochStats], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for row in history:
            writer.writerow(
                [
                    row.epoch,
                    f"{row.train_loss:.10g}",
                    "" if row.val_loss is None else f"{row.val_loss:.10g}",
                    "" if row.val_acc is None else f"{row.val_acc:.10g}",
                ]
            )


def metrics_json(report: MetricsReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
