import json

import numpy as np
import pytest

from rescap import harness
from rescap.errors import NonFiniteLoss, SingleClass, TooFewSamples
from rescap.featurize import FeatureKind, FeatureMatrix
from rescap.harness import (
    ConfusionCounts,
    MetricsReport,
    TrainSettings,
    confusion_at_threshold,
    cross_validate,
    evaluate_scores,
    metrics_from_counts,
    roc_auc,
    stratified_kfold,
    trapezoid_auc,
    train,
)
from rescap.model import Variant

from synth import separable_global_features
from test_model import tiny_config


def brute_force_metrics(c: ConfusionCounts):
    """Direct arithmetic oracle for the five headline metrics."""
    import math

    total = c.tp + c.tn + c.fp + c.fn
    acc = (c.tp + c.tn) / total if total else 0.0
    sen = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    spe = c.tn / (c.tn + c.fp) if c.tn + c.fp else 0.0
    pre = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    prod = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    mcc = (c.tp * c.tn - c.fp * c.fn) / math.sqrt(prod) if prod else 0.0
    return acc, sen, spe, pre, mcc


def pair_count_auc(scored):
    """Exhaustive positive/negative pair counting with half-credit ties."""
    pos = [s for s, y in scored if y == 1]
    neg = [s for s, y in scored if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestMetrics:
    def test_worked_example(self):
        acc, sen, spe, pre, mcc = metrics_from_counts(ConfusionCounts(50, 40, 5, 5))
        assert acc == pytest.approx(0.90)
        assert sen == pytest.approx(10 / 11)
        assert spe == pytest.approx(8 / 9)
        assert pre == pytest.approx(10 / 11)
        assert mcc == pytest.approx(0.797979797979798, abs=1e-12)

    def test_mcc_second_example(self):
        # 7000 / sqrt(110 * 100 * 100 * 90)
        _, _, _, _, mcc = metrics_from_counts(ConfusionCounts(90, 80, 20, 10))
        assert mcc == pytest.approx(0.70353, abs=5e-6)
        assert mcc == pytest.approx(0.7035264706814484, abs=1e-12)

    def test_perfect_classifier(self):
        vals = metrics_from_counts(ConfusionCounts(7, 7, 0, 0))
        assert vals == (1.0, 1.0, 1.0, 1.0, 1.0)

    def test_degenerate_denominators_are_zero(self):
        acc, sen, spe, pre, mcc = metrics_from_counts(ConfusionCounts(0, 5, 0, 5))
        assert sen == 0.0 and pre == 0.0 and mcc == 0.0

    def test_matches_bruteforce_on_random_counts(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            c = ConfusionCounts(*(int(x) for x in rng.integers(0, 40, size=4)))
            if c.total == 0:
                continue
            assert metrics_from_counts(c) == brute_force_metrics(c)

    def test_counts_from_scores_recount(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = int(rng.integers(1, 30))
            scores = rng.random(n)
            labels = rng.integers(0, 2, size=n)
            thr = float(rng.random())
            c = confusion_at_threshold(scores, labels, thr)
            tp = int(((scores >= thr) & (labels == 1)).sum())
            fp = int(((scores >= thr) & (labels == 0)).sum())
            fn = int(((scores < thr) & (labels == 1)).sum())
            tn = int(((scores < thr) & (labels == 0)).sum())
            assert (c.tp, c.tn, c.fp, c.fn) == (tp, tn, fp, fn)


class TestAuc:
    def test_worked_example(self):
        scored = [(0.9, 1), (0.8, 1), (0.4, 1), (0.7, 0), (0.3, 0), (0.2, 0)]
        auc, _ = roc_auc(scored)
        assert auc == pytest.approx(8 / 9, abs=1e-12)

    def test_separated_is_one(self):
        scored = [(0.9, 1), (0.8, 1), (0.2, 0), (0.1, 0)]
        assert roc_auc(scored)[0] == 1.0

    def test_all_ties_half(self):
        scored = [(0.5, 1), (0.5, 1), (0.5, 0), (0.5, 0)]
        assert roc_auc(scored)[0] == 0.5

    def test_single_class_raises(self):
        with pytest.raises(SingleClass):
            roc_auc([(0.5, 1), (0.2, 1)])

    def test_matches_pair_counting(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n_pos = int(rng.integers(1, 15))
            n_neg = int(rng.integers(1, 15))
            # quantized scores produce plenty of ties
            scored = [(float(rng.integers(0, 6)) / 5.0, 1) for _ in range(n_pos)]
            scored += [(float(rng.integers(0, 6)) / 5.0, 0) for _ in range(n_neg)]
            auc, _ = roc_auc(scored)
            assert auc == pytest.approx(pair_count_auc(scored), abs=1e-9)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(3)
        scored = [(float(s), int(y)) for s, y in zip(rng.random(40), rng.integers(0, 2, 40))]
        if len({y for _, y in scored}) < 2:
            scored[0] = (scored[0][0], 1 - scored[0][1])
        base, _ = roc_auc(scored)
        warped = [(np.exp(3 * s), y) for s, y in scored]
        assert roc_auc(warped)[0] == pytest.approx(base, abs=1e-12)

    def test_roc_curve_properties_and_trapezoid(self):
        rng = np.random.default_rng(4)
        scores = rng.random(30)  # continuous, no ties w.p. 1
        labels = np.r_[np.ones(15, dtype=int), np.zeros(15, dtype=int)]
        scored = list(zip(scores, labels))
        auc, points = roc_auc(scored)
        assert points[0] == (0.0, 0.0) and points[-1] == (1.0, 1.0)
        fprs = [p[0] for p in points]
        tprs = [p[1] for p in points]
        assert all(b >= a for a, b in zip(fprs, fprs[1:]))
        assert all(b >= a for a, b in zip(tprs, tprs[1:]))
        assert trapezoid_auc(points) == pytest.approx(auc, abs=1e-9)

    def test_inverted_scores_flip_auc(self):
        rng = np.random.default_rng(5)
        scored = [(float(s), int(y)) for s, y in zip(rng.random(30), rng.integers(0, 2, 30))]
        scored[0] = (scored[0][0], 1)
        scored[1] = (scored[1][0], 0)
        auc, _ = roc_auc(scored)
        flipped, _ = roc_auc([(1.0 - s, y) for s, y in scored])
        assert flipped == pytest.approx(1.0 - auc, abs=1e-12)


class TestKfold:
    def test_balanced_10_10(self):
        entries = [(f"p{i}", 1) for i in range(10)] + [(f"n{i}", 0) for i in range(10)]
        plan = stratified_kfold(entries, k=5, seed=0)
        for fold in range(5):
            ids = plan.fold_ids(fold)
            assert sum(1 for i in ids if i.startswith("p")) == 2
            assert sum(1 for i in ids if i.startswith("n")) == 2

    def test_deterministic(self):
        entries = [(f"s{i}", i % 2) for i in range(23)]
        p1 = stratified_kfold(entries, k=5, seed=9)
        p2 = stratified_kfold(entries, k=5, seed=9)
        assert p1 == p2

    def test_uneven_sizes_differ_by_one(self):
        entries = [(f"p{i}", 1) for i in range(7)] + [(f"n{i}", 0) for i in range(11)]
        plan = stratified_kfold(entries, k=5, seed=1)
        pos_sizes = [sum(1 for i in plan.fold_ids(f) if i.startswith("p")) for f in range(5)]
        neg_sizes = [sum(1 for i in plan.fold_ids(f) if i.startswith("n")) for f in range(5)]
        assert set(pos_sizes) <= {1, 2} and max(pos_sizes) - min(pos_sizes) <= 1
        assert max(neg_sizes) - min(neg_sizes) <= 1

    def test_partition_exact(self):
        entries = [(f"s{i}", i % 2) for i in range(31)]
        plan = stratified_kfold(entries, k=5, seed=2)
        seen = [i for f in range(5) for i in plan.fold_ids(f)]
        assert sorted(seen) == sorted(i for i, _ in entries)
        assert len(seen) == len(set(seen))

    def test_too_few(self):
        entries = [("a", 1), ("b", 0), ("c", 0), ("d", 0), ("e", 0), ("f", 0)]
        with pytest.raises(TooFewSamples):
            stratified_kfold(entries, k=5, seed=0)


def small_dataset(n=24, seed=0, dim=16):
    feats, labels = separable_global_features(n, seed=seed, dim=dim)
    return list(zip(feats, labels))


class TestTrain:
    def test_epochs_zero_returns_initial(self):
        data = small_dataset()
        params, history = train(tiny_config(), data, settings=TrainSettings(epochs=0))
        fresh = __import__("rescap.model", fromlist=["build"]).build(tiny_config())
        assert history == []
        for k in params.tensors:
            assert np.array_equal(params.tensors[k].data, fresh.tensors[k].data)

    def test_single_class_rejected_before_training(self):
        feats, _ = separable_global_features(8, seed=1, dim=16)
        data = [(f, 1) for f in feats]
        with pytest.raises(SingleClass):
            train(tiny_config(), data, settings=TrainSettings(epochs=3))

    def test_loss_decreases_on_separable(self):
        data = small_dataset(n=24, seed=2)
        settings = TrainSettings(batch_size=8, epochs=40, lr=1e-2, shuffle_seed=0)
        params, history = train(tiny_config(), data, settings=settings)
        assert history[-1].train_loss < history[0].train_loss
        report = harness.evaluate(params, data)
        assert report.acc >= 0.9

    def test_early_stopping_truncates(self):
        data = small_dataset(n=20, seed=3)
        # validation labels are independent noise, so val loss soon worsens
        rng = np.random.default_rng(44)
        val_feats, _ = separable_global_features(12, seed=4, dim=16)
        val = [(f, int(rng.integers(0, 2))) for f in val_feats]
        settings = TrainSettings(batch_size=8, epochs=200, lr=1e-2, patience=3, shuffle_seed=0)
        _, history = train(tiny_config(), data, val_data=val, settings=settings)
        assert len(history) < 200
        assert history[-1].val_loss is not None

    def test_nonfinite_loss_diagnostic(self):
        data = small_dataset(n=8, seed=5)
        cfg = tiny_config()
        # a step this size overflows the batch-norm variance on the next pass
        settings = TrainSettings(batch_size=4, epochs=3, lr=1e155, shuffle_seed=0)
        with np.errstate(over="ignore"), pytest.raises(NonFiniteLoss):
            train(cfg, data, settings=settings)

    def test_history_csv(self, tmp_path):
        data = small_dataset(n=12, seed=6)
        _, history = train(
            tiny_config(), data, val_data=data, settings=TrainSettings(batch_size=6, epochs=2)
        )
        path = tmp_path / "history.csv"
        harness.write_history_csv(history, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,val_acc"
        assert len(lines) == len(history) + 1


class TestEvaluate:
    def test_perfect_scorer(self):
        scores = [0.9, 0.8, 0.1, 0.2]
        labels = [1, 1, 0, 0]
        r = evaluate_scores(scores, labels)
        assert (r.acc, r.sen, r.spe, r.pre, r.mcc, r.auc) == (1, 1, 1, 1, 1, 1)

    def test_single_class_still_reports_thresholded(self):
        r = evaluate_scores([0.9, 0.2], [1, 1])
        assert r.auc is None
        assert r.sen == 0.5
        assert r.roc_points == []

    def test_json_round_trip(self):
        rng = np.random.default_rng(7)
        scores = rng.random(20)
        labels = rng.integers(0, 2, 20)
        labels[0], labels[1] = 1, 0
        r = evaluate_scores(scores, labels.tolist())
        back = MetricsReport.from_dict(json.loads(harness.metrics_json(r)))
        assert back == r


class TestCrossValidate:
    def test_folds_partition_and_summary_mean(self):
        data = small_dataset(n=30, seed=8)
        entries = [(f.source_id, y) for f, y in data]
        feature_map = {f.source_id: f for f, _ in data}
        result = cross_validate(
            tiny_config(), entries, feature_map, k=3, seed=0,
            settings=TrainSettings(batch_size=8, epochs=2),
        )
        assert len(result.per_fold) == 3
        mean, std = result.summary()
        accs = [r.acc for r in result.per_fold]
        assert mean["acc"] == pytest.approx(float(np.mean(accs)), abs=1e-12)
        assert std["acc"] == pytest.approx(float(np.std(accs)), abs=1e-12)
        ids = [i for f in range(3) for i in result.fold_plan.fold_ids(f)]
        assert sorted(ids) == sorted(i for i, _ in entries)

    def test_poisoned_test_id_never_featurized(self):
        data = small_dataset(n=18, seed=9)
        entries = [(f.source_id, y) for f, y in data]
        feature_map = {f.source_id: f for f, _ in data}

        def lookup(seq_id: str) -> FeatureMatrix:
            if seq_id == "poisoned":
                raise AssertionError("test-split id was featurized during CV")
            return feature_map[seq_id]

        cross_validate(
            tiny_config(), entries, lookup, k=3, seed=0,
            settings=TrainSettings(batch_size=8, epochs=1),
        )

    def test_shuffled_labels_auc_near_half(self):
        rng = np.random.default_rng(10)
        feats, labels = separable_global_features(60, seed=11, dim=16)
        shuffled = rng.permutation(labels).tolist()
        entries = [(f.source_id, y) for f, y in zip(feats, shuffled)]
        feature_map = {f.source_id: f for f in feats}
        result = cross_validate(
            tiny_config(), entries, feature_map, k=3, seed=0,
            settings=TrainSettings(batch_size=16, epochs=2),
        )
        mean, _ = result.summary()
        assert 0.25 <= mean["auc"] <= 0.75  # loose bound for the small unit-test split
