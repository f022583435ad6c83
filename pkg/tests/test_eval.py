import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from colodistill.eval import (
    MetricError,
    ScoredSet,
    bootstrap_ci,
    candidate_thresholds,
    confusion_metrics,
    dice,
    metric_report,
    roc_auc,
    youden_index,
    youden_point,
)


def pairs_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def count_confusion(scores, labels, thr):
    tp = sum(1 for s, y in zip(scores, labels) if s >= thr and y == 1)
    fn = sum(1 for s, y in zip(scores, labels) if s < thr and y == 1)
    tn = sum(1 for s, y in zip(scores, labels) if s < thr and y == 0)
    fp = sum(1 for s, y in zip(scores, labels) if s >= thr and y == 0)
    return (tp + tn) / len(scores), tp / (tp + fn), tn / (tn + fp)


def random_set(rng, n_max=50, ties=False):
    n = int(rng.integers(2, n_max + 1))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = rng.integers(0, 6, n) / 5.0 if ties else rng.normal(size=n) + labels
    return scores, labels


class TestRocAuc:
    def test_perfect_separation(self):
        assert roc_auc(ScoredSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0

    def test_hand_case(self):
        assert roc_auc(ScoredSet([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])) == 0.75

    def test_all_equal(self):
        assert roc_auc(ScoredSet([0.3] * 6, [0, 1, 0, 1, 1, 0])) == 0.5

    def test_single_class(self):
        with pytest.raises(MetricError):
            roc_auc(ScoredSet([0.1, 0.2], [1, 1]))

    @pytest.mark.parametrize("ties", [False, True])
    def test_matches_pairs_oracle(self, ties):
        rng = np.random.default_rng(3)
        for _ in range(100):
            s, y = random_set(rng, ties=ties)
            assert abs(roc_auc(ScoredSet(s, y)) - pairs_auc(s, y)) <= 1e-12

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(4)
        s, y = random_set(rng)
        a = roc_auc(ScoredSet(s, y))
        assert roc_auc(ScoredSet(np.exp(3 * s) + 1, y)) == pytest.approx(a, abs=1e-12)

    def test_negation_complement(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            s, y = random_set(rng)
            total = roc_auc(ScoredSet(s, y)) + roc_auc(ScoredSet(-s, y))
            assert total == pytest.approx(1.0, abs=1e-12)


class TestConfusion:
    def test_threshold_below_min(self):
        _, sen, spe = confusion_metrics(ScoredSet([0.2, 0.5, 0.7], [0, 1, 1]), -1.0)
        assert (sen, spe) == (1.0, 0.0)

    def test_threshold_above_max(self):
        _, sen, spe = confusion_metrics(ScoredSet([0.2, 0.5, 0.7], [0, 1, 1]), 2.0)
        assert (sen, spe) == (0.0, 1.0)

    def test_six_point_case(self):
        scores = [0.1, 0.3, 0.5, 0.5, 0.7, 0.9]
        labels = [0, 1, 0, 1, 0, 1]
        # >= 0.5 -> predicted [0,0,1,1,1,1]: TP=2, FN=1, TN=1, FP=2
        got = confusion_metrics(ScoredSet(scores, labels), 0.5)
        assert got == pytest.approx((3 / 6, 2 / 3, 1 / 3))
        assert got == pytest.approx(count_confusion(scores, labels, 0.5))


def exhaustive_best_j(scores, labels):
    u = sorted(set(scores))
    cands = [-math.inf] + [(a + b) / 2 for a, b in zip(u, u[1:])] + [math.inf]
    best = -2.0
    for t in cands:
        _, sen, spe = count_confusion(scores, labels, t)
        best = max(best, sen + spe - 1)
    return best


class TestYouden:
    def test_perfect_separation(self):
        s = ScoredSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert youden_index(s, youden_point(s)) == 1.0

    def test_all_equal_sentinel(self):
        s = ScoredSet([0.4] * 5, [0, 1, 1, 0, 1])
        t = youden_point(s)
        assert math.isinf(t)
        assert youden_index(s, t) == 0.0

    @pytest.mark.parametrize("ties", [False, True])
    def test_exhaustive_scan(self, ties):
        rng = np.random.default_rng(11)
        for _ in range(100):
            s, y = random_set(rng, ties=ties)
            t = youden_point(ScoredSet(s, y))
            _, sen, spe = count_confusion(list(s), list(y), t)
            assert sen + spe - 1 == pytest.approx(exhaustive_best_j(list(s), list(y)), abs=1e-12)

    def test_tie_prefers_specificity(self):
        # t=0.25 -> sen 1, spe 0.5; t=0.6 -> sen .5, spe 1: equal J, pick higher spe
        s = ScoredSet([0.2, 0.3, 0.5, 0.7], [0, 1, 0, 1])
        t = youden_point(s)
        _, sen, spe = confusion_metrics(s, t)
        assert spe == 1.0 and sen == 0.5

    def test_candidates_include_sentinels(self):
        c = candidate_thresholds(np.array([1.0, 2.0, 2.0, 4.0]))
        assert list(c) == [-math.inf, 1.5, 3.0, math.inf]


class TestDice:
    def test_identical(self):
        m = np.zeros((4, 4), bool)
        m[1:3, 1:3] = True
        assert dice(m, m) == 1.0

    def test_half_overlap(self):
        a = np.array([[1, 1, 0]])
        b = np.array([[0, 1, 1]])
        assert dice(a, b) == 0.5

    def test_disjoint(self):
        assert dice(np.array([[1, 0]]), np.array([[0, 1]])) == 0.0

    def test_both_empty(self):
        assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            dice(np.zeros((3, 3)), np.zeros((3, 4)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetric_and_identity(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((5, 6)) < 0.4
        b = rng.random((5, 6)) < 0.4
        assert dice(a, b) == dice(b, a)
        if a.any():
            assert (dice(a, b) == 1.0) == bool((a == b).all())


class TestBootstrap:
    def test_degenerate_zero_width(self):
        s = ScoredSet([0.2, 0.2, 0.2, 0.2], [1, 1, 1, 1])
        acc = lambda t: float(np.mean((t.scores >= 0.5) == t.labels))
        assert bootstrap_ci(acc, s, 200, seed=1) == (0.0, 0.0)

    def test_seed_determinism(self):
        rng = np.random.default_rng(0)
        sc, y = random_set(rng)
        s = ScoredSet(sc, y)
        assert bootstrap_ci(roc_auc, s, 100, seed=9) == bootstrap_ci(roc_auc, s, 100, seed=9)

    def test_contains_point_estimate(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            n = int(rng.integers(20, 60))
            y = rng.integers(0, 2, n)
            y[:2] = [0, 1]
            sc = rng.normal(size=n) + y
            s = ScoredSet(sc, y)
            lo, hi = bootstrap_ci(roc_auc, s, 200, seed=int(rng.integers(1 << 30)))
            assert lo <= roc_auc(s) <= hi

    def test_redraw_on_single_class(self):
        s = ScoredSet([0.1, 0.9, 0.5], [0, 1, 0])
        lo, hi = bootstrap_ci(roc_auc, s, 50, seed=0)
        assert 0.0 <= lo <= hi <= 1.0

    def test_rejects_zero_resamples(self):
        with pytest.raises(MetricError):
            bootstrap_ci(roc_auc, ScoredSet([0, 1], [0, 1]), 0)


def test_metric_report_json_fields():
    rng = np.random.default_rng(2)
    sc, y = random_set(rng)
    r = metric_report(ScoredSet(sc, y), n_resamples=50)
    d = json.loads(r.to_json())
    assert set(d) == {"auc", "acc", "sen", "spe", "ci", "threshold"}
    for k in ("auc", "acc", "sen", "spe"):
        lo, hi = d["ci"][k]
        assert lo <= d[k] <= hi
