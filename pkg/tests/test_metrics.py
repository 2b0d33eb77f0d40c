import numpy as np
import pytest

from femurcad import metrics as M
from femurcad.tensor import ContractError

from .helpers import (ari_pairs_oracle, clustering_accuracy_oracle,
                      nmi_entropy_oracle, prf_loops_oracle)


# -- classification report -----------------------------------------------------


def test_report_perfect_predictions():
    y = [0, 1, 2, 3, 4, 5, 6]
    report = M.classification_report(y, y, num_classes=7)
    assert report.accuracy == 1.0
    assert report.macro_f1 == 1.0
    assert report.macro_accuracy == 1.0
    assert all(m.precision == m.recall == m.f1 == 1.0 for m in report.per_class.values())


def test_report_hand_computed_two_class_case():
    report = M.classification_report([0, 0, 1, 1], [0, 1, 0, 1], num_classes=2)
    for m in report.per_class.values():
        assert m.precision == 0.5 and m.recall == 0.5
    assert report.macro_f1 == 0.5


def test_report_class_never_predicted_gets_zero():
    report = M.classification_report([2, 2, 0, 1], [0, 1, 0, 1], num_classes=3)
    assert report.per_class[2].precision == 0.0
    assert report.per_class[2].recall == 0.0


def test_report_micro_accuracy_equals_confusion_trace():
    rng = np.random.default_rng(0)
    y_true = rng.integers(0, 4, size=60)
    y_pred = rng.integers(0, 4, size=60)
    report = M.classification_report(y_true, y_pred, num_classes=4)
    assert report.accuracy == np.trace(report.confusion) / report.confusion.sum()


def test_report_matches_loop_oracle():
    rng = np.random.default_rng(1)
    y_true = rng.integers(0, 4, size=30)
    y_pred = rng.integers(0, 4, size=30)
    report = M.classification_report(y_true, y_pred, num_classes=4)
    oracle = prf_loops_oracle(list(y_true), list(y_pred), 4)
    for c, (p, r, f1) in oracle.items():
        got = report.per_class[c]
        assert abs(got.precision - p) < 1e-12
        assert abs(got.recall - r) < 1e-12
        assert abs(got.f1 - f1) < 1e-12


def test_report_empty_input_rejected():
    with pytest.raises(ContractError):
        M.classification_report([], [])


def test_weighted_accuracy_is_support_weighted_recall():
    y_true = [0, 0, 0, 1]
    y_pred = [0, 0, 1, 1]
    report = M.classification_report(y_true, y_pred, num_classes=2)
    # class 0 recall 2/3 with support 3, class 1 recall 1 with support 1
    assert abs(report.weighted_accuracy - (3 * (2 / 3) + 1 * 1.0) / 4) < 1e-12


# -- bootstrap CI ---------------------------------------------------------------


def test_bootstrap_perfect_predictions_degenerate_interval():
    y = np.arange(20) % 3
    lo, hi = M.bootstrap_ci(y, y, M.accuracy_score, seed=0)
    assert (lo, hi) == (1.0, 1.0)


def test_bootstrap_constant_metric_collapses():
    y_true = np.arange(12) % 2
    y_pred = y_true.copy()
    lo, hi = M.bootstrap_ci(y_true, y_pred, lambda t, p: 0.625, seed=1)
    assert lo == hi == 0.625


def test_bootstrap_width_for_binomial_case():
    rng = np.random.default_rng(2)
    y_true = np.zeros(100, dtype=int)
    y_pred = np.zeros(100, dtype=int)
    wrong = rng.choice(100, size=20, replace=False)
    y_pred[wrong] = 1
    lo, hi = M.bootstrap_ci(y_true, y_pred, M.accuracy_score, seed=3)
    assert 0.1 < hi - lo < 0.35
    assert lo <= 0.8 <= hi


def test_bootstrap_contains_point_estimate():
    rng = np.random.default_rng(4)
    for seed in range(5):
        y_true = rng.integers(0, 3, size=40)
        y_pred = rng.integers(0, 3, size=40)
        point = M.accuracy_score(y_true, y_pred)
        lo, hi = M.bootstrap_ci(y_true, y_pred, M.accuracy_score, seed=seed)
        assert lo <= point <= hi


def test_bootstrap_deterministic_and_minimum_samples():
    y = np.arange(10) % 2
    a = M.bootstrap_ci(y, y[::-1], M.accuracy_score, seed=7)
    b = M.bootstrap_ci(y, y[::-1], M.accuracy_score, seed=7)
    assert a == b
    with pytest.raises(ContractError):
        M.bootstrap_ci(y[:9], y[:9], M.accuracy_score)


# -- NMI ---------------------------------------------------------------------------


def test_nmi_identical_partitions():
    assert M.nmi([0, 1, 2, 0, 1, 2], [0, 1, 2, 0, 1, 2]) == 1.0


def test_nmi_independent_partitions():
    assert abs(M.nmi([0, 0, 1, 1], [0, 1, 0, 1])) < 1e-12


def test_nmi_matches_entropy_oracle():
    rng = np.random.default_rng(5)
    a = rng.integers(0, 4, size=50)
    b = rng.integers(0, 3, size=50)
    assert abs(M.nmi(a, b) - nmi_entropy_oracle(a, b)) < 1e-9


def test_nmi_label_renaming_and_symmetry():
    rng = np.random.default_rng(6)
    a = rng.integers(0, 3, size=30)
    b = rng.integers(0, 3, size=30)
    renamed = np.array([{0: 7, 1: 5, 2: 9}[v] for v in a])
    assert abs(M.nmi(a, b) - M.nmi(renamed, b)) < 1e-12
    assert abs(M.nmi(a, b) - M.nmi(b, a)) < 1e-12


def test_nmi_single_sample_rejected():
    with pytest.raises(ContractError):
        M.nmi([0], [0])


# -- ARI ------------------------------------------------------------------------------


def test_ari_identical_partitions():
    assert M.ari([0, 0, 1, 2], [0, 0, 1, 2]) == 1.0


def test_ari_crossed_case_matches_pair_counting_oracle():
    a = [0, 0, 1, 1]
    b = [0, 1, 0, 1]
    expected = ari_pairs_oracle(a, b)
    assert abs(M.ari(a, b) - expected) < 1e-12
    assert abs(expected - (-0.5)) < 1e-12  # frozen from the 6-pair enumeration


def test_ari_random_matches_oracle():
    rng = np.random.default_rng(7)
    for _ in range(10):
        a = rng.integers(0, 3, size=12)
        b = rng.integers(0, 4, size=12)
        assert abs(M.ari(a, b) - ari_pairs_oracle(a, b)) < 1e-9


def test_ari_permutation_invariance():
    rng = np.random.default_rng(8)
    a = rng.integers(0, 3, size=25)
    b = rng.integers(0, 3, size=25)
    renamed = np.array([{0: 2, 1: 0, 2: 1}[v] for v in b])
    assert abs(M.ari(a, b) - M.ari(a, renamed)) < 1e-12
    assert abs(M.ari(a, b) - M.ari(b, a)) < 1e-12


# -- clustering accuracy --------------------------------------------------------------


def test_clustering_accuracy_identical_and_relabeled():
    assert M.clustering_accuracy([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert M.clustering_accuracy([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0


def test_clustering_accuracy_matches_factorial_search():
    rng = np.random.default_rng(9)
    for _ in range(10):
        y = rng.integers(0, 3, size=8)
        c = rng.integers(0, 3, size=8)
        assert abs(M.clustering_accuracy(y, c) - clustering_accuracy_oracle(y, c)) < 1e-12


def test_clustering_accuracy_constant_clusters_majority_bound():
    y = [0, 0, 0, 1, 2]
    c = [5, 5, 5, 5, 5]
    majority = 3 / 5
    assert M.clustering_accuracy(y, c) >= majority - 1e-12


def test_clustering_accuracy_more_clusters_than_classes():
    y = [0, 0, 1, 1]
    c = [0, 1, 2, 3]
    # best matching pairs one cluster per class: two hits
    assert abs(M.clustering_accuracy(y, c) - 0.5) < 1e-12


# -- report export -----------------------------------------------------------------------


def test_report_with_intervals_layout():
    rng = np.random.default_rng(10)
    y_true = rng.integers(0, 3, size=40)
    y_pred = np.where(rng.random(40) < 0.7, y_true, rng.integers(0, 3, size=40))
    report = M.report_with_intervals(y_true, y_pred, num_classes=3, resamples=200, seed=0)
    payload = report.to_dict()
    assert set(payload) == {"per_class", "aggregates", "confusion", "intervals", "metadata"}
    for key, (lo, hi) in payload["intervals"].items():
        point = payload["aggregates"][key]
        assert lo <= point <= hi, key
    assert payload["metadata"]["ci_method"] == "percentile bootstrap"
