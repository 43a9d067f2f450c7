import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import auroc_pairs, fpr95_brute
from subknn import metrics
from subknn.metrics import CalibrationInput, ScoreSet, auroc, ece, fpr_at_95_tpr, sce
from subknn.numcore import ContractError, Rng

scores = arrays(np.float64, st.integers(1, 40), elements=st.integers(-5, 5).map(float))


def test_fpr_examples():
    assert fpr_at_95_tpr([5.0, 6.0], [1.0, 2.0]) == 0.0
    ids = np.arange(1.0, 21.0)
    assert metrics.tpr95_threshold(ids) == 2.0
    assert fpr_at_95_tpr(ids, ids) == 0.95
    assert fpr_at_95_tpr(np.arange(10.0, 0.0, -1.0), [9.5]) == 1.0


def test_auroc_examples():
    assert auroc([5.0, 6.0], [1.0, 2.0]) == 1.0
    assert auroc([1.0, 1.0], [1.0, 1.0, 1.0]) == 0.5
    assert auroc([3.0, 1.0], [2.0]) == 0.5
    assert auroc(ScoreSet([3.0, 1.0], [2.0])) == 0.5


def test_empty_or_nonfinite_scores_rejected():
    with pytest.raises(ContractError):
        ScoreSet([], [1.0])
    with pytest.raises(ContractError):
        ScoreSet([np.nan], [1.0])


def test_metrics_match_brute_force():
    rng = Rng(0)
    for _ in range(200):
        ids = rng.integers(0, 8, size=int(rng.integers(1, 30))).astype(float)
        ood = rng.integers(0, 8, size=int(rng.integers(1, 30))).astype(float)
        assert fpr_at_95_tpr(ids, ood) == fpr95_brute(list(ids), list(ood))
        assert auroc(ids, ood) == pytest.approx(auroc_pairs(ids, ood), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(scores, scores)
def test_auroc_antisymmetric(a, b):
    assert auroc(a, b) + auroc(b, a) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(scores, scores)
def test_auroc_invariant_to_increasing_transform(a, b):
    f = lambda v: np.exp(v / 3.0) * 7.0 - 2.0  # noqa: E731
    assert auroc(f(a), f(b)) == pytest.approx(auroc(a, b), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(scores, scores, st.floats(0.0, 5.0))
def test_fpr_monotone_when_ood_decreases(a, b, delta):
    assert fpr_at_95_tpr(a, b - delta) <= fpr_at_95_tpr(a, b)


@settings(max_examples=100, deadline=None)
@given(scores)
def test_threshold_keeps_at_least_95_percent(a):
    lam = metrics.tpr95_threshold(a)
    assert np.count_nonzero(a >= lam) * 100 >= 95 * a.size


def test_bin_index_right_inclusive():
    b = metrics.bin_index(np.array([0.0, 1 / 15, 1 / 15 + 1e-12, 0.5, 1.0]), 15)
    assert list(b) == [0, 0, 1, 7, 14]


def test_ece_examples():
    probs = np.array([[0.9, 0.1]] * 4)
    assert ece(CalibrationInput(probs, [0, 0, 1, 1])) == pytest.approx(0.4, abs=1e-15)
    onehot = np.eye(3)[[0, 1, 2, 1]]
    assert ece(CalibrationInput(onehot, [0, 1, 2, 1])) == 0.0
    assert sce(CalibrationInput(onehot, [0, 1, 2, 1])) == 0.0


def test_perfectly_calibrated_is_zero():
    # confidence 0.8 with 8 of 10 correct, confidence 0.6 with 3 of 5 correct
    probs = np.array([[0.8, 0.2]] * 10 + [[0.6, 0.4]] * 5)
    labels = np.array([0] * 8 + [1] * 2 + [0] * 3 + [1] * 2)
    assert ece(CalibrationInput(probs, labels)) == pytest.approx(0.0, abs=1e-15)
    # class-wise: within every bin the label frequency equals the probability
    assert sce(CalibrationInput(probs, labels)) == pytest.approx(0.0, abs=1e-15)


def test_sce_two_class_hand_expansion():
    probs = np.array([[0.7, 0.3], [0.7, 0.3], [0.2, 0.8]])
    labels = np.array([0, 1, 1])
    # class 0: bin(0.7) holds two samples with freq 1/2; bin(0.2) one sample with freq 0
    c0 = (2 / 3) * abs(0.5 - 0.7) + (1 / 3) * abs(0.0 - 0.2)
    # class 1: bin(0.3) freq 1/2; bin(0.8) freq 1
    c1 = (2 / 3) * abs(0.5 - 0.3) + (1 / 3) * abs(1.0 - 0.8)
    assert sce(CalibrationInput(probs, labels)) == pytest.approx((c0 + c1) / 2, abs=1e-15)


def test_single_bin_reduces_to_mean_gap():
    rng = Rng(1)
    z = rng.normal(size=(50, 4))
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    y = rng.integers(0, 4, size=50)
    expect = np.mean([abs((y == c).mean() - p[:, c].mean()) for c in range(4)])
    assert sce(CalibrationInput(p, y, num_bins=1)) == pytest.approx(expect, abs=1e-14)


def test_reliability_bins_consistent_with_ece():
    rng = Rng(2)
    z = rng.normal(size=(200, 3)) * 2
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    cal = CalibrationInput(p, rng.integers(0, 3, size=200))
    rows = metrics.reliability_bins(cal)
    assert sum(r[1] for r in rows) == 200
    assert sum(r[1] / 200 * abs(r[2] - r[3]) for r in rows) == pytest.approx(ece(cal), abs=1e-12)


def test_calibration_input_validation():
    with pytest.raises(ContractError):
        CalibrationInput([[0.5, 0.6]], [0])
    with pytest.raises(ContractError):
        CalibrationInput([[1.0, 0.0]], [0], num_bins=0)
