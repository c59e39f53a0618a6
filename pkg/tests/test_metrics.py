import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import iou as iou_loop
from oracles import mann_whitney
from specprompt.errors import EvaluationError, ShapeError
from specprompt.metrics import (ConfusionMatrix, binary_iou, binary_prf, classification_metrics, confusion_matrix,
                                metrics_from_confusion, roc_aucs, roc_curve)


def test_hand_computed_kappa_example():
    m = metrics_from_confusion(ConfusionMatrix(np.array([[3, 1], [2, 4]]), [1, 2]))
    assert m["OA"] == pytest.approx(0.7, abs=1e-15)
    assert m["AA"] == pytest.approx((0.75 + 4 / 6) / 2, abs=1e-15)
    assert m["Kappa"] == pytest.approx(0.4, abs=1e-15)


def test_kappa_example_from_maps():
    truth = np.array([1] * 4 + [2] * 6)
    pred = np.array([1, 1, 1, 2, 1, 1, 2, 2, 2, 2])
    m = classification_metrics(pred, truth)
    assert np.array_equal(confusion_matrix(pred, truth).counts, [[3, 1], [2, 4]])
    assert m["Kappa"] == pytest.approx(0.4, abs=1e-15)


def test_classification_trivial_cases():
    truth = np.array([[1, 1], [2, 2]])
    m = classification_metrics(truth, truth)
    assert m["OA"] == m["AA"] == m["Kappa"] == 1.0
    m = classification_metrics(np.ones_like(truth), truth)
    assert m["Kappa"] == pytest.approx(0.0)
    # ignored label is dropped before counting
    assert classification_metrics(np.array([1, 2]), np.array([1, 0]))["OA"] == 1.0
    with pytest.raises(EvaluationError):
        classification_metrics(np.array([1]), np.array([0]))
    with pytest.raises(ShapeError):
        classification_metrics(np.array([1, 2]), np.array([1]))


@given(arrays(np.int64, 30, elements=st.integers(0, 3)), arrays(np.int64, 30, elements=st.integers(1, 3)))
def test_kappa_never_exceeds_oa(pred, truth):
    m = classification_metrics(pred, truth)
    assert m["Kappa"] <= m["OA"] + 1e-12
    assert 0 <= m["OA"] <= 1 and 0 <= m["AA"] <= 1 and -1 <= m["Kappa"] <= 1


def test_prf_closed_forms():
    truth = np.zeros((4, 4), bool)
    truth[0] = True
    m = binary_prf(np.ones((4, 4), bool), truth)
    assert m == pytest.approx({"precision": 0.25, "recall": 1.0, "F1": 0.4})
    assert binary_prf(truth, truth) == {"precision": 1.0, "recall": 1.0, "F1": 1.0}
    assert binary_prf(~truth, truth)["F1"] == 0.0
    with pytest.raises(EvaluationError):
        binary_prf(truth, np.zeros_like(truth))


@pytest.mark.parametrize("trial", range(10))
def test_prf_and_iou_match_counting_loop(trial):
    rng = np.random.default_rng(trial)
    pred, truth = rng.random((16, 16)) < 0.4, rng.random((16, 16)) < 0.3
    tp = fp = fn = 0
    for p, t in zip(pred.ravel(), truth.ravel()):
        tp += p and t
        fp += p and not t
        fn += t and not p
    m = binary_prf(pred, truth)
    assert m["precision"] == pytest.approx(tp / (tp + fp))
    assert m["recall"] == pytest.approx(tp / (tp + fn))
    assert binary_iou(pred, truth) == pytest.approx(iou_loop(pred, truth))


def test_iou_trivial_cases():
    a = np.zeros((3, 3), bool)
    a[0] = True
    assert binary_iou(a, a) == 1.0
    assert binary_iou(a, ~a) == 0.0
    assert binary_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0


@pytest.mark.parametrize("trial", range(100))
def test_f1_iou_identity(trial):
    rng = np.random.default_rng(trial)
    truth = rng.random((12, 12)) < rng.uniform(0.05, 0.9)
    truth[0, 0] = True
    pred = rng.random((12, 12)) < rng.uniform(0, 1)
    iou = binary_iou(pred, truth)
    assert binary_prf(pred, truth)["F1"] == pytest.approx(2 * iou / (1 + iou), abs=1e-12)


@pytest.mark.parametrize("trial", range(50))
def test_auc_equals_mann_whitney(trial):
    rng = np.random.default_rng(trial)
    scores = np.round(rng.random(12), 1)  # rounding forces ties
    truth = rng.random(12) < 0.5
    truth[0], truth[1] = True, False
    assert abs(roc_aucs(scores, truth)["auc_df"] - mann_whitney(scores, truth)) <= 1e-9


def test_auc_trivial_cases():
    truth = np.array([0, 0, 1, 1, 0, 1], bool)
    assert roc_aucs(truth.astype(float), truth)["auc_df"] == 1.0
    assert roc_aucs(np.where(truth, 5.0, 1.0) + np.arange(6) * 0.01, truth)["auc_df"] == 1.0
    const = roc_aucs(np.full(6, 0.3), truth)
    assert const["auc_df"] == 0.5 and const["auc_dtau"] == const["auc_ftau"] == 0.0
    with pytest.raises(EvaluationError):
        roc_aucs(np.arange(3.0), np.ones(3, bool))


def test_odp_combination(rng):
    scores = rng.random(40)
    truth = scores + rng.normal(scale=0.3, size=40) > 0.5
    a = roc_aucs(scores, truth)
    assert a["auc_odp"] == pytest.approx(a["auc_df"] + a["auc_dtau"] - a["auc_ftau"])
    assert 0 <= a["auc_dtau"] <= 1 and 0 <= a["auc_ftau"] <= 1


@given(st.integers(0, 10_000))
def test_roc_curve_shape(seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.random(25), 1)
    truth = rng.random(25) < 0.5
    truth[:2] = [True, False]
    c = roc_curve(scores, truth)
    assert c.thresholds[0] == np.inf and np.all(np.diff(c.thresholds) < 0)
    assert np.all(np.diff(c.pd) >= 0) and np.all(np.diff(c.pf) >= 0)
    assert (c.pd[0], c.pf[0]) == (0, 0) and (c.pd[-1], c.pf[-1]) == (1, 1)


@given(st.integers(0, 10_000))
def test_auc_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=30)
    truth = rng.random(30) < 0.4
    truth[:2] = [True, False]
    base = roc_aucs(scores, truth)["auc_df"]
    assert roc_aucs(np.exp(scores), truth)["auc_df"] == pytest.approx(base, abs=1e-12)
    assert roc_aucs(3 * scores**3 + 1, truth)["auc_df"] == pytest.approx(base, abs=1e-12)
