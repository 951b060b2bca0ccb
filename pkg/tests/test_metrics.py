import warnings

import numpy as np
import pytest

import oracles
from spheremetric.errors import ContractError
from spheremetric.metrics import binary_mcc, classification_report, confusion_matrix, mcc, roc_auc
from spheremetric.numerics import Rng


def test_confusion_perfect_and_constant():
    y = [0, 1, 2, 2, 1]
    assert confusion_matrix(y, y, 3).tolist() == [[1, 0, 0], [0, 2, 0], [0, 0, 2]]
    cm = confusion_matrix(y, [0] * 5, 3)
    assert cm[:, 1:].sum() == 0 and cm[:, 0].tolist() == [1, 2, 2]


def test_confusion_row_sums(rng):
    t = rng.gen.integers(0, 4, 100)
    p = rng.gen.integers(0, 4, 100)
    cm = confusion_matrix(t, p, 4)
    assert cm.sum(axis=1).tolist() == np.bincount(t, minlength=4).tolist()
    assert cm.tolist() == oracles.counts(t.tolist(), p.tolist(), 4)


def test_confusion_out_of_range():
    with pytest.raises(ContractError, match="position 1"):
        confusion_matrix([0, 3], [0, 0], 3)


def test_report_perfect():
    r = classification_report(confusion_matrix([0, 1, 2, 1], [0, 1, 2, 1], 3))
    assert r.per_class_accuracy == r.precision == r.recall == r.f1 == [1.0, 1.0, 1.0]
    assert r.macro_f1 == r.micro_f1 == r.average_accuracy == 1.0
    assert r.mcc == 1.0


def test_report_binary_halves():
    # TP=1, FP=1, FN=1, TN=1 for class 1
    r = classification_report([[1, 1], [1, 1]])
    assert r.precision[1] == 0.5 and r.recall[1] == 0.5 and r.f1[1] == 0.5


def test_report_degenerate_class_warns():
    with pytest.warns(UserWarning, match="precision\\[2\\]"):
        r = classification_report(confusion_matrix([0, 1, 2], [0, 1, 1], 3))
    assert r.precision[2] == 0.0 and r.f1[2] == 0.0


def test_mcc_perfect_and_inverted():
    per, multi = mcc([[3, 0], [0, 5]])
    assert per == [1.0, 1.0] and multi == 1.0
    per, multi = mcc([[0, 3], [5, 0]])
    assert per == [-1.0, -1.0] and multi == -1.0


def test_binary_multiclass_mcc_equals_binary_formula(rng):
    for _ in range(20):
        cm = rng.gen.integers(0, 20, (2, 2))
        tn, fp, fn, tp = cm.ravel().tolist()
        assert mcc(cm)[1] == pytest.approx(binary_mcc(tp, tn, fp, fn), abs=1e-12)


@pytest.mark.parametrize("seed", range(200))
def test_report_and_mcc_match_oracle(seed):
    rng = Rng(seed)
    n = int(rng.gen.integers(5, 60))
    t = rng.gen.integers(0, 3, n).tolist()
    p = [x if rng.gen.random() < 0.6 else int(rng.gen.integers(0, 3)) for x in t]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        r = classification_report(confusion_matrix(t, p, 3))
    want = oracles.per_class_rates(t, p, 3)
    assert r.precision == [w["precision"] for w in want]
    assert r.recall == r.per_class_accuracy == [w["recall"] for w in want]
    assert r.f1 == pytest.approx([w["f1"] for w in want], abs=1e-15)
    assert r.per_class_mcc == pytest.approx([w["mcc"] for w in want], abs=1e-12)
    assert r.average_accuracy == r.micro_f1 == sum(a == b for a, b in zip(t, p)) / n
    assert r.mcc == pytest.approx(oracles.multiclass_mcc(t, p), abs=1e-12)


def test_auc_extremes():
    labels = np.array([0, 0, 1, 1])
    perfect = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.1, 0.95]])
    assert roc_auc(perfect, labels) == ([1.0, 1.0], 1.0)
    assert roc_auc(np.full((4, 2), 0.3), labels) == ([0.5, 0.5], 0.5)


def test_auc_absent_class():
    per, avg = roc_auc(np.random.default_rng(0).random((4, 3)), [0, 1, 0, 1])
    assert per[2] is None and avg == pytest.approx(np.mean(per[:2]))


@pytest.mark.parametrize("seed", range(200))
def test_auc_matches_pairwise_oracle(seed):
    rng = Rng(seed)
    n = int(rng.gen.integers(6, 80))
    labels = np.r_[0, 1, 2, rng.gen.integers(0, 3, n - 3)]
    # coarse rounding forces plenty of tied scores
    scores = np.round(rng.gen.random((n, 3)), int(rng.gen.integers(1, 4)))
    per, avg = roc_auc(scores, labels)
    want = [oracles.pairwise_auc(scores[:, c].tolist(), (labels == c).tolist()) for c in range(3)]
    assert per == pytest.approx(want, abs=1e-12)
    assert avg == pytest.approx(sum(want) / 3, abs=1e-12)


def test_auc_invariant_to_monotone_transform(rng):
    scores = rng.gen.random((40, 3))
    labels = np.r_[0, 1, 2, rng.gen.integers(0, 3, 37)]
    a = roc_auc(scores, labels)[0]
    b = roc_auc(np.exp(3 * scores) - 7, labels)[0]
    assert a == pytest.approx(b, abs=1e-15)


def test_class_permutation(rng):
    t = rng.gen.integers(0, 3, 50)
    p = np.where(rng.gen.random(50) < 0.7, t, rng.gen.integers(0, 3, 50))
    perm = np.array([2, 0, 1])
    a = classification_report(confusion_matrix(t, p, 3))
    b = classification_report(confusion_matrix(perm[t], perm[p], 3))
    assert [b.f1[perm[c]] for c in range(3)] == pytest.approx(a.f1)
    assert b.macro_f1 == pytest.approx(a.macro_f1) and b.average_accuracy == a.average_accuracy
    assert b.mcc == pytest.approx(a.mcc, abs=1e-12)
