import numpy as np
import pytest

from focusmil.errors import DegenerateAUC, MissingClass
from focusmil.metrics import EvalBatch, auc, balanced_accuracy, macro_f1


def _batch(preds, labels, n_classes):
    """One-hot-ish probs putting 0.9 on the predicted class."""
    m = len(preds)
    probs = np.full((m, n_classes), 0.1 / (n_classes - 1))
    for i, p in enumerate(preds):
        probs[i, p] = 0.9
    probs /= probs.sum(axis=1, keepdims=True)
    return EvalBatch(probs, np.array(labels))


def test_eval_batch_validation():
    with pytest.raises(ValueError):
        EvalBatch(np.array([[0.7, 0.7]]), np.array([0]))  # rows must sum to 1
    with pytest.raises(ValueError):
        EvalBatch(np.array([[0.5, 0.5]]), np.array([2]))  # label out of range


def test_balanced_accuracy_perfect():
    assert balanced_accuracy(_batch([0, 1, 2], [0, 1, 2], 3)) == 1.0


def test_balanced_accuracy_constant_predictor():
    # constant predictor scores 1/S regardless of imbalance
    batch = _batch([0] * 10, [0] * 8 + [1] * 2, 2)
    assert balanced_accuracy(batch) == 0.5


def test_balanced_accuracy_hand_confusion():
    # recalls (1.0, 0.5, 0.0) -> 0.5
    preds = [0, 0, 1, 2, 1, 1]
    labels = [0, 0, 1, 1, 2, 2]
    assert balanced_accuracy(_batch(preds, labels, 3)) == pytest.approx(0.5)


def test_balanced_accuracy_missing_class():
    with pytest.raises(MissingClass):
        balanced_accuracy(_batch([0, 1], [0, 0], 2))


def test_argmax_ties_take_lowest_class():
    probs = np.array([[0.5, 0.5]])
    batch = EvalBatch(probs, np.array([1]))
    assert batch.predictions().tolist() == [0]


def test_macro_f1_hand_case():
    # binary, all predicted positive, half actually positive:
    # F1_pos = 2/3, F1_neg = 0 -> macro 1/3
    batch = _batch([1, 1, 1, 1], [1, 1, 0, 0], 2)
    assert macro_f1(batch) == pytest.approx(1 / 3)


def test_macro_f1_perfect():
    assert macro_f1(_batch([0, 1, 0, 1], [0, 1, 0, 1], 2)) == 1.0


def test_auc_perfectly_ranked():
    probs = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.1, 0.9]])
    batch = EvalBatch(probs, np.array([0, 0, 1, 1]))
    assert auc(batch) == 1.0


def test_auc_ties_contribute_half():
    probs = np.array([[0.5, 0.5], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]])
    batch = EvalBatch(probs, np.array([0, 0, 1, 1]))
    assert auc(batch) == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(10))
def test_auc_random_scores_near_half(seed):
    rng = np.random.default_rng(seed)
    m = 2000
    probs = rng.random((m, 2))
    probs /= probs.sum(axis=1, keepdims=True)
    batch = EvalBatch(probs, rng.integers(0, 2, m))
    assert abs(auc(batch) - 0.5) < 0.05


def test_auc_degenerate():
    with pytest.raises(DegenerateAUC):
        auc(_batch([0, 0], [0, 0], 2))


@pytest.mark.parametrize("seed", range(20))
def test_auc_monotone_transform_invariance(seed):
    # binary probs [1-p, p]: warping p through a strictly increasing map that
    # stays in (0,1) preserves both columns' orderings, so AUC is unchanged
    rng = np.random.default_rng(seed)
    m = 60
    p = rng.uniform(0.01, 0.99, m)
    labels = rng.integers(0, 2, m)
    labels[:2] = [0, 1]
    base = auc(EvalBatch(np.column_stack([1 - p, p]), labels))
    g = p ** 3 / (p ** 3 + (1 - p) ** 3)
    warped = auc(EvalBatch(np.column_stack([1 - g, g]), labels))
    assert warped == pytest.approx(base, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_balanced_accuracy_relabel_invariance(seed):
    rng = np.random.default_rng(seed)
    m, s = 40, 3
    probs = rng.random((m, s))
    probs /= probs.sum(axis=1, keepdims=True)
    labels = rng.integers(0, s, m)
    labels[:3] = [0, 1, 2]
    base = balanced_accuracy(EvalBatch(probs, labels))
    perm = rng.permutation(s)
    inv = np.argsort(perm)
    # relabel classes consistently in labels and prob columns
    relabeled = balanced_accuracy(EvalBatch(probs[:, inv], perm[labels]))
    assert relabeled == pytest.approx(base, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_metric_bounds(seed):
    rng = np.random.default_rng(seed)
    m, s = 30, 4
    probs = rng.random((m, s))
    probs /= probs.sum(axis=1, keepdims=True)
    labels = rng.integers(0, s, m)
    labels[:s] = np.arange(s)
    batch = EvalBatch(probs, labels)
    for metric in (balanced_accuracy, macro_f1, auc):
        v = metric(batch)
        assert 0.0 <= v <= 1.0
