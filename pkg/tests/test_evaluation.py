import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_auc
from corrfabr.evaluation import (MetricsReport, confusion_metrics, dice, fold_members,
                                 kfold_split, lesion_metrics, roc_auc)
from corrfabr.tensor_io import make_rng


@pytest.mark.parametrize("seed", range(10))
def test_auc_equals_pairwise_count(seed):
    rng = make_rng(seed)
    n = 30 + seed
    scores = rng.integers(0, 8, n) / 8.0           # plenty of ties
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    assert abs(roc_auc(scores, labels) - brute_auc(scores, labels)) <= 1e-12


def test_auc_trivial():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert roc_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


def test_confusion_values():
    m = confusion_metrics([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    # tp 2, fp 1, fn 1, tn 1
    assert m.sensitivity == pytest.approx(2 / 3)
    assert m.specificity == pytest.approx(1 / 2)
    assert m.f1 == pytest.approx(4 / 6)
    assert m.undefined == ()
    m = confusion_metrics([0, 0], [0, 0])
    assert "sensitivity" in m.undefined and "f1" in m.undefined and m.specificity == 1.0


def test_dice():
    a = np.zeros((4, 4))
    a[:2] = 1
    b = np.zeros((4, 4))
    b[1:3] = 1
    assert dice(a, b) == pytest.approx(0.5)
    assert dice(a, a) == 1.0
    assert dice(np.zeros(3), np.zeros(3)) == 1.0
    with pytest.raises(ValueError):
        dice(a, b[:2])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=30))
def test_confusion_metrics_in_unit_interval(pairs):
    pred, lab = zip(*pairs)
    m = confusion_metrics(list(pred), list(lab))
    assert all(0.0 <= v <= 1.0 for v in (m.f1, m.sensitivity, m.specificity))


def test_kfold_sizes_99_cases():
    folds = kfold_split([f"p{i}" for i in range(99)], 5, seed=0)
    sizes = sorted(np.bincount(list(folds.values())).tolist(), reverse=True)
    assert sizes == [20, 20, 20, 20, 19]


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 60), st.integers(2, 5), st.integers(0, 2**32))
def test_kfold_partition(n, k, seed):
    ids = [f"c{i}" for i in range(n)]
    folds = kfold_split(ids, k, seed)
    members = [fold_members(folds, f) for f in range(k)]
    assert sorted(sum(members, [])) == sorted(ids)
    sizes = [len(m) for m in members]
    assert max(sizes) - min(sizes) <= 1
    assert folds == kfold_split(ids, k, seed)


def test_kfold_errors():
    with pytest.raises(ValueError):
        kfold_split(["a", "a", "b", "c", "d"], 2)
    with pytest.raises(ValueError):
        kfold_split(["a", "b"], 5)


def test_report_json_is_stable():
    r = MetricsReport()
    r.add_fold(roc_auc=0.5, f1=0.25, sensitivity=1.0, specificity=0.0, dice=1.0)
    r.add_fold(roc_auc=1.0, f1=0.75, sensitivity=0.5, specificity=0.5, dice=1.0)
    d = json.loads(r.to_json())
    assert d["metrics"]["f1"]["mean"] == 0.5
    assert d["metrics"]["f1"]["std"] == 0.25
    assert r.to_json() == r.to_json()
    assert "roc_auc" in r.table().splitlines()[1]
    with pytest.raises(ValueError):
        r.add_fold(roc_auc=1.5, f1=0, sensitivity=0, specificity=0, dice=0)


def test_lesion_metrics_single_class_fold():
    out = lesion_metrics([0.2, 0.9], [False, True], [True, True], [1.0, 0.5])
    assert out["roc_auc"] == 0.5 and out["sensitivity"] == 0.5 and out["dice"] == 0.75
