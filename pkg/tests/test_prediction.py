import numpy as np
import pytest

from corrfabr.prediction import (PredictorTrainConfig, class_map, dense_probabilities,
                                 ensemble_average, lesion_prediction, load_classifier,
                                 majority_vote, predict_slice, save_classifier, softmax,
                                 train_predictor)
from corrfabr.tensor_io import make_rng


def blobs(seed, n=120, d=6):
    rng = make_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.standard_normal((n, d)) + 1.5 * y[:, None] * np.eye(d)[0]
    return x, y


def test_classifier_learns_separable_data():
    x, y = blobs(0)
    vx, vy = blobs(1, 40)
    clf = train_predictor(([x], y), ([vx], vy), PredictorTrainConfig(max_epochs=60))
    acc = np.mean(predict_slice(clf, [vx]).argmax(1) == vy)
    assert acc > 0.7
    assert clf.stopped_epoch == len(clf.history) <= 60


def test_two_branches_and_roundtrip(tmp_path):
    x, y = blobs(2)
    vx, vy = blobs(3, 30)
    branches = [x[:, :4], x[:, 4:]]
    clf = train_predictor((branches, y), ([vx[:, :4], vx[:, 4:]], vy),
                          PredictorTrainConfig(max_epochs=5, branch_width=3))
    assert clf.n_branches == 2 and clf.head_weight.shape == (2, 6)
    save_classifier(clf, tmp_path)
    back = load_classifier(tmp_path)
    np.testing.assert_array_equal(predict_slice(back, branches), predict_slice(clf, branches))
    with pytest.raises(ValueError):
        predict_slice(clf, [x])


def test_early_stopping_and_lr_decay():
    x, y = blobs(4, 40)
    # validation labels are pure noise, so validation loss stalls
    vx = make_rng(5).standard_normal((40, 6))
    vy = make_rng(6).integers(0, 2, 40)
    cfg = PredictorTrainConfig(max_epochs=500, lr_patience=3, early_stopping_patience=6)
    clf = train_predictor(([x], y), ([vx], vy), cfg)
    assert clf.stopped_epoch < 500
    lrs = [h["lr"] for h in clf.history]
    assert min(lrs) < cfg.learning_rate


def test_single_class_rejected():
    x, _ = blobs(0)
    with pytest.raises(ValueError, match="two classes"):
        train_predictor(([x], np.zeros(len(x), int)), ([x], np.zeros(len(x), int)))


def test_softmax_rows_sum_to_one():
    p = softmax(make_rng(0).standard_normal((5, 3)) * 50)
    np.testing.assert_allclose(p.sum(1), 1.0)


def test_dense_broadcast_and_vote():
    mask = np.zeros((2, 4, 4))
    mask[0, :2, :2] = 1
    mask[1, :3, :3] = 1
    probs = np.array([[0.2, 0.8], [0.7, 0.3]])
    dense = dense_probabilities(probs, mask)
    assert dense.shape == (2, 4, 4, 2)
    np.testing.assert_array_equal(dense[0, 0, 0], [0.2, 0.8])
    np.testing.assert_array_equal(dense[0, 3, 3], [0, 0])
    cmap = class_map(dense, mask)
    assert cmap[0, 3, 3] == -1
    voted, score, _ = lesion_prediction(probs, mask)
    # 4 pixels vote aggressive, 9 vote indolent
    assert voted == 0
    assert score == pytest.approx((4 * 0.8 + 9 * 0.3) / 13)


def test_vote_ties_go_aggressive():
    seg = np.array([[0, 0, 2, 2, 1]])
    assert majority_vote(seg) == 2
    assert majority_vote(np.array([0, 1]), n_classes=2) == 1
    assert majority_vote(np.array([[2, -1, 0, 0]])) == 0
    with pytest.raises(ValueError):
        majority_vote(np.array([-1, -1]))


def test_ensemble_average():
    a, b = np.array([[0.2, 0.8]]), np.array([[0.6, 0.4]])
    np.testing.assert_allclose(ensemble_average([a, b]), [[0.4, 0.6]])
    with pytest.raises(ValueError):
        ensemble_average([a, np.ones((2, 2))])
    with pytest.raises(ValueError):
        ensemble_average([])
