import json

import numpy as np
import pytest

from corrfabr.synthetic import SyntheticCohort, TwoViewSpec, gen_cohort, gen_two_view, \
    write_cohort
from corrfabr.tensor_io import load_tensor


def test_two_view_shapes_and_spec():
    spec = TwoViewSpec(latent_dim=3, view_dims=(20, 10), noise_std=2.0, n_samples=50)
    X, Y, true = gen_two_view(spec)
    assert X.shape == (50, 20) and Y.shape == (50, 10)
    np.testing.assert_allclose(true, 1 / 5)
    with pytest.raises(ValueError):
        gen_two_view(TwoViewSpec(latent_dim=11, view_dims=(20, 10)))


def test_cohort_balance_and_determinism():
    a = gen_cohort(20, 0.5, seed=3, n_slices=2)
    b = gen_cohort(20, 0.5, seed=3, n_slices=2)
    assert a.labels().sum() == 10
    for ca, cb in zip(a.cases, b.cases):
        np.testing.assert_array_equal(ca.radiology[0], cb.radiology[0])
        np.testing.assert_array_equal(ca.pathology, cb.pathology)
    c = a.cases[0]
    assert c.radiology[0].shape == (2, 224, 224) and c.pathology.shape == (224, 224, 3)
    assert c.pathology.min() >= 0 and c.pathology.max() <= 255
    with pytest.raises(ValueError):
        gen_cohort(5)


def test_label_follows_grade_rule():
    from corrfabr.preprocessing import AGGRESSIVE, label_aggressiveness
    co = gen_cohort(30, seed=1, n_slices=1)
    for c in co.cases:
        assert (label_aggressiveness(c.grade, c.necrosis) == AGGRESSIVE) == bool(c.label)


def test_linear_probe_on_shared_latent():
    co = gen_cohort(400, seed=0, n_slices=1, size=32, pathology_size=32)
    z, y = co.latents(), co.labels()
    train, test = slice(0, 300), slice(300, 400)
    # least-squares probe fitted on the training split
    A = np.c_[z[train], np.ones(300)]
    w = np.linalg.lstsq(A, 2.0 * y[train] - 1.0, rcond=None)[0]
    pred = (np.c_[z[test], np.ones(100)] @ w) > 0
    assert np.mean(pred == y[test]) > 0.9


def test_prostate_mode_layout():
    co = gen_cohort(10, seed=0, mode="prostate-sim", n_slices=2)
    c = co.cases[0]
    assert len(c.radiology) == 2
    assert c.pathology_aligned.shape == (2, 224, 224, 3)
    assert np.all(c.organ_mask[c.lesion_mask > 0] > 0)


def test_write_cohort(tmp_path):
    co = gen_cohort(10, seed=0, n_slices=1, size=32, pathology_size=32)
    path = write_cohort(co, tmp_path)
    man = json.loads(open(path).read())
    assert man["mode"] == "kidney" and len(man["patients"]) == 10
    p = man["patients"][0]
    assert set(p) == {"id", "radiology", "lesion_mask", "pathology", "grade", "necrosis"}
    np.testing.assert_array_equal(load_tensor(tmp_path / p["radiology"][0]),
                                  co.cases[0].radiology[0])
    np.testing.assert_array_equal(load_tensor(tmp_path / p["pathology"]), co.cases[0].pathology)
