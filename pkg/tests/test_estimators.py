"""Estimator facade: scikit-learn contract (stored hypers, classes_,
fitted-state checks, label mapping) over the training loop."""

import numpy as np
import numpy.testing as npt
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from civt import data as datamod
from civt.estimators import CivtClassifier, TeacherClassifier, as_image_batch


def toy_problem(n=96, seed=0, labels=(0, 1, 2, 3)):
    spec = datamod.SynthSpec(n=n, classes=len(labels), image_size=16, seed=seed)
    ds = datamod.synth_generate(spec)
    y = np.asarray(labels)[ds.labels]
    return ds.images, y


def tiny_teacher(**kw):
    base = dict(family="cnn", image_size=16, stage_widths=(8,), blocks_per_stage=1,
                gn_groups=4, inv_kernel=3, inv_groups=2, inv_reduction=2,
                epochs=2, batch_size=32, lr=3e-3, warmup_epochs=0.5,
                augment="none")
    base.update(kw)
    return TeacherClassifier(**base)


def tiny_student(**kw):
    base = dict(family="civt", image_size=16, width=16, depth=1, heads=2,
                patch=4, mode="none", epochs=2, batch_size=32, lr=3e-3,
                warmup_epochs=0.5, augment="none")
    base.update(kw)
    return CivtClassifier(**base)


class TestInputHandling:
    def test_as_image_batch_accepts_both_layouts(self):
        X4 = np.random.default_rng(0).random((5, 3, 16, 16)).astype(np.float32)
        npt.assert_array_equal(as_image_batch(X4, 3, 16), X4)
        X2 = X4.reshape(5, -1)
        npt.assert_array_equal(as_image_batch(X2, 3, 16), X4)

    def test_as_image_batch_rejects_bad_shapes(self):
        with pytest.raises(ValueError, match="features"):
            as_image_batch(np.zeros((5, 7)), 3, 16)
        with pytest.raises(ValueError, match="image shape"):
            as_image_batch(np.zeros((5, 1, 16, 16)), 3, 16)
        with pytest.raises(ValueError, match="ndim"):
            as_image_batch(np.zeros((5, 3, 16)), 3, 16)


class TestSklearnContract:
    def test_get_params_round_trip_and_clone(self):
        est = tiny_teacher(family="inn", lr=0.005)
        params = est.get_params()
        assert params["family"] == "inn" and params["lr"] == 0.005
        dup = clone(est)
        assert dup.get_params() == params

    def test_unfitted_predict_raises(self):
        X, _ = toy_problem(8)
        with pytest.raises(NotFittedError):
            tiny_teacher().predict(X)

    def test_fit_returns_self_and_sets_state(self):
        X, y = toy_problem()
        est = tiny_teacher(epochs=1)
        assert est.fit(X, y) is est
        npt.assert_array_equal(est.classes_, [0, 1, 2, 3])
        assert est.n_features_in_ == 3 * 16 * 16
        assert len(est.history_) == 1

    def test_arbitrary_label_values_map_back(self):
        X, y = toy_problem(labels=(7, -2, 100, 3))
        est = tiny_teacher(epochs=1).fit(X, y)
        npt.assert_array_equal(est.classes_, sorted((7, -2, 100, 3)))
        pred = est.predict(X)
        assert set(pred) <= {-2, 3, 7, 100}

    def test_single_class_rejected(self):
        X, _ = toy_problem(16)
        with pytest.raises(ValueError, match="at least 2"):
            tiny_teacher().fit(X, np.zeros(16, dtype=int))

    def test_length_mismatch_rejected(self):
        X, y = toy_problem(16)
        with pytest.raises(ValueError, match="samples"):
            tiny_teacher().fit(X, y[:-1])

    def test_continuous_targets_rejected(self):
        X, _ = toy_problem(16)
        with pytest.raises(ValueError):
            tiny_teacher().fit(X, np.linspace(0.0, 1.0, 16))


class TestPredictions:
    def test_proba_rows_normalized_and_argmax_consistent(self):
        X, y = toy_problem()
        est = tiny_teacher(epochs=1).fit(X, y)
        proba = est.predict_proba(X[:10])
        assert proba.shape == (10, 4)
        npt.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)
        npt.assert_array_equal(est.predict(X[:10]),
                               est.classes_[np.argmax(proba, axis=1)])

    def test_flattened_predict_matches_stacked(self):
        X, y = toy_problem()
        est = tiny_teacher(epochs=1).fit(X, y)
        npt.assert_array_equal(est.predict(X[:6].reshape(6, -1)),
                               est.predict(X[:6]))

    def test_fit_is_deterministic_in_random_state(self):
        X, y = toy_problem()
        a = tiny_teacher(epochs=1).fit(X, y)
        b = tiny_teacher(epochs=1).fit(X, y)
        npt.assert_array_equal(a.predict_proba(X[:8]), b.predict_proba(X[:8]))
        c = tiny_teacher(epochs=1, random_state=5).fit(X, y)
        assert not np.array_equal(a.predict_proba(X[:8]), c.predict_proba(X[:8]))

    def test_better_than_chance_on_easy_task(self):
        X, y = toy_problem(n=256, labels=(0, 1))
        est = tiny_teacher(epochs=4).fit(X, y)
        assert (est.predict(X) == y).mean() > 0.7


class TestDistillingStudent:
    def test_student_with_fitted_teachers(self):
        X, y = toy_problem()
        cnn = tiny_teacher(epochs=1).fit(X, y)
        inn = tiny_teacher(family="inn", epochs=1).fit(X, y)
        student = tiny_student(mode="cross_bias", teachers=(cnn, inn), epochs=1)
        student.fit(X, y)
        assert student.predict(X[:4]).shape == (4,)
        assert student.history_[0]["kl_conv"] > 0

    def test_teacher_validation(self):
        X, y = toy_problem(32)
        student = tiny_student(mode="single", teachers=("not a model",))
        with pytest.raises(ValueError, match="fitted TeacherClassifier"):
            student.fit(X, y)

    def test_family_validation(self):
        X, y = toy_problem(32)
        with pytest.raises(ValueError, match="family"):
            tiny_student(family="cnn").fit(X, y)
        with pytest.raises(ValueError, match="family"):
            tiny_teacher(family="civt").fit(X, y)

    def test_mixer_student_fits(self):
        X, y = toy_problem()
        est = tiny_student(family="mixer", epochs=1).fit(X, y)
        assert est.predict(X[:3]).shape == (3,)
