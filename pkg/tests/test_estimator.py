"""Estimator facade: sklearn conventions over the scene pipeline."""

import numpy as np
import pytest
from sklearn.base import clone

from hcrnet.errors import UsageError
from hcrnet.estimator import HierarchicalCubeClassifier
from hcrnet.rasters import NODATA


def _estimator(taxonomy=None, **overrides):
    kwargs = dict(taxonomy=taxonomy, patch_size=6, stem_filters=4,
                  block_filters=(4, 6, 6), temporal_kernel=2,
                  learning_rate=3e-3, batch_size=4, max_epochs=2,
                  val_pixels_per_class=2, seed=0)
    kwargs.update(overrides)
    return HierarchicalCubeClassifier(**kwargs)


@pytest.fixture(scope="module")
def fitted(tiny_scene, tiny_taxonomy):
    cube, truth = tiny_scene
    return _estimator(tiny_taxonomy).fit(cube, truth), cube, truth


def test_get_set_params_and_clone(tiny_taxonomy):
    est = _estimator(tiny_taxonomy, max_epochs=7)
    params = est.get_params()
    assert params["max_epochs"] == 7
    assert params["taxonomy"] is tiny_taxonomy
    est.set_params(learning_rate=5e-4)
    assert est.learning_rate == 5e-4
    copy = clone(est)
    assert copy.get_params() == est.get_params()
    assert not hasattr(copy, "network_")


def test_fit_predict_shapes(fitted, tiny_taxonomy):
    est, cube, truth = fitted
    assert est.taxonomy_ is tiny_taxonomy
    np.testing.assert_array_equal(est.classes_, np.arange(4))
    pred = est.predict(cube)
    assert pred.shape == truth.shape and pred.dtype == np.uint16
    assert pred.max() < 4
    proba = est.predict_proba(cube)
    assert proba.shape == (4, 36, 36)
    np.testing.assert_allclose(proba.sum(axis=0), 1.0, atol=1e-5)
    np.testing.assert_array_equal(proba.argmax(axis=0), pred)


def test_predict_level(fitted, tiny_taxonomy):
    est, cube, _ = fitted
    macro = est.predict_level(cube, "macro")
    assert macro.max() < 2
    np.testing.assert_array_equal(est.predict_level(cube, "micro"),
                                  est.predict(cube))
    with pytest.raises(UsageError, match="unknown level"):
        est.predict_level(cube, "kingdom")


def test_score_is_overall_accuracy(fitted):
    est, cube, truth = fitted
    sparse = truth.copy()
    sparse[10:] = NODATA
    expected = (est.predict(cube)[:10] == truth[:10]).mean()
    assert est.score(cube, sparse) == pytest.approx(expected)
    with pytest.raises(UsageError, match="no labeled"):
        est.score(cube, np.full_like(truth, NODATA))


def test_unfitted_estimator_raises(tiny_scene, tiny_taxonomy):
    cube, _ = tiny_scene
    est = _estimator(tiny_taxonomy)
    with pytest.raises(UsageError, match="not been fitted"):
        est.predict(cube)
    with pytest.raises(UsageError, match="not been fitted"):
        est.score(cube, np.zeros((36, 36), dtype=np.uint16))


def test_flat_fallback_without_taxonomy(tiny_scene):
    cube, truth = tiny_scene
    est = _estimator(taxonomy=None, max_epochs=1).fit(cube, truth)
    # all three levels mirror the observed micro classes
    assert est.taxonomy_.n_classes("macro") == 4
    assert est.taxonomy_.n_classes("micro") == 4
    macro = est.predict_level(cube, "macro")
    assert macro.max() < 4


def test_fit_is_seed_deterministic(tiny_scene, tiny_taxonomy):
    cube, truth = tiny_scene
    a = _estimator(tiny_taxonomy, max_epochs=1).fit(cube, truth)
    b = _estimator(tiny_taxonomy, max_epochs=1).fit(cube, truth)
    np.testing.assert_array_equal(a.predict(cube), b.predict(cube))
    for name, arr in a.network_.weights().items():
        np.testing.assert_array_equal(arr, b.network_.weights()[name])
