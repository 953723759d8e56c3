import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mdan.exceptions import ConfigError, ShapeError
from mdan.estimator import MDANClassifier, check_images, check_leaf_labels
from mdan.hierarchy import load_hierarchy
from mdan.training import SyntheticSpec, generate_dataset

EKMAN = load_hierarchy("ekman")
SMALL = dict(input_size=32, widths=(4, 8, 16, 32), pyramid_width=8, epochs=2, batch_size=8)


@pytest.fixture(scope="module")
def data():
    ds = generate_dataset(SyntheticSpec(image_size=32, samples_per_class=4, seed=2), EKMAN)
    return ds.images, ds.leaves


@pytest.fixture(scope="module")
def fitted(data):
    return MDANClassifier(**SMALL).fit(*data)


def test_params_and_clone():
    est = MDANClassifier(alpha=0.3, heads={3: 2})
    params = est.get_params()
    assert params["alpha"] == 0.3 and params["heads"] == {3: 2} and params["hierarchy"] == "ekman"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert est.set_params(epochs=3).epochs == 3


def test_unfitted_predict_raises(data):
    with pytest.raises(NotFittedError):
        MDANClassifier(**SMALL).predict(data[0])


def test_fit_predict(fitted, data):
    x, y = data
    pred = fitted.predict(x)
    assert pred.shape == (24,) and set(pred) <= set(range(6))
    proba = fitted.predict_proba(x)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-9)
    assert (fitted.classes_ == np.arange(6)).all()
    assert 0.0 <= fitted.score(x, y) <= 1.0
    assert len(fitted.loss_curve_) == 2 * 3


def test_heads_and_paths(fitted, data):
    x, _ = data
    levels = {h: fitted.predict_levels(x, h) for h in "LGO"}
    for h in "LGO":
        assert [a.shape for a in levels[h]] == [(24, 2), (24, 6)]
    np.testing.assert_allclose(levels["O"][1], 0.7 * levels["L"][1] + 0.3 * levels["G"][1], atol=1e-12)
    assert fitted.predict_paths(x).shape == (24, 2)
    with pytest.raises(ValueError):
        fitted.predict_levels(x, "X")


def test_fit_is_deterministic(fitted, data):
    again = MDANClassifier(**SMALL).fit(*data)
    assert again.model_.to_bytes() == fitted.model_.to_bytes()
    assert (again.predict_proba(data[0]) == fitted.predict_proba(data[0])).all()


def test_named_labels(data):
    x, y = data
    names = np.array(EKMAN.names(2))[y]
    est = MDANClassifier(**{**SMALL, "epochs": 1}).fit(x, names)
    assert list(est.classes_) == EKMAN.names(2)
    assert set(est.predict(x)) <= set(EKMAN.names(2))


def test_uint8_and_float_inputs_agree(fitted, data):
    x, _ = data
    np.testing.assert_allclose(fitted.predict_proba(x), fitted.predict_proba(x / 255.0), atol=1e-12)


def test_input_validation(data):
    x, y = data
    est = MDANClassifier(**SMALL)
    with pytest.raises(ShapeError):
        est.fit(x[:, :2], y)
    with pytest.raises(ShapeError):
        est.fit(x[:, :, :, :16], y)
    with pytest.raises(ValueError):
        est.fit(x, y[:-1])
    with pytest.raises(ValueError):
        est.fit(x, np.full(len(y), 6))
    with pytest.raises(ValueError):
        est.fit(x, np.array(["joy"] * len(y)))
    with pytest.raises(ConfigError):
        MDANClassifier(**{**SMALL, "alpha": 2.0}).fit(x, y)
    with pytest.raises(ConfigError):
        MDANClassifier(**{**SMALL, "batch_size": 0}).fit(x, y)


def test_predict_checks_size(fitted):
    with pytest.raises(ShapeError):
        fitted.predict(np.zeros((1, 3, 64, 64)))


def test_check_helpers():
    assert check_images(np.full((1, 3, 2, 2), 255, dtype=np.uint8)).max() == 1.0
    with pytest.raises(ValueError):
        check_images(np.full((1, 3, 2, 2), np.nan))
    assert check_leaf_labels(["fear", "anger"], EKMAN)[0].tolist() == [4, 2]
    with pytest.raises(ShapeError):
        check_leaf_labels(np.zeros((2, 2), dtype=int), EKMAN)


def test_ablation_parameter(data):
    est = MDANClassifier(**{**SMALL, "epochs": 0, "ablate": "base"}).fit(*data)
    assert not est.model_.config.mhcca_on and not est.model_.config.lcam_on
