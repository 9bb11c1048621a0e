import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mixercseg.data import CrackSpec, generate
from mixercseg.estimator import CrackSegmenter
from mixercseg.exceptions import ConfigError, ShapeError

SMALL = dict(widths=(4, 8, 12, 16), epochs=1, random_state=0)


@pytest.fixture(scope="module")
def arrays():
    samples = generate(CrackSpec(seed=8), 6, 32, 32)
    X = np.stack([s.image for s in samples])
    y = np.stack([s.mask[0] for s in samples])
    return X, y


@pytest.fixture(scope="module")
def fitted(arrays):
    X, y = arrays
    return CrackSegmenter(**SMALL).fit(X[:4], y[:4], X[4:], y[4:])


def test_get_set_params_and_clone():
    seg = CrackSegmenter(gamma=0.25, n_bins=36)
    params = seg.get_params()
    assert params["gamma"] == 0.25 and params["n_bins"] == 36
    twin = clone(seg.set_params(epochs=3))
    assert twin.epochs == 3 and not hasattr(twin, "model_")


def test_predict_shapes(fitted, arrays):
    X, _ = arrays
    proba = fitted.predict_proba(X)
    assert proba.shape == (6, 32, 32)
    assert (proba >= 0).all() and (proba <= 1).all()
    labels = fitted.predict(X)
    assert labels.dtype == np.uint8
    assert set(np.unique(labels)) <= {0, 1}
    assert np.array_equal(labels, (proba >= 0.5).astype(np.uint8))
    assert len(fitted.history_) == 1


def test_single_image_is_promoted(fitted, arrays):
    assert fitted.predict(arrays[0][0]).shape == (1, 32, 32)


def test_score_is_miou(fitted, arrays):
    X, y = arrays
    assert 0.0 <= fitted.score(X, y) <= 1.0


def test_fit_is_deterministic(arrays):
    X, y = arrays
    a = CrackSegmenter(**SMALL).fit(X[:3], y[:3]).predict_proba(X)
    b = CrackSegmenter(**SMALL).fit(X[:3], y[:3]).predict_proba(X)
    assert np.array_equal(a, b)


def test_not_fitted(arrays):
    with pytest.raises(NotFittedError):
        CrackSegmenter().predict(arrays[0])


def test_input_validation(arrays):
    X, y = arrays
    seg = CrackSegmenter(**SMALL)
    with pytest.raises(ShapeError):
        seg.fit(X[:, :2], y)
    with pytest.raises(ShapeError):
        seg.fit(X, y[:3])
    with pytest.raises(ValueError):
        seg.fit(X * 2, y)
    with pytest.raises(ValueError):
        seg.fit(X, y * 2)
    with pytest.raises(ConfigError):
        seg.fit(X[..., :24, :24], y[..., :24, :24])
    with pytest.raises(ConfigError):
        CrackSegmenter(widths=(4, 4, 8, 16), epochs=0).fit(X, y)
