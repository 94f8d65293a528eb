import numpy as np
import pytest
from sklearn.base import clone

from distill_lab.estimator import RadianceFieldInpainter


def small(**kw):
    params = dict(iterations=3, batch_size=64, n_samples=16, distill_resolution=16, eval_views=(1, 4))
    params.update(kw)
    return RadianceFieldInpainter(**params)


def test_params_and_clone():
    est = small(omega3=1.0)
    assert est.get_params()["omega3"] == 1.0
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    est.set_params(lr=0.1)
    assert est.lr == 0.1


def test_fit_predict_score(tiny_dataset):
    est = small().fit(tiny_dataset)
    assert est.grid_.dims == tiny_dataset.target_grid.dims
    assert len(est.history_) == 3
    imgs = est.predict(tiny_dataset.cameras[:2])
    assert imgs.shape == (2, 24, 24, 3) and np.all(np.isfinite(imgs))
    assert est.predict(tiny_dataset.cameras[0]).shape == (1, 24, 24, 3)
    assert np.isfinite(est.score(tiny_dataset))


def test_fit_is_reproducible(tiny_dataset):
    a = small(random_state=4).fit(tiny_dataset)
    b = clone(a).fit(tiny_dataset)
    assert np.array_equal(a.grid_.raw_color, b.grid_.raw_color)


def test_errors(tiny_dataset):
    with pytest.raises(RuntimeError, match="not fitted"):
        small().predict(tiny_dataset.cameras)
    with pytest.raises(TypeError):
        small().fit(np.zeros((3, 3)))
    with pytest.raises(IndexError):
        small(eval_views=(40,)).fit(tiny_dataset)
    with pytest.raises(ValueError):
        small(estimator="magic").fit(tiny_dataset)
    with pytest.raises(ValueError, match="lr"):
        small(lr=0.0).fit(tiny_dataset)
    with pytest.raises(TypeError, match="iterations"):
        small(iterations=2.5).fit(tiny_dataset)
