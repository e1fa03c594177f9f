import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from stainbalance import (
    DecoupledClassifier,
    ImagePreprocessor,
    MacenkoNormalizer,
    TTAEnsembleClassifier,
)


@pytest.mark.parametrize(
    "est",
    [
        MacenkoNormalizer(alpha=2.0, on_error="passthrough"),
        ImagePreprocessor(resize_to=None, crop_to=16, pool_to=2),
        DecoupledClassifier(stage1_epochs=3, lam=0.25),
        TTAEnsembleClassifier(n_views=4),
    ],
)
def test_clone_roundtrips_params(est):
    params = est.get_params()
    copy = clone(est)
    assert copy.get_params() == params
    assert copy is not est


def test_set_params():
    clf = DecoupledClassifier().set_params(gamma=0.0, seed=3)
    assert clf.get_params()["gamma"] == 0.0 and clf.seed == 3


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        DecoupledClassifier().predict(np.zeros((1, 3)))


def test_pipeline_composition():
    ims = [np.random.default_rng(k).integers(0, 256, (24, 24, 3)).astype(np.uint8) for k in range(4)]
    pipe = make_pipeline(MacenkoNormalizer(on_error="passthrough"),
                         ImagePreprocessor(resize_to=None, crop_to=16, pool_to=2))
    assert pipe.fit_transform(ims).shape == (4, 12)
