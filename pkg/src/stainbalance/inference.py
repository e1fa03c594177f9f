"""Test-time augmentation and probability-averaging ensembles.

For ``M`` models and ``K`` views the ensemble distribution is the uniform
mean of all ``M * K`` softmax vectors. Sums are exactly rounded
(``math.fsum``), so the result does not depend on model or view order.
"""

import logging
import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image
from .dataio import PreprocessConfig, image_to_vector, prepare_image
from .exceptions import ModelDimensionMismatch, UnsupportedK

logger = logging.getLogger(__name__)

VIEW_NAMES = (
    "identity",
    "hflip",
    "vflip",
    "rot90",
    "rot180",
    "rot270",
    "brightness_0.9",
    "brightness_1.1",
)
MAX_VIEWS = len(VIEW_NAMES)


def _brightness(image, factor):
    return np.clip(np.round(image.astype(np.float64) * factor), 0, 255).astype(np.uint8)


_VIEWS = (
    lambda im: im,
    lambda im: im[:, ::-1],
    lambda im: im[::-1, :],
    lambda im: np.rot90(im, 1),
    lambda im: np.rot90(im, 2),
    lambda im: np.rot90(im, 3),
    lambda im: _brightness(im, 0.9),
    lambda im: _brightness(im, 1.1),
)


def apply_view(image, k):
    return np.ascontiguousarray(_VIEWS[k](image))


def tta_views(image, K=MAX_VIEWS):
    """The first ``K`` views of the fixed ordered set in :data:`VIEW_NAMES`."""
    if not 1 <= K <= MAX_VIEWS:
        raise UnsupportedK(f"K must lie in [1, {MAX_VIEWS}], got {K}")
    image = check_image(image)
    return [apply_view(image, k) for k in range(K)]


def average_probabilities(prob_vectors):
    """Uniform mean of a sequence of probability vectors, order-independent."""
    P = np.asarray(prob_vectors, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("need a non-empty (n, C) stack of probability vectors")
    n = P.shape[0]
    return np.array([math.fsum(P[:, c]) / n for c in range(P.shape[1])])


def _check_models(models):
    models = list(models)
    if not models:
        raise ValueError("need at least one model")
    C, d = models[0].n_classes, models[0].input_dim
    for m in models[1:]:
        if m.n_classes != C:
            raise ModelDimensionMismatch("models disagree on the number of classes")
        if m.input_dim != d:
            raise ModelDimensionMismatch("models disagree on the input dimension")
    return models


def ensemble_predict_vectors(models, view_vectors):
    """Ensemble distribution from already-featurized views ``(K, d)``."""
    models = _check_models(models)
    V = np.atleast_2d(np.asarray(view_vectors, dtype=np.float64))
    if V.shape[1] != models[0].input_dim:
        raise ModelDimensionMismatch(
            f"inputs have {V.shape[1]} features, models expect {models[0].input_dim}"
        )
    return average_probabilities(np.concatenate([m.predict_proba(V) for m in models]))


def ensemble_predict(models, image, K=MAX_VIEWS, config=None, normalizer=None):
    """Mean softmax over ``models`` and the first ``K`` views of ``image``.

    ``image`` is resized, cropped and stain-normalized once per ``config``;
    views are taken of the prepared image and then pooled to vectors.
    """
    config = config or PreprocessConfig()
    prepared = prepare_image(image, config, normalizer)
    vectors = [image_to_vector(v, config.pool_to) for v in tta_views(prepared, K)]
    return ensemble_predict_vectors(models, vectors)


def argmax_class(p):
    """Index of the largest probability; ties go to the lowest index."""
    return int(np.argmax(np.asarray(p)))


class TTAEnsembleClassifier(ClassifierMixin, BaseEstimator):
    """Probability-averaging ensemble of trained networks over TTA views.

    ``fit`` only checks that the models agree; there is nothing to learn.
    ``predict_proba`` takes a list of RGB images.
    """

    def __init__(self, models=None, n_views=MAX_VIEWS, preprocess=None, normalizer=None, classes=None):
        self.models = models
        self.n_views = n_views
        self.preprocess = preprocess
        self.normalizer = normalizer
        self.classes = classes

    def fit(self, X=None, y=None):
        if not 1 <= self.n_views <= MAX_VIEWS:
            raise UnsupportedK(f"n_views must lie in [1, {MAX_VIEWS}]")
        self.models_ = _check_models(self.models or [])
        C = self.models_[0].n_classes
        self.classes_ = np.arange(C) if self.classes is None else np.asarray(self.classes)
        if self.classes_.size != C:
            raise ModelDimensionMismatch("classes do not match the models' output size")
        self.config_ = self.preprocess or PreprocessConfig()
        if self.config_.input_dim != self.models_[0].input_dim:
            raise ModelDimensionMismatch("preprocessing output does not match model input")
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "models_")
        return np.stack(
            [ensemble_predict(self.models_, im, self.n_views, self.config_, self.normalizer) for im in X]
        )

    def predict(self, X):
        return self.classes_[[argmax_class(p) for p in self.predict_proba(X)]]
