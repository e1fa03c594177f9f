import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stainbalance.dataio import PreprocessConfig, image_to_vector
from stainbalance.exceptions import ModelDimensionMismatch, UnsupportedK
from stainbalance.inference import (
    MAX_VIEWS,
    TTAEnsembleClassifier,
    apply_view,
    argmax_class,
    average_probabilities,
    ensemble_predict,
    ensemble_predict_vectors,
    tta_views,
)
from stainbalance.model import Network


@pytest.fixture
def image():
    return np.random.default_rng(0).integers(0, 256, (6, 5, 3), dtype=np.uint8)


class TestViews:
    def test_identity_first(self, image):
        views = tta_views(image, 1)
        assert len(views) == 1 and np.array_equal(views[0], image)

    def test_count_and_shapes(self, image):
        views = tta_views(image, MAX_VIEWS)
        assert len(views) == 8
        assert views[3].shape == (5, 6, 3)

    def test_involutions(self, image):
        for k in (1, 2, 4):
            assert np.array_equal(apply_view(apply_view(image, k), k), image)

    def test_rot90_four_times(self, image):
        out = image
        for _ in range(4):
            out = apply_view(out, 3)
        assert np.array_equal(out, image)

    def test_rot270_inverts_rot90(self, image):
        assert np.array_equal(apply_view(apply_view(image, 3), 5), image)

    def test_brightness(self):
        im = np.full((2, 2, 3), 250, np.uint8)
        assert np.all(apply_view(im, 6) == 225)
        assert np.all(apply_view(im, 7) == 255)

    @pytest.mark.parametrize("K", [0, 9])
    def test_unsupported(self, image, K):
        with pytest.raises(UnsupportedK):
            tta_views(image, K)


class TestAverage:
    def test_hand_example(self):
        p = average_probabilities([(0.8, 0.2), (0.6, 0.4), (0.5, 0.5), (0.1, 0.9)])
        assert p.tolist() == [0.5, 0.5]

    def test_identical_components(self):
        v = np.array([0.2, 0.3, 0.5])
        assert np.array_equal(average_probabilities([v] * 7), v)

    def test_random_combinations(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            M, K, C = rng.integers(1, 5), rng.integers(1, 9), rng.integers(2, 8)
            P = rng.dirichlet(np.ones(C), size=M * K)
            p = average_probabilities(P)
            assert abs(p.sum() - 1) <= 1e-6
            assert p.min() >= P.min() and p.max() <= P.max()
            q = average_probabilities(P[rng.permutation(M * K)])
            assert np.max(np.abs(p - q)) <= 1e-12

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_bitwise(self, seed):
        rng = np.random.default_rng(seed)
        P = rng.dirichlet(np.ones(4), size=16)
        assert np.array_equal(average_probabilities(P), average_probabilities(P[::-1]))


class TestEnsemble:
    def test_single_model_single_view(self):
        net = Network(12, 3, seed=0)
        cfg = PreprocessConfig(resize_to=None, crop_to=4, pool_to=2)
        im = np.random.default_rng(2).integers(0, 256, (4, 4, 3), dtype=np.uint8)
        p = ensemble_predict([net], im, K=1, config=cfg)
        np.testing.assert_allclose(p, net.predict_proba(image_to_vector(im, 2)[None])[0], atol=1e-15)

    def test_model_order(self):
        nets = [Network(12, 3, seed=s) for s in range(3)]
        cfg = PreprocessConfig(resize_to=None, crop_to=4, pool_to=2)
        im = np.random.default_rng(3).integers(0, 256, (4, 4, 3), dtype=np.uint8)
        a = ensemble_predict(nets, im, 8, cfg)
        b = ensemble_predict(nets[::-1], im, 8, cfg)
        assert np.max(np.abs(a - b)) <= 1e-12
        assert abs(a.sum() - 1) <= 1e-6

    def test_dimension_checks(self):
        with pytest.raises(ModelDimensionMismatch):
            ensemble_predict_vectors([Network(4, 2), Network(4, 3)], np.zeros((1, 4)))
        with pytest.raises(ModelDimensionMismatch):
            ensemble_predict_vectors([Network(4, 2)], np.zeros((1, 5)))

    def test_estimator(self):
        nets = [Network(12, 2, seed=s) for s in range(2)]
        cfg = PreprocessConfig(resize_to=None, crop_to=4, pool_to=2)
        clf = TTAEnsembleClassifier(nets, n_views=4, preprocess=cfg, classes=["x", "y"]).fit()
        ims = [np.full((4, 4, 3), v, np.uint8) for v in (0, 128)]
        assert clf.predict_proba(ims).shape == (2, 2)
        assert set(clf.predict(ims)) <= {"x", "y"}


@pytest.mark.parametrize(
    "p, expected", [((0.1, 0.7, 0.2), 1), ((0.5, 0.5), 0), ((0, 0, 1.0), 2), ((0.3, 0.3, 0.3), 0)]
)
def test_argmax(p, expected):
    assert argmax_class(p) == expected
