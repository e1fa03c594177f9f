import numpy as np
import pytest

from stainbalance.stain_norm import rgb_to_od, solve_concentrations
from stainbalance.synthgen import (
    SynthBlobSpec,
    SynthStainSpec,
    geometric_counts,
    synth_blobs,
    synth_cell_dataset,
    synth_cell_image,
    synth_stained_image,
)


def test_zero_concentration_is_white():
    im, conc = synth_stained_image(SynthStainSpec(concentration_ranges=((0, 0), (0, 0))))
    assert np.all(im == 255) and np.all(conc == 0)


@pytest.mark.parametrize("seed", range(3))
def test_single_stain_pixels_parallel(seed):
    spec = SynthStainSpec(concentration_ranges=((0.0, 1.0), (0.0, 0.0)), seed=seed)
    im, _ = synth_stained_image(spec)
    # Beer-Lambert inverse of the quantized pixels
    od = -np.log10(np.maximum(im, 1) / 255.0).reshape(-1, 3)
    od = od[od.max(axis=1) >= 0.15]
    cos = od @ spec.stains[:, 0] / np.linalg.norm(od, axis=1)
    assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() < 0.5


@pytest.mark.parametrize("seed", range(3))
def test_concentration_roundtrip(seed):
    spec = SynthStainSpec(seed=seed)
    im, conc = synth_stained_image(spec)
    est = solve_concentrations(rgb_to_od(im), spec.stains)
    assert np.abs(est - conc).mean() < 0.02


def test_stained_image_deterministic():
    a = synth_stained_image(SynthStainSpec(seed=4))
    b = synth_stained_image(SynthStainSpec(seed=4))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_blob_histogram_and_determinism():
    spec = SynthBlobSpec(counts=(1000, 100, 10), n_features=3, seed=1)
    X, y = synth_blobs(spec)
    assert np.bincount(y).tolist() == [1000, 100, 10]
    X2, y2 = synth_blobs(SynthBlobSpec(counts=(1000, 100, 10), n_features=3, seed=1))
    assert np.array_equal(X, X2) and np.array_equal(y, y2)
    assert max(spec.counts) / min(spec.counts) == 100


def test_default_benchmark():
    spec = SynthBlobSpec()
    assert spec.counts == (2000, 600, 180, 54, 16)
    assert max(spec.counts) / min(spec.counts) == 125


def test_far_blobs_linearly_separable():
    from sklearn.linear_model import LogisticRegression

    X, y = synth_blobs(SynthBlobSpec(counts=(500, 500), n_features=2, separation=20, seed=0))
    assert LogisticRegression().fit(X, y).score(X, y) >= 0.99


def test_blob_spec_validation():
    with pytest.raises(ValueError):
        SynthBlobSpec(counts=(5,))
    with pytest.raises(ValueError):
        SynthBlobSpec(counts=(5, 0))


def test_geometric_counts():
    assert geometric_counts(2000, 5, 0.3) == (2000, 600, 180, 54, 16)


def test_cell_images():
    big, _ = synth_cell_image(0, 0, size=32)
    small, _ = synth_cell_image(0, 1, size=32)
    assert big.shape == (32, 32, 3)
    # the large nucleus darkens more pixels
    assert (big.sum(axis=2) < 300).sum() > (small.sum(axis=2) < 300).sum()


def test_cell_dataset_per_item_streams():
    items = list(synth_cell_dataset(5, seed=3, size=16))
    again = list(synth_cell_dataset(3, seed=3, size=16))
    for (a, sa, la), (b, sb, lb) in zip(items, again):
        assert np.array_equal(a, b) and np.array_equal(sa, sb) and la == lb
