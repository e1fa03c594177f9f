"""Seeded synthetic data: Beer-Lambert stained images and long-tailed blobs.

All generators use ``numpy.random.PCG64``. Per-item streams come from
``numpy.random.SeedSequence(seed).spawn(n)``, so item ``i`` of a batch is
identical whether it is generated alone or with others.
"""

from dataclasses import dataclass, field

import numpy as np

from .stain_norm import DEFAULT_REFERENCE_STAINS, check_stain_matrix

DEFAULT_BENCHMARK_COUNTS = (2000, 600, 180, 54, 16)


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def item_seeds(seed, n):
    return np.random.SeedSequence(seed).spawn(n)


@dataclass
class SynthStainSpec:
    stains: np.ndarray = field(
        default_factory=lambda: DEFAULT_REFERENCE_STAINS
        / np.linalg.norm(DEFAULT_REFERENCE_STAINS, axis=0)
    )
    # (low, high) per stain
    concentration_ranges: tuple = ((0.0, 1.0), (0.0, 0.6))
    height: int = 64
    width: int = 64
    seed: int = 0

    def __post_init__(self):
        self.stains = check_stain_matrix(self.stains)
        ranges = np.asarray(self.concentration_ranges, dtype=np.float64)
        if ranges.shape != (2, 2) or np.any(ranges[:, 0] < 0) or np.any(ranges[:, 1] < ranges[:, 0]):
            raise ValueError("concentration_ranges must be two (low, high) pairs with 0 <= low <= high")
        self.concentration_ranges = ranges


def beer_lambert(conc, stains, background_intensity=255):
    """Render concentrations ``(..., 2)`` as an 8-bit RGB image."""
    od = np.asarray(conc, dtype=np.float64) @ np.asarray(stains).T
    v = np.round(background_intensity * np.power(10.0, -od))
    return np.clip(v, 0, 255).astype(np.uint8)


def synth_stained_image(spec):
    """Return ``(image, concentrations)`` drawn uniformly from spec.concentration_ranges."""
    rng = make_rng(spec.seed)
    lo = spec.concentration_ranges[:, 0]
    hi = spec.concentration_ranges[:, 1]
    conc = lo + (hi - lo) * rng.random((spec.height, spec.width, 2))
    return beer_lambert(conc, spec.stains), conc


def random_stain_matrix(rng, max_jitter_deg=8.0):
    """Perturb the reference H&E directions by a random rotation-like jitter."""
    base = DEFAULT_REFERENCE_STAINS / np.linalg.norm(DEFAULT_REFERENCE_STAINS, axis=0)
    cols = []
    for j in range(2):
        v = base[:, j] + np.tan(np.deg2rad(max_jitter_deg)) * rng.uniform(-1, 1, 3) / np.sqrt(3)
        v = np.abs(v)
        cols.append(v / np.linalg.norm(v))
    return np.column_stack(cols)


@dataclass
class SynthBlobSpec:
    """Isotropic Gaussian classes.

    ``centers`` defaults to ``separation * e_j`` in ``n_features`` dimensions
    (one axis per class) when left as ``None``. The default separation of 9
    spreads leaves the classes learnable by a balanced linear head while a
    briefly trained, naturally sampled model still favours the head classes.
    """

    counts: tuple = DEFAULT_BENCHMARK_COUNTS
    n_features: int = 8
    separation: float = 9.0
    spread: float = 1.0
    centers: np.ndarray = None
    seed: int = 0

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 1 or counts.size < 2 or np.any(counts < 1):
            raise ValueError("need >= 2 classes with count >= 1 each")
        self.counts = tuple(int(c) for c in counts)
        if self.centers is None:
            if self.n_features < len(self.counts):
                raise ValueError("n_features must be >= number of classes for default centers")
            centers = np.zeros((len(self.counts), self.n_features))
            centers[np.arange(len(self.counts)), np.arange(len(self.counts))] = self.separation
            self.centers = centers
        else:
            self.centers = np.asarray(self.centers, dtype=np.float64)
            if self.centers.shape[0] != len(self.counts):
                raise ValueError("one center per class required")
            self.n_features = self.centers.shape[1]


def synth_blobs(spec):
    """Return ``(X, y)`` with exactly ``spec.counts[j]`` rows of class ``j``.

    Rows are grouped by class; shuffle downstream if order matters.
    """
    rng = make_rng(spec.seed)
    X, y = [], []
    for j, n in enumerate(spec.counts):
        X.append(spec.centers[j] + spec.spread * rng.standard_normal((n, spec.n_features)))
        y.append(np.full(n, j, dtype=np.int64))
    return np.concatenate(X), np.concatenate(y)


def geometric_counts(n_head, n_classes, ratio):
    """Long-tailed counts ``round(n_head * ratio**j)``, floored at 1."""
    return tuple(max(1, int(round(n_head * ratio**j))) for j in range(n_classes))


CELL_CLASSES = ("large_nucleus", "small_nucleus")


def synth_cell_image(seed, label, size=64, stains=None):
    """A round hematoxylin "nucleus" on eosin "cytoplasm".

    Class 0 has nucleus radius ``0.35 * size``, class 1 ``0.15 * size``;
    the centre is jittered by up to 10% of the size.
    Returns ``(image, concentrations)``.
    """
    rng = make_rng(seed)
    if stains is None:
        stains = random_stain_matrix(rng)
    radius = (0.35 if label == 0 else 0.15) * size
    cy, cx = (size - 1) / 2 + rng.uniform(-0.1, 0.1, 2) * size
    yy, xx = np.mgrid[0:size, 0:size]
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    conc = np.empty((size, size, 2))
    conc[..., 0] = np.where(inside, rng.uniform(0.5, 1.0, inside.shape), rng.uniform(0.0, 0.1, inside.shape))
    conc[..., 1] = rng.uniform(0.05, 0.5, inside.shape)
    return beer_lambert(conc, stains), conc


def synth_cell_dataset(n, seed=0, size=64, class_fractions=(0.8, 0.2)):
    """Yield ``(image, stains, label)`` for ``n`` images with jittered stains.

    Item ``i`` uses the ``i``-th stream of :func:`item_seeds`; labels follow
    ``class_fractions``.
    """
    fractions = np.asarray(class_fractions, dtype=np.float64)
    for ss in item_seeds(seed, n):
        rng = np.random.Generator(np.random.PCG64(ss))
        stains = random_stain_matrix(rng)
        label = int(rng.choice(len(fractions), p=fractions / fractions.sum()))
        image, _ = synth_cell_image(int(rng.integers(2**63)), label, size, stains)
        yield image, stains, label
