"""Index streams for the two training regimes.

Stage 1 draws a fresh permutation every epoch (instance-balanced). Stage 2
draws with replacement, each sample weighted by the inverse of its class
frequency, which makes the class prior uniform in expectation.

The generator is ``numpy.random.PCG64``; its name is written into
checkpoints as :data:`PRNG_ALGORITHM` so plans can be replayed.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_class_counts, check_class_index, check_labels, check_seed

PRNG_ALGORITHM = "numpy.PCG64"

INSTANCE_BALANCED = "instance_balanced"
CLASS_BALANCED = "class_balanced"


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(check_seed(seed)))


@dataclass(frozen=True)
class SamplingPlan:
    indices: np.ndarray
    regime: str
    seed: int

    def __post_init__(self):
        self.indices.setflags(write=False)

    def __len__(self):
        return len(self.indices)

    def batches(self, batch_size):
        """Yield consecutive index chunks; the last one may be short."""
        for start in range(0, len(self.indices), batch_size):
            yield self.indices[start : start + batch_size]


def class_prior(counts, j):
    """Fraction of samples that belong to class ``j``."""
    counts = check_class_counts(counts)
    j = check_class_index(j, counts.size)
    return counts[j] / counts.sum()


def class_counts(labels, n_classes=None):
    labels = check_labels(labels, n_classes)
    return np.bincount(labels, minlength=n_classes or 0)


def instance_balanced_plan(labels, seed):
    labels = check_labels(labels)
    seed = check_seed(seed)
    return SamplingPlan(make_rng(seed).permutation(labels.size), INSTANCE_BALANCED, seed)


def inverse_frequency_weights(labels):
    labels = check_labels(labels)
    counts = np.bincount(labels)
    return 1.0 / counts[labels]


def class_balanced_plan(labels, n_draws=None, seed=0):
    """Draw ``n_draws`` indices with probability proportional to ``1 / n_{y_i}``.

    Uses inverse-transform sampling on the cumulative weights. ``n_draws``
    defaults to the dataset size.
    """
    labels = check_labels(labels)
    seed = check_seed(seed)
    n_draws = labels.size if n_draws is None else int(n_draws)
    if n_draws < 1:
        raise ValueError("n_draws must be positive")
    cum = np.cumsum(inverse_frequency_weights(labels))
    u = make_rng(seed).random(n_draws) * cum[-1]
    idx = np.searchsorted(cum, u, side="right")
    # u can round up to cum[-1] exactly
    np.minimum(idx, labels.size - 1, out=idx)
    return SamplingPlan(idx, CLASS_BALANCED, seed)


def stratified_split(labels, fraction=0.1, seed=0):
    """Split indices into ``(train, val)`` with ``fraction`` of each class in val.

    Every class with at least two samples contributes at least one
    validation sample; singletons stay in training.
    """
    labels = check_labels(labels)
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    rng = make_rng(seed)
    train, val = [], []
    for j in np.unique(labels):
        idx = np.flatnonzero(labels == j)
        idx = idx[rng.permutation(idx.size)]
        n_val = 0 if idx.size < 2 else max(1, int(round(fraction * idx.size)))
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))
