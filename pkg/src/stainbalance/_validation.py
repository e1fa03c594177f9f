"""Input validation helpers shared by the estimators and free functions."""

import numbers

import numpy as np

from .exceptions import DimensionMismatch, EmptyDataset, IndexOutOfRange


def check_image(image, name="image"):
    """Return ``image`` as an ``(H, W, 3)`` integer array with values in [0, 255]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] * arr.shape[1] < 1:
        raise ValueError(f"{name} has no pixels")
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ValueError(f"{name} must hold integer pixel values")
    elif arr.dtype.kind not in "ui":
        raise ValueError(f"{name} has unsupported dtype {arr.dtype}")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError(f"{name} values must lie in [0, 255]")
    return arr.astype(np.uint8, copy=False)


def check_class_counts(counts):
    counts = np.asarray(counts)
    if counts.ndim != 1 or counts.size < 2:
        raise ValueError("class counts need at least 2 classes")
    if counts.dtype.kind == "f":
        if np.any(counts != np.round(counts)):
            raise ValueError("class counts must be integers")
    elif counts.dtype.kind not in "ui":
        raise ValueError(f"class counts have unsupported dtype {counts.dtype}")
    counts = counts.astype(np.int64)
    if np.any(counts < 1):
        raise ValueError("every class count must be >= 1")
    return counts


def check_labels(labels, n_classes=None):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyDataset("no labels given")
    if labels.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if labels.dtype.kind not in "ui":
        if labels.dtype.kind == "f" and np.all(labels == np.round(labels)):
            labels = labels.astype(np.int64)
        else:
            raise ValueError("labels must be integer class indices")
    labels = labels.astype(np.int64, copy=False)
    if labels.min() < 0 or (n_classes is not None and labels.max() >= n_classes):
        raise IndexOutOfRange("label outside [0, n_classes)")
    return labels


def check_class_index(j, n_classes):
    if not isinstance(j, numbers.Integral) or not 0 <= j < n_classes:
        raise IndexOutOfRange(f"class index {j!r} outside [0, {n_classes})")
    return int(j)


def check_seed(seed):
    if seed is None:
        return 0
    if not isinstance(seed, numbers.Integral) or seed < 0:
        raise ValueError("seed must be a non-negative integer")
    return int(seed)


def check_matrix(X, n_features=None, name="X"):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    if n_features is not None and X.shape[1] != n_features:
        raise DimensionMismatch(
            f"{name} has {X.shape[1]} features, expected {n_features}"
        )
    return X
