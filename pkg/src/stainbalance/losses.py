"""Effective-number class weights and the Stage-2 hybrid loss.

The hybrid loss for a sample with true-class probability ``p`` is::

    L = (1 - lam) * CE + lam * (1 - p)**gamma * CE,    CE = -alpha_y * ln(p)

``p`` is clamped to ``[1e-12, 1]`` before the log. Batch losses are means.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_class_counts, check_labels
from .exceptions import IndexOutOfRange

P_MIN = 1e-12


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.9999
    gamma: float = 2.0
    lam: float = 0.5

    def __post_init__(self):
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")


PLAIN_CE = LossConfig(beta=0.0, gamma=0.0, lam=0.0)


@dataclass(frozen=True)
class ClassWeights:
    alpha: np.ndarray
    effective_numbers: np.ndarray

    @classmethod
    def uniform(cls, n_classes):
        ones = np.ones(n_classes)
        return cls(ones, ones.copy())


def effective_number_weights(counts, beta, normalize=False):
    """Class weights ``alpha_j = (1 - beta) / (1 - beta**n_j)``.

    Args:
        counts: per-class sample counts.
        beta: in [0, 1). ``beta = 0`` gives unit weights.
        normalize: rescale alpha to sum to the number of classes. Off by
            default; the raw weights are used as-is otherwise.
    """
    counts = check_class_counts(counts)
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    if beta == 0:
        eff = np.ones(counts.size)
    else:
        # 1 - beta**n without cancellation
        eff = -np.expm1(counts * np.log(beta)) / (1.0 - beta)
    alpha = 1.0 / eff
    if normalize:
        alpha = alpha * counts.size / alpha.sum()
    return ClassWeights(alpha, eff)


def _gather(p, y):
    p = np.asarray(p, dtype=np.float64)
    scalar = p.ndim == 1
    p2 = np.atleast_2d(p)
    y = np.atleast_1d(np.asarray(y))
    if y.shape[0] != p2.shape[0]:
        raise ValueError("one label per probability row required")
    if y.dtype.kind not in "ui" or y.min() < 0 or y.max() >= p2.shape[1]:
        raise IndexOutOfRange("label outside the class range")
    py = p2[np.arange(p2.shape[0]), y]
    return py, y, scalar


def _out(values, scalar):
    return float(values[0]) if scalar else values


def _ce(py, y, weights):
    return -np.asarray(weights.alpha)[y] * np.log(np.clip(py, P_MIN, 1.0))


def cb_cross_entropy(p, y, weights):
    """``-alpha_y * ln(p_y)`` per sample; a float for a single vector."""
    py, y, scalar = _gather(p, y)
    return _out(_ce(py, y, weights), scalar)


def focal_loss(p, y, weights, gamma):
    py, y, scalar = _gather(p, y)
    return _out((1.0 - np.clip(py, P_MIN, 1.0)) ** gamma * _ce(py, y, weights), scalar)


def hybrid_loss(p, y, config, weights):
    ce = cb_cross_entropy(p, y, weights)
    fl = focal_loss(p, y, weights, config.gamma)
    return (1.0 - config.lam) * ce + config.lam * fl


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def hybrid_loss_and_grad(logits, y, config, weights):
    """Per-sample hybrid loss of ``softmax(logits)`` and its logit gradient.

    Works on a single logit vector or an ``(N, C)`` batch (no reduction).
    The gradient ignores the probability clamp, i.e. it is the derivative
    of the unclamped loss evaluated at the clamped probability.
    """
    logits = np.asarray(logits, dtype=np.float64)
    scalar = logits.ndim == 1
    z = np.atleast_2d(logits)
    s = softmax(z)
    py, y, _ = _gather(s, y)
    n = z.shape[0]
    rows = np.arange(n)

    # 1 - p_y as the sum of the other classes keeps precision when p_y ~ 1
    others = s.copy()
    others[rows, y] = 0.0
    q = others.sum(axis=1)
    p = np.clip(py, P_MIN, 1.0)
    logp = np.log(p)
    alpha = np.asarray(weights.alpha)[y]
    gamma, lam = config.gamma, config.lam

    qg = q**gamma
    loss = -alpha * logp * ((1.0 - lam) + lam * qg)

    # p * dL/dp
    if gamma == 0 or lam == 0:
        extra = np.zeros(n)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            extra = np.where(q > 0, lam * gamma * p * q ** (gamma - 1.0) * logp, 0.0)
    p_dl_dp = alpha * (-((1.0 - lam) + lam * qg) + extra)

    # dp_y/dz_k = p_y (delta_yk - s_k)
    onehot = np.zeros_like(s)
    onehot[rows, y] = 1.0
    grad = p_dl_dp[:, None] * (onehot - s)
    if scalar:
        return float(loss[0]), grad[0]
    return loss, grad


def hybrid_loss_grad(logits, y, config, weights):
    return hybrid_loss_and_grad(logits, y, config, weights)[1]


def batch_loss_and_grad(logits, y, config, weights):
    """Mean loss over the batch and the matching ``(N, C)`` logit gradient."""
    y = check_labels(y, np.asarray(logits).shape[-1])
    loss, grad = hybrid_loss_and_grad(logits, y, config, weights)
    n = loss.shape[0]
    return float(loss.mean()), grad / n
