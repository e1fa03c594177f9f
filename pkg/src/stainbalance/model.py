"""Desk-scale classifier: ReLU MLP feature extractor plus a linear head.

``z = f(x; theta)`` applies ``relu(h @ A_i + c_i)`` for every backbone
layer; the head computes ``logits = z @ W + b``. Everything is float64 so
the analytic backward pass can be checked against finite differences.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from ._validation import check_matrix, check_seed
from .exceptions import DimensionMismatch
from .losses import softmax

DEFAULT_HIDDEN_SIZES = (64, 32)


def kaiming_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class ForwardCache:
    inputs: list  # input of every backbone layer
    pre: list  # pre-activation of every backbone layer
    z: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


class Network:
    """MLP backbone and linear classifier.

    Parameters are stored as ``backbone_weights[i]`` with shape
    ``(fan_in, fan_out)``, ``backbone_biases[i]``, ``W`` with shape
    ``(feature_dim, n_classes)`` and ``b``.
    """

    def __init__(self, input_dim, n_classes, hidden_sizes=DEFAULT_HIDDEN_SIZES, seed=0):
        if input_dim < 1 or n_classes < 2:
            raise ValueError("need input_dim >= 1 and n_classes >= 2")
        hidden_sizes = tuple(int(h) for h in hidden_sizes)
        if not hidden_sizes or min(hidden_sizes) < 1:
            raise ValueError("hidden_sizes must be a non-empty tuple of positive widths")
        self.input_dim = int(input_dim)
        self.n_classes = int(n_classes)
        self.hidden_sizes = hidden_sizes
        self.frozen = False
        self.trained_stage = 0

        rng = np.random.Generator(np.random.PCG64(check_seed(seed)))
        dims = (self.input_dim,) + hidden_sizes
        self.backbone_weights = [kaiming_uniform(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.backbone_biases = [np.zeros(b) for b in dims[1:]]
        self.W = np.zeros((self.feature_dim, self.n_classes))
        self.b = np.zeros(self.n_classes)
        self.reinit_classifier(rng.integers(2**63))

    @property
    def feature_dim(self):
        return self.hidden_sizes[-1]

    def reinit_classifier(self, seed):
        """Draw ``W ~ U(-1/sqrt(feature_dim), 1/sqrt(feature_dim))`` and zero ``b``."""
        rng = np.random.Generator(np.random.PCG64(check_seed(int(seed))))
        bound = 1.0 / np.sqrt(self.feature_dim)
        self.W = rng.uniform(-bound, bound, size=(self.feature_dim, self.n_classes))
        self.b = np.zeros(self.n_classes)
        return self

    def features(self, X):
        return self.forward(X).z

    def forward(self, X):
        X = check_matrix(X)
        if X.shape[1] != self.input_dim:
            raise DimensionMismatch(f"input has {X.shape[1]} features, model expects {self.input_dim}")
        inputs, pre = [], []
        h = X
        for A, c in zip(self.backbone_weights, self.backbone_biases):
            inputs.append(h)
            a = h @ A + c
            pre.append(a)
            h = np.maximum(a, 0.0)
        return self.head(h, inputs, pre)

    def head(self, z, inputs=None, pre=None):
        """Classifier forward from precomputed features."""
        z = check_matrix(z, self.feature_dim, name="z")
        logits = z @ self.W + self.b
        return ForwardCache(inputs or [], pre or [], z, logits, softmax(logits))

    def predict_proba(self, X):
        return self.forward(X).probs

    def backward(self, cache, dlogits):
        """Parameter gradients given ``dL/dlogits`` of shape ``(N, C)``.

        Returns a dict with ``W`` and ``b`` always and, unless the backbone
        is frozen or the cache came from :meth:`head`, ``backbone_weights``
        and ``backbone_biases`` lists.
        """
        dlogits = np.asarray(dlogits, dtype=np.float64)
        if dlogits.shape != cache.logits.shape:
            raise DimensionMismatch(
                f"gradient shape {dlogits.shape} does not match logits {cache.logits.shape}"
            )
        grads = {"W": cache.z.T @ dlogits, "b": dlogits.sum(axis=0)}
        if self.frozen or not cache.pre:
            return grads
        gw, gb = [], []
        dh = dlogits @ self.W.T
        for i in reversed(range(len(self.backbone_weights))):
            da = dh * (cache.pre[i] > 0)
            gw.append(cache.inputs[i].T @ da)
            gb.append(da.sum(axis=0))
            if i:
                dh = da @ self.backbone_weights[i].T
        grads["backbone_weights"] = gw[::-1]
        grads["backbone_biases"] = gb[::-1]
        return grads

    # parameter plumbing shared with the optimizer and checkpoints

    def parameter_names(self):
        names = []
        for i in range(len(self.backbone_weights)):
            names += [f"backbone_weights.{i}", f"backbone_biases.{i}"]
        return names + ["W", "b"]

    def get_parameter(self, name):
        if "." in name:
            group, i = name.split(".")
            return getattr(self, group)[int(i)]
        return getattr(self, name)

    def set_parameter(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.get_parameter(name).shape:
            raise DimensionMismatch(f"{name}: shape {value.shape} != {self.get_parameter(name).shape}")
        if "." in name:
            group, i = name.split(".")
            getattr(self, group)[int(i)] = value
        else:
            setattr(self, name, value)

    def state(self):
        return {name: self.get_parameter(name).copy() for name in self.parameter_names()}

    def load_state(self, state):
        for name in self.parameter_names():
            self.set_parameter(name, state[name])

    def backbone_hash(self):
        h = hashlib.sha256()
        for A, c in zip(self.backbone_weights, self.backbone_biases):
            h.update(np.ascontiguousarray(A, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(c, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self):
        other = object.__new__(Network)
        other.__dict__.update(self.__dict__)
        other.backbone_weights = [A.copy() for A in self.backbone_weights]
        other.backbone_biases = [c.copy() for c in self.backbone_biases]
        other.W = self.W.copy()
        other.b = self.b.copy()
        return other


def flatten_grads(grads):
    """Map a :meth:`Network.backward` result onto parameter names."""
    out = {"W": grads["W"], "b": grads["b"]}
    for i, g in enumerate(grads.get("backbone_weights", [])):
        out[f"backbone_weights.{i}"] = g
    for i, g in enumerate(grads.get("backbone_biases", [])):
        out[f"backbone_biases.{i}"] = g
    return out
