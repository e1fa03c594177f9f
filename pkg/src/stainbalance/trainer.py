"""Decoupled two-stage training.

Stage 1 trains backbone and head end to end with plain cross entropy on
per-epoch permutations. Stage 2 freezes the backbone, re-draws the head and
retrains it on inverse-frequency batches with the hybrid class-balanced
loss. Both stages use AdamW with a per-epoch cosine schedule, early
stopping on a validation metric and restore the best epoch's weights.
"""

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_labels, check_matrix
from .exceptions import DimensionMismatch, EmptyDataset, InvalidSchedule, MissingStage1, ShapeMismatch
from .losses import PLAIN_CE, ClassWeights, LossConfig, batch_loss_and_grad, effective_number_weights
from .metrics import evaluate
from .model import DEFAULT_HIDDEN_SIZES, Network, flatten_grads
from .sampling import class_balanced_plan, instance_balanced_plan, stratified_split

logger = logging.getLogger(__name__)

STAGE_DEFAULTS = {
    1: {"epochs": 100, "lr_max": 1e-4},
    2: {"epochs": 50, "lr_max": 1e-3},
}


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 100
    batch_size: int = 256
    lr_max: float = 1e-4
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    early_stopping_patience: int = 10
    seed: int = 0
    # Stage-2 loss
    beta: float = 0.9999
    gamma: float = 2.0
    lam: float = 0.5
    normalize_weights: bool = False
    # plumbing
    hidden_sizes: tuple = DEFAULT_HIDDEN_SIZES
    val_fraction: float = 0.1
    augment: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.epochs < 1 or self.batch_size < 1 or self.early_stopping_patience < 1:
            raise ValueError("epochs, batch_size and early_stopping_patience must be positive")
        if self.lr_max < 0 or not 0 <= self.lr_min <= self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.loss_config  # validates beta/gamma/lam

    @classmethod
    def for_stage(cls, stage, **overrides):
        return cls(stage=stage, **{**STAGE_DEFAULTS[stage], **overrides})

    @property
    def loss_config(self):
        return LossConfig(self.beta, self.gamma, self.lam)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


def cosine_lr(t, T, lr_max, lr_min=0.0):
    if T < 1 or t < 0:
        raise InvalidSchedule("need T >= 1 and t >= 0")
    if t > T:
        raise InvalidSchedule(f"epoch {t} past schedule end {T}")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / T))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def optimizer_step(params, grads, state, lr, config):
    """One AdamW update over the named arrays in ``grads``.

    Decoupled decay ``p -= lr * weight_decay * p`` is applied first, then the
    bias-corrected adaptive step. Returns ``(new_params, state)``; names
    absent from ``grads`` are passed through untouched.
    """
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ShapeMismatch(f"{name}: parameter {p.shape} vs gradient {g.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p = p - lr * config.weight_decay * p
        out[name] = p - lr * (m / corr1) / (np.sqrt(v / corr2) + config.eps)
    return out, state


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_macro_f1: float
    val_balanced_accuracy: float
    lr: float


@dataclass
class TrainReport:
    stage: int
    monitor: str
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    stopping_reason: str = ""
    restored_best: bool = True

    @property
    def best(self):
        return self.epochs[self.best_epoch]

    def to_csv(self):
        buf = io.StringIO()
        buf.write(f"# stage={self.stage} monitor={self.monitor} best_epoch={self.best_epoch} "
                  f"stopping_reason={self.stopping_reason} restored_best={self.restored_best}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_macro_f1", "val_balanced_accuracy", "lr"])
        for r in self.epochs:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_macro_f1),
                        repr(r.val_balanced_accuracy), repr(r.lr)])
        return buf.getvalue()


def _epoch_seed(seed, stage, epoch, stream):
    return int(np.random.SeedSequence([seed, stage, epoch, stream]).generate_state(1, np.uint64)[0] >> 1)


def _check_views(X, name="X"):
    """Accept ``(n, d)`` or ``(n, V, d)`` (precomputed augmented views)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, None, :]
    if X.ndim != 3 or not np.all(np.isfinite(X)):
        raise ValueError(f"{name} must be a finite (n, d) or (n, views, d) array")
    return X


def _pick_views(X, idx, config, seed, stage, epoch):
    if X.shape[1] == 1 or not config.augment:
        return X[idx, 0]
    rng = np.random.Generator(np.random.PCG64(_epoch_seed(seed, stage, epoch, 2)))
    return X[idx, rng.integers(X.shape[1], size=idx.size)]


def _validate(model, X_val, y_val, features=False):
    if features:
        probs = model.head(X_val).probs
    else:
        probs = model.predict_proba(X_val)
    return evaluate(probs.argmax(axis=1), y_val, model.n_classes)


def _check_dataset(X, y, X_val, y_val, model, feature_input=False):
    X = _check_views(X)
    if X.shape[0] == 0:
        raise EmptyDataset("training set is empty")
    y = check_labels(y, model.n_classes)
    if y.size != X.shape[0]:
        raise DimensionMismatch("X and y lengths differ")
    if np.unique(y).size < 2:
        raise ValueError("training labels must cover at least 2 classes")
    dim = model.feature_dim if feature_input else model.input_dim
    if X.shape[2] != dim:
        raise DimensionMismatch(f"inputs have {X.shape[2]} features, model expects {dim}")
    X_val = _check_views(X_val, "X_val")[:, 0]
    y_val = check_labels(y_val, model.n_classes)
    if X_val.shape[0] != y_val.size:
        raise DimensionMismatch("X_val and y_val lengths differ")
    return X, y, X_val, y_val


def _fit_loop(model, names, X, y, X_val, y_val, config, plan_fn, loss_config, weights, monitor,
              head_only):
    """Shared epoch loop. Mutates ``model``; returns the report."""
    report = TrainReport(stage=config.stage, monitor=monitor)
    state = AdamState()
    batch = min(config.batch_size, y.size)
    best_score = -np.inf
    best_state = model.state()
    T = config.epochs
    for epoch in range(T):
        lr = cosine_lr(epoch, T, config.lr_max, config.lr_min)
        plan = plan_fn(_epoch_seed(config.seed, config.stage, epoch, 1))
        total, count = 0.0, 0
        for idx in plan.batches(batch):
            xb = _pick_views(X, idx, config, config.seed, config.stage, epoch)
            cache = model.head(xb) if head_only else model.forward(xb)
            loss, dlogits = batch_loss_and_grad(cache.logits, y[idx], loss_config, weights)
            grads = flatten_grads(model.backward(cache, dlogits))
            params = {n: model.get_parameter(n) for n in names}
            params, state = optimizer_step(params, {n: grads[n] for n in names}, state, lr, config)
            for n in names:
                model.set_parameter(n, params[n])
            total += loss * idx.size
            count += idx.size
        m = _validate(model, X_val, y_val, features=head_only)
        report.epochs.append(EpochRecord(epoch, total / count, m.macro_f1, m.balanced_accuracy, lr))
        score = m.macro_f1 if monitor == "val_macro_f1" else m.balanced_accuracy
        logger.debug("stage %d epoch %d loss %.5f %s %.4f", config.stage, epoch, total / count,
                     monitor, score)
        if score > best_score:
            best_score = score
            report.best_epoch = epoch
            best_state = model.state()
        elif epoch - report.best_epoch >= config.early_stopping_patience:
            report.stopping_reason = "early_stopping"
            break
    else:
        report.stopping_reason = "max_epochs"
    model.load_state(best_state)
    return report


def train_stage1(X, y, X_val, y_val, model, config):
    """End-to-end training with unweighted cross entropy.

    Returns a trained copy of ``model`` (best validation Macro-F1 epoch)
    and the :class:`TrainReport`.
    """
    X, y, X_val, y_val = _check_dataset(X, y, X_val, y_val, model)
    model = model.copy()
    model.frozen = False
    names = model.parameter_names()
    report = _fit_loop(
        model, names, X, y, X_val, y_val, config,
        plan_fn=lambda s: instance_balanced_plan(y, s),
        loss_config=PLAIN_CE,
        weights=ClassWeights.uniform(model.n_classes),
        monitor="val_macro_f1",
        head_only=False,
    )
    model.trained_stage = 1
    return model, report


def train_stage2(X, y, X_val, y_val, model, config, allow_untrained=False):
    """Classifier re-training on a frozen backbone.

    The head is re-drawn from ``config.seed`` and trained on class-balanced
    batches with the hybrid loss; early stopping watches validation
    balanced accuracy. The backbone is bit-identical on return.
    """
    if model.trained_stage < 1 and not allow_untrained:
        raise MissingStage1("model has no trained backbone; pass allow_untrained=True to override")
    X, y, X_val, y_val = _check_dataset(X, y, X_val, y_val, model)
    model = model.copy()
    model.frozen = True
    before = model.backbone_hash()
    model.reinit_classifier(_epoch_seed(config.seed, 2, 0, 3))

    # fixed embeddings, computed once per view
    n, V, d = X.shape
    Z = model.features(X.reshape(n * V, d)).reshape(n, V, model.feature_dim)
    Z_val = model.features(X_val)

    counts = np.bincount(y, minlength=model.n_classes)
    present = counts > 0
    weights = effective_number_weights(np.maximum(counts, 1), config.beta, config.normalize_weights)
    if not present.all():
        logger.warning("classes %s absent from training data", np.flatnonzero(~present).tolist())

    report = _fit_loop(
        model, ["W", "b"], Z, y, Z_val, y_val, config,
        plan_fn=lambda s: class_balanced_plan(y, y.size, s),
        loss_config=config.loss_config,
        weights=weights,
        monitor="val_balanced_accuracy",
        head_only=True,
    )
    if model.backbone_hash() != before:
        raise RuntimeError("backbone changed during stage 2")
    model.trained_stage = 2
    return model, report


class DecoupledClassifier(ClassifierMixin, BaseEstimator):
    """Two-stage long-tail classifier with an sklearn interface.

    ``fit`` carves a stratified validation split, runs stage 1 and, when
    ``stages == 2``, classifier re-training. Epoch counts and learning
    rates default per stage to 100 / 1e-4 and 50 / 1e-3.

    Attributes
    ----------
    classes_ : ndarray
    network_ : Network
        Final model.
    stage1_network_ : Network
    stage1_report_, stage2_report_ : TrainReport
    """

    def __init__(
        self,
        hidden_sizes=DEFAULT_HIDDEN_SIZES,
        stages=2,
        stage1_epochs=100,
        stage2_epochs=50,
        stage1_lr=1e-4,
        stage2_lr=1e-3,
        lr_min=0.0,
        batch_size=256,
        weight_decay=0.01,
        early_stopping_patience=10,
        beta=0.9999,
        gamma=2.0,
        lam=0.5,
        val_fraction=0.1,
        seed=0,
    ):
        self.hidden_sizes = hidden_sizes
        self.stages = stages
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.stage1_lr = stage1_lr
        self.stage2_lr = stage2_lr
        self.lr_min = lr_min
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.early_stopping_patience = early_stopping_patience
        self.beta = beta
        self.gamma = gamma
        self.lam = lam
        self.val_fraction = val_fraction
        self.seed = seed

    def _config(self, stage):
        return TrainConfig(
            stage=stage,
            epochs=self.stage1_epochs if stage == 1 else self.stage2_epochs,
            lr_max=self.stage1_lr if stage == 1 else self.stage2_lr,
            lr_min=self.lr_min,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            early_stopping_patience=self.early_stopping_patience,
            seed=self.seed,
            beta=self.beta,
            gamma=self.gamma,
            lam=self.lam,
            hidden_sizes=self.hidden_sizes,
            val_fraction=self.val_fraction,
        )

    def fit(self, X, y):
        if self.stages not in (1, 2):
            raise ValueError("stages must be 1 or 2")
        X = check_matrix(X)
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least 2 classes")
        if y_idx.size != X.shape[0]:
            raise DimensionMismatch("X and y lengths differ")
        self.n_features_in_ = X.shape[1]
        tr, va = stratified_split(y_idx, self.val_fraction, self.seed)
        self.train_indices_, self.val_indices_ = tr, va

        cfg1 = self._config(1)
        net = Network(X.shape[1], self.classes_.size, cfg1.hidden_sizes, seed=self.seed)
        net, self.stage1_report_ = train_stage1(X[tr], y_idx[tr], X[va], y_idx[va], net, cfg1)
        self.stage1_network_ = net
        self.stage2_report_ = None
        if self.stages == 2:
            net, self.stage2_report_ = train_stage2(
                X[tr], y_idx[tr], X[va], y_idx[va], net, self._config(2)
            )
        self.network_ = net
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        return self.network_.predict_proba(check_matrix(X, self.n_features_in_))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]
