"""Stain-normalized, decoupled two-stage training for long-tailed classification."""

from .dataio import ImagePreprocessor, PreprocessConfig, load_checkpoint, load_manifest, save_checkpoint
from .inference import TTAEnsembleClassifier, argmax_class, ensemble_predict, tta_views
from .losses import LossConfig, effective_number_weights, hybrid_loss, hybrid_loss_grad
from .metrics import compute_metrics, confusion, evaluate
from .model import Network
from .sampling import class_balanced_plan, class_prior, instance_balanced_plan
from .stain_norm import MacenkoNormalizer, StainReference, estimate_stain_matrix, normalize_image, rgb_to_od
from .synthgen import SynthBlobSpec, SynthStainSpec, synth_blobs, synth_stained_image
from .trainer import DecoupledClassifier, TrainConfig, cosine_lr, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "DecoupledClassifier",
    "ImagePreprocessor",
    "LossConfig",
    "MacenkoNormalizer",
    "Network",
    "PreprocessConfig",
    "StainReference",
    "SynthBlobSpec",
    "SynthStainSpec",
    "TTAEnsembleClassifier",
    "TrainConfig",
    "argmax_class",
    "class_balanced_plan",
    "class_prior",
    "compute_metrics",
    "confusion",
    "cosine_lr",
    "effective_number_weights",
    "ensemble_predict",
    "estimate_stain_matrix",
    "evaluate",
    "hybrid_loss",
    "hybrid_loss_grad",
    "instance_balanced_plan",
    "load_checkpoint",
    "load_manifest",
    "normalize_image",
    "rgb_to_od",
    "save_checkpoint",
    "synth_blobs",
    "synth_stained_image",
    "train_stage1",
    "train_stage2",
    "tta_views",
]
