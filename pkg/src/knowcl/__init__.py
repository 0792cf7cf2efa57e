"""Semi-supervised contrastive learning for pixel-level hyperspectral classification."""

from .backbone import BackboneConfig, KnowCLNet, load_checkpoint, save_checkpoint
from .datacube import Cube, GroundTruth, SynthSpec, load_cube, normalize, save_cube, synth_cube
from .estimator import KnowCLClassifier
from .evaluator import LinearProbeClassifier, MetricsReport, WeightedKNNClassifier, confusion, metrics
from .losses import adaptive_fused, contrastive_loss, cross_entropy
from .patcher import AugmentConfig
from .spectral import PcaModel, fit_pca, apply_pca, group_bands
from .splitter import Split, class_counts, split_disjoint
from .trainer import TrainConfig, cosine_lr

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "BackboneConfig",
    "Cube",
    "GroundTruth",
    "KnowCLClassifier",
    "KnowCLNet",
    "LinearProbeClassifier",
    "MetricsReport",
    "PcaModel",
    "Split",
    "SynthSpec",
    "TrainConfig",
    "WeightedKNNClassifier",
    "adaptive_fused",
    "apply_pca",
    "class_counts",
    "confusion",
    "contrastive_loss",
    "cosine_lr",
    "cross_entropy",
    "fit_pca",
    "group_bands",
    "load_checkpoint",
    "load_cube",
    "metrics",
    "normalize",
    "save_checkpoint",
    "save_cube",
    "split_disjoint",
    "synth_cube",
]
