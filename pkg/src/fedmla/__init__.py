"""Federated segmentation simulator with model-level attention (MLA) and
batch-instance normalization (BIN) for domain generalization."""

from .config import ExperimentConfig, load_config
from .estimator import FederatedSegmenter
from .fedsim import aggregate, fedavg_weights, load_checkpoint, run_federation, save_checkpoint
from .metrics import EvalReport, asd, dsc, evaluate
from .mla import DomainAttention, DomainFeatureBank, FeatureExtractor, infer_weights, mla_inference, train_dam
from .segnet import BlockKind, NetConfig, SegNet, build_ibn_segnet, build_segnet
from .synthdata import DomainStyle, default_styles, generate

__version__ = "0.1.0"

__all__ = [
    "BlockKind", "DomainAttention", "DomainFeatureBank", "DomainStyle", "EvalReport", "ExperimentConfig",
    "FeatureExtractor", "FederatedSegmenter", "NetConfig", "SegNet", "aggregate", "asd", "build_ibn_segnet",
    "build_segnet", "default_styles", "dsc", "evaluate", "fedavg_weights", "generate", "infer_weights",
    "load_checkpoint", "load_config", "mla_inference", "run_federation", "save_checkpoint", "train_dam",
]
