"""xmed: a small, dependency-light CNN engine for explainable binary image
classification — hand-rolled autodiff layers, mini ResNet/DenseNet models,
a plateau/early-stop training recipe, ranking metrics, and Grad-CAM
overlays, with a train/eval/explain CLI.
"""

from .augment import AugmentConfig, augment_sample
from .data import (Dataset, Sample, SplitSpec, generate_synthetic,
                   load_dataset, split_dataset)
from .errors import (ConfigError, DataError, FormatError,
                     MetricUndefinedError, ShapeError, StaleCacheError,
                     XmedError)
from .estimator import CNNClassifier
from .gradcam import Heatmap, OverlayImage, explain
from .metrics import MetricsReport, evaluate
from .model import GraphModel, build_densenet_mini, build_resnet_mini
from .modelfile import load_model, save_model
from .train import TrainConfig, TrainLog, train

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "augment_sample",
    "Dataset", "Sample", "SplitSpec", "generate_synthetic", "load_dataset",
    "split_dataset",
    "XmedError", "ShapeError", "ConfigError", "StaleCacheError",
    "FormatError", "DataError", "MetricUndefinedError",
    "CNNClassifier",
    "Heatmap", "OverlayImage", "explain",
    "MetricsReport", "evaluate",
    "GraphModel", "build_resnet_mini", "build_densenet_mini",
    "load_model", "save_model",
    "TrainConfig", "TrainLog", "train",
    "__version__",
]
