"""Multi-class attentional regions for multi-label image recognition.

A small numpy implementation of a global/local two-stream classifier: class
attention maps from a shared network are turned into image regions, the
regions are re-classified by the same network, and the two streams are fused
with a category-wise max.
"""
from .backbone import BackboneConfig, ModelParams, init_params, load_checkpoint, save_checkpoint
from .metrics import MetricReport, evaluate, mean_average_precision
from .region import McarConfig, Region, localize
from .synth import SynthSpec, generate, load
from .tensor import PoolingStrategy
from .two_stream import TrainConfig, predict, predict_batch, train

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "McarConfig",
    "MetricReport",
    "ModelParams",
    "PoolingStrategy",
    "Region",
    "SynthSpec",
    "TrainConfig",
    "evaluate",
    "generate",
    "init_params",
    "load",
    "load_checkpoint",
    "localize",
    "mean_average_precision",
    "predict",
    "predict_batch",
    "save_checkpoint",
    "train",
]
