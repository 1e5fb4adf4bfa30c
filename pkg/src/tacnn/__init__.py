"""Topology-aware CNN for skeleton action recognition, on a small numpy autodiff engine."""

from .augment import BodyPartition, MixPolicy, apply_batch_mix, default_partition, scale_coordinates, \
    skeleton_mix, vanilla_mixup
from .data import SkeletonSample, synth_dataset
from .errors import (
    ConfigurationError,
    FormatError,
    InputError,
    NumericError,
    ParseError,
    ShapeError,
    TacnnError,
    UsageError,
)
from .estimator import BoneTransformer, CoordinateScaler, TaCNNClassifier
from .model import ModelConfig, TaCNN, ensemble_predict, export_attention
from .tensor import Tape, Tensor4, backward, no_grad

__version__ = "0.1.0"
