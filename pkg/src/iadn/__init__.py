"""Illumination-aware two-stream pedestrian detection on paired visible/thermal images.

Everything runs on numpy with a small reverse-mode tape; hot loops have
numba twins (set ``IADN_NUMBA=0`` to force the numpy path).
"""

from ._kernels import BACKEND
from .dataio import Annotation, MultispectralFrame, generate_synthetic_dataset, load_dataset, save_dataset
from .errors import (
    ConfigError,
    DataError,
    EvaluationError,
    FormatVersionError,
    IADNError,
    NumericDomainError,
    ShapeError,
    UsageError,
)
from .evaluation import DetectConfig, EvalCurve, EvalReport, Setting, evaluate_detections, evaluate_model
from .netgraph import (
    IlluminationWeights,
    Network,
    NetworkConfig,
    RawOutputs,
    build_network,
    forward,
    load_checkpoint,
    parse_variant,
    save_checkpoint,
)
from .training import LossBreakdown, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Annotation",
    "MultispectralFrame",
    "generate_synthetic_dataset",
    "load_dataset",
    "save_dataset",
    "ConfigError",
    "DataError",
    "EvaluationError",
    "FormatVersionError",
    "IADNError",
    "NumericDomainError",
    "ShapeError",
    "UsageError",
    "DetectConfig",
    "EvalCurve",
    "EvalReport",
    "Setting",
    "evaluate_detections",
    "evaluate_model",
    "IlluminationWeights",
    "Network",
    "NetworkConfig",
    "RawOutputs",
    "build_network",
    "forward",
    "load_checkpoint",
    "parse_variant",
    "save_checkpoint",
    "LossBreakdown",
    "TrainConfig",
    "train",
]
