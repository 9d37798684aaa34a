"""Minimal feed-forward network engine: layers, backprop, SGD training, model files."""

from .arch import ArchitectureSpec, ArchitectureError, Conv, FullyConnected, MaxPool, Softmax, preset
from .model import (
    LabelError,
    ModelParams,
    ObjectiveSpec,
    Prediction,
    ShapeError,
    forward,
    init_params,
    input_gradient,
    logits_of,
    loss_and_param_gradients,
    param_names_and_shapes,
    predict_labels,
    smoothness_margin,
)
from .train import (
    EpochStats,
    PlateauTracker,
    SgdState,
    StopRule,
    TrainHistory,
    TrainHyper,
    TrainingDivergedError,
    accuracy,
    sgd_momentum_step,
    train,
)
from .serialize import (
    BadMagicError,
    ChecksumError,
    ModelFormatError,
    TruncatedError,
    VersionError,
    file_hash,
    load_model,
    model_bytes,
    model_hash,
    save_model,
)

__all__ = [name for name in dir() if not name.startswith("_")]
