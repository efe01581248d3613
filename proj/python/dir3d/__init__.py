"""Landmark-weighted 3D Inception-ResNet + LSTM expression recognition."""

from ._core import (
    CompatibilityError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    Error,
    FormatError,
    IoError,
    Model,
    ModelConfig,
    confusion_matrix,
    conv3d,
    eval_cross_database,
    eval_subject_independent,
    gen_synth,
    grad_check,
    load_tensor,
    make_subject_folds,
    pool3d,
    save_tensor,
    shape_trace,
    weight_map,
)

__all__ = [name for name in dir() if not name.startswith("_")]
