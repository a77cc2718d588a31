from kml.mlengine.model import (
    InvalidSpec,
    LayerSpec,
    MetricsReport,
    ModelSpec,
    OptimizerSpec,
    TrainingConfig,
    parse_model_spec,
    parse_training_config,
)
from kml.mlengine.engine import (
    InvalidLabel,
    ShapeMismatch,
    TrainedModel,
    compute_gradients,
    evaluate,
    forward,
    init_params,
    predict,
    train,
)
from kml.mlengine.weights import CorruptWeights, SpecMismatch, load_weights, save_weights

__all__ = [
    "CorruptWeights",
    "InvalidLabel",
    "InvalidSpec",
    "LayerSpec",
    "MetricsReport",
    "ModelSpec",
    "OptimizerSpec",
    "ShapeMismatch",
    "SpecMismatch",
    "TrainedModel",
    "TrainingConfig",
    "compute_gradients",
    "evaluate",
    "forward",
    "init_params",
    "load_weights",
    "parse_model_spec",
    "parse_training_config",
    "predict",
    "save_weights",
    "train",
]
