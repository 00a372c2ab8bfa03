"""Token-adaptive layer execution with quantization-robust routing, at toy scale."""

from .model import ModelConfig, Model, init_model, forward_infer, forward_train, forward_full
from .taskgen import TaskConfig, Dataset, generate_dataset
from .trainer import TrainConfig, train
from .quantizer import QuantConfig, quantize_model, magnitude_prune
from .calibrator import SearchConfig, calibrate_threshold

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "Model", "init_model", "forward_infer", "forward_train", "forward_full",
    "TaskConfig", "Dataset", "generate_dataset", "TrainConfig", "train",
    "QuantConfig", "quantize_model", "magnitude_prune", "SearchConfig", "calibrate_threshold",
]
