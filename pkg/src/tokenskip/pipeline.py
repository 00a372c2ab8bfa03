"""End-to-end experiment: train, quantize, calibrate, evaluate.

Used by the acceptance suite and the ``report`` subcommand; each function is a
plain composition of the public module APIs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .calibrator import SearchConfig, calibrate_threshold
from .metrics import path_change_rate
from .model import Model, ModelConfig, forward_infer, init_model
from .numcore import RngState
from .quantizer import QuantConfig, quantize_model
from .taskgen import Dataset, TaskConfig, generate_dataset
from .trainer import TrainConfig, TrainingLog, train

DEFAULT_TASK = TaskConfig()
DEFAULT_MODEL = ModelConfig()
DEFAULT_TRAIN = TrainConfig()


def build_dataset(seed: int, task: TaskConfig = DEFAULT_TASK) -> Dataset:
    return generate_dataset(replace(task, seed=seed))


def train_run(dataset: Dataset, seed: int, lambda2: float, model_cfg: ModelConfig = DEFAULT_MODEL,
              train_cfg: TrainConfig = DEFAULT_TRAIN) -> tuple[Model, TrainingLog]:
    """Fresh model and training, both seeded by ``seed``."""
    model = init_model(model_cfg, RngState(seed))
    return train(model, dataset, replace(train_cfg, seed=seed, lambda2=lambda2))


def accuracy_and_trace(model: Model, x, y, theta: float):
    logits, trace = forward_infer(model, x, theta)
    return float(np.mean(np.argmax(logits, axis=1) == y)), trace


@dataclass
class QuantOutcome:
    bits: int
    theta: float
    accuracy: float
    exec_ratio: float
    path_change: float


@dataclass
class PipelineResult:
    lambda2: float
    fp_accuracy: float
    fp_exec_ratio: float
    quantized: dict[int, QuantOutcome] = field(default_factory=dict)

    def drop(self, bits: int) -> float:
        return self.fp_accuracy - self.quantized[bits].accuracy


def evaluate_pipeline(model: Model, dataset: Dataset, lambda2: float, calibrate: bool,
                      bits_list=(4, 3), group_size: int = 128) -> PipelineResult:
    """FP accuracy at theta=0.5, then per bit-width accuracy at theta=0.5 or theta*."""
    x_test, y_test = dataset.split("test")
    x_cal, y_cal = dataset.split("calib")
    fp_acc, fp_trace = accuracy_and_trace(model, x_test, y_test, 0.5)
    res = PipelineResult(lambda2, fp_acc, float(fp_trace.executed.mean()))
    for bits in bits_list:
        qmodel, _ = quantize_model(model, QuantConfig(bits=bits, group_size=group_size))
        theta = calibrate_threshold(qmodel, x_cal, y_cal, SearchConfig()).selected_theta if calibrate else 0.5
        acc, trace = accuracy_and_trace(qmodel, x_test, y_test, theta)
        _, trace_half = forward_infer(qmodel, x_test, 0.5)
        res.quantized[bits] = QuantOutcome(bits, theta, acc, float(trace.executed.mean()),
                                           path_change_rate(fp_trace, trace_half))
    return res
